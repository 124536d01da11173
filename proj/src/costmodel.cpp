#include "tnet/costmodel.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tnet/error.hpp"

namespace tnet {

using nlohmann::json;

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::multiplication: return "multiplication";
    case OpKind::addition: return "addition";
    case OpKind::subtraction: return "subtraction";
    case OpKind::shift: return "shift";
    case OpKind::logic_or: return "or";
    case OpKind::logic_and: return "and";
    case OpKind::logic_not: return "not";
    case OpKind::logic_xor: return "xor";
    case OpKind::logic_xnor: return "xnor";
    case OpKind::comparison: return "comparison";
  }
  throw InvariantError("unknown op kind");
}

namespace {

const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::multiplication, OpKind::addition,  OpKind::subtraction, OpKind::shift,
      OpKind::logic_or,       OpKind::logic_and, OpKind::logic_not,   OpKind::logic_xor,
      OpKind::logic_xnor,     OpKind::comparison};
  return kinds;
}

OpKind op_kind_from_name(const std::string& name) {
  for (OpKind k : all_op_kinds()) {
    if (name == op_kind_name(k)) return k;
  }
  throw FormatError("unknown operation '" + name + "' in cost table");
}

}  // namespace

OpCostTable OpCostTable::defaults() {
  OpCostTable t;
  t.costs_[OpKind::multiplication] = {2.48e-1, 488.14};
  t.costs_[OpKind::addition] = {1.77e-2, 58.80};
  t.costs_[OpKind::subtraction] = {1.77e-2, 58.80};
  t.costs_[OpKind::shift] = {4.8e-3, 28.31};
  t.costs_[OpKind::logic_or] = {7.12e-3, 36.06};
  t.costs_[OpKind::logic_and] = {5.93e-3, 36.06};
  t.costs_[OpKind::logic_not] = {5.76e-3, 32.93};
  t.costs_[OpKind::logic_xor] = {8.72e-3, 40.77};
  t.costs_[OpKind::logic_xnor] = {8.70e-3, 40.77};
  // Explicit gate pricing (used only under CompareCost::explicit_gate):
  // a dedicated comparator is circuit-wise a subtractor.
  t.costs_[OpKind::comparison] = {1.77e-2, 58.80};
  return t;
}

OpCostTable OpCostTable::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("cost table is not valid JSON: ") + e.what());
  }
  OpCostTable t = defaults();
  if (!doc.is_object()) throw FormatError("cost table must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    const OpKind k = op_kind_from_name(key);
    OpCost c;
    try {
      c.power_mw = value.at("power_mw").get<double>();
      c.area_um2 = value.at("area_um2").get<double>();
    } catch (const json::exception& e) {
      throw FormatError("cost table entry '" + key + "': " + e.what());
    }
    if (!(c.power_mw > 0.0) || !(c.area_um2 > 0.0)) {
      throw FormatError("cost table entry '" + key + "' must have positive costs");
    }
    t.costs_[k] = c;
  }
  return t;
}

OpCostTable OpCostTable::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open cost table file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

const OpCost& OpCostTable::cost(OpKind k) const {
  auto it = costs_.find(k);
  if (it == costs_.end()) {
    throw InvariantError(std::string("cost table has no entry for ") + op_kind_name(k));
  }
  return it->second;
}

void OpCostTable::set(OpKind k, OpCost c) {
  if (!(c.power_mw > 0.0) || !(c.area_um2 > 0.0)) {
    throw InvariantError("op costs must be positive");
  }
  costs_[k] = c;
}

std::string OpCostTable::to_json(int indent) const {
  json doc = json::object();
  for (const auto& [k, c] : costs_) {
    doc[op_kind_name(k)] = json{{"power_mw", c.power_mw}, {"area_um2", c.area_um2}};
  }
  return doc.dump(indent);
}

namespace {

struct Priced {
  double power_mw = 0.0;
  double area_um2 = 0.0;
};

Priced price_counts(const OpCounts& counts, const OpCostTable& table, CompareCost compare) {
  Priced p;
  const auto add = [&](uint64_t n, OpKind k) {
    const OpCost& c = table.cost(k);
    p.power_mw += static_cast<double>(n) * c.power_mw;
    p.area_um2 += static_cast<double>(n) * c.area_um2;
  };
  add(counts.multiplications, OpKind::multiplication);
  add(counts.additions, OpKind::addition);
  add(counts.subtractions, OpKind::subtraction);
  if (compare == CompareCost::explicit_gate) add(counts.comparisons, OpKind::comparison);
  return p;
}

}  // namespace

KernelProfile profile_kernel(KernelKind kind, int kernel_size, const OpCostTable& table,
                             CompareCost compare) {
  if (kernel_size < 1) {
    throw InvariantError("profile_kernel: kernel size must be >= 1, got " +
                         std::to_string(kernel_size));
  }
  const uint64_t s2 = static_cast<uint64_t>(kernel_size) * static_cast<uint64_t>(kernel_size);
  KernelProfile p;
  p.kind = kind;
  p.kernel_size = kernel_size;
  if (kind == KernelKind::conventional) {
    p.counts = OpCounts{s2, s2 - 1, 0, 0};
  } else {
    p.counts = OpCounts{0, s2 - 1, s2, s2};
  }
  const Priced priced = price_counts(p.counts, table, compare);
  p.power_mw = priced.power_mw;
  p.area_um2 = priced.area_um2;
  return p;
}

double savings_ratio(int kernel_size, CostDimension dim, const OpCostTable& table,
                     CompareCost compare) {
  const KernelProfile conv = profile_kernel(KernelKind::conventional, kernel_size, table, compare);
  const KernelProfile thresh = profile_kernel(KernelKind::threshold, kernel_size, table, compare);
  if (dim == CostDimension::power) return conv.power_mw / thresh.power_mw;
  return conv.area_um2 / thresh.area_um2;
}

CostDimension cost_dimension_from_name(const std::string& name) {
  if (name == "power") return CostDimension::power;
  if (name == "area") return CostDimension::area;
  throw FormatError("unknown cost dimension '" + name + "' (want power or area)");
}

bool CostReport::operator==(const CostReport& o) const {
  if (layers.size() != o.layers.size()) return false;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerCost& a = layers[i];
    const LayerCost& b = o.layers[i];
    if (a.layer_id != b.layer_id || a.kind != b.kind || !(a.counts == b.counts) ||
        a.power_mw != b.power_mw || a.area_um2 != b.area_um2) {
      return false;
    }
  }
  return totals == o.totals && power_mw == o.power_mw && area_um2 == o.area_um2 &&
         multiplications == o.multiplications && neuron_kinds == o.neuron_kinds &&
         conventional_power_mw == o.conventional_power_mw &&
         conventional_area_um2 == o.conventional_area_um2 && power_savings == o.power_savings &&
         area_savings == o.area_savings;
}

CostReport profile_network(const Model& m, const OpCostTable& table, CompareCost compare) {
  CostReport report;
  const auto shapes_ok = [&]() { layer_output_shapes(m.spec); };
  shapes_ok();

  for (size_t i = 0; i < m.spec.layers.size(); ++i) {
    const LayerSpec& l = m.spec.layers[i];
    LayerCost lc;
    lc.layer_id = l.id;
    lc.kind = layer_kind_name(l.kind);
    lc.counts = count_layer_ops(m.spec, i);
    const Priced priced = price_counts(lc.counts, table, compare);
    lc.power_mw = priced.power_mw;
    lc.area_um2 = priced.area_um2;
    report.totals += lc.counts;
    report.layers.push_back(std::move(lc));
  }

  const Priced total = price_counts(report.totals, table, compare);
  report.power_mw = total.power_mw;
  report.area_um2 = total.area_um2;
  report.multiplications = report.totals.multiplications;
  report.neuron_kinds = neuron_kind_count(m);

  const Priced twin = price_counts(count_ops_conventional_twin(m), table, compare);
  report.conventional_power_mw = twin.power_mw;
  report.conventional_area_um2 = twin.area_um2;
  report.power_savings = report.power_mw > 0.0 ? twin.power_mw / report.power_mw : 0.0;
  report.area_savings = report.area_um2 > 0.0 ? twin.area_um2 / report.area_um2 : 0.0;
  return report;
}

namespace {

std::string sig3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return std::string(buf);
}

json counts_to_json(const OpCounts& c) {
  return json{{"multiplications", c.multiplications},
              {"additions", c.additions},
              {"subtractions", c.subtractions},
              {"comparisons", c.comparisons}};
}

OpCounts counts_from_json(const json& j) {
  return OpCounts{j.at("multiplications").get<uint64_t>(), j.at("additions").get<uint64_t>(),
                  j.at("subtractions").get<uint64_t>(), j.at("comparisons").get<uint64_t>()};
}

}  // namespace

std::string emit_report(const CostReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::json: {
      json layers = json::array();
      for (const auto& l : report.layers) {
        layers.push_back(json{{"layer_id", l.layer_id},
                              {"kind", l.kind},
                              {"counts", counts_to_json(l.counts)},
                              {"power_mw", l.power_mw},
                              {"area_um2", l.area_um2}});
      }
      json doc{{"layers", layers},
               {"totals", counts_to_json(report.totals)},
               {"power_mw_proxy", report.power_mw},
               {"area_um2_proxy", report.area_um2},
               {"multiplications", report.multiplications},
               {"neuron_kinds", report.neuron_kinds},
               {"conventional_power_mw_proxy", report.conventional_power_mw},
               {"conventional_area_um2_proxy", report.conventional_area_um2},
               {"power_savings", report.power_savings},
               {"area_savings", report.area_savings}};
      return doc.dump(2) + "\n";
    }
    case ReportFormat::csv: {
      std::ostringstream os;
      os << "layer_id,kind,multiplications,additions,subtractions,comparisons,power_mw,area_um2\n";
      for (const auto& l : report.layers) {
        os << l.layer_id << "," << l.kind << "," << l.counts.multiplications << ","
           << l.counts.additions << "," << l.counts.subtractions << "," << l.counts.comparisons
           << "," << l.power_mw << "," << l.area_um2 << "\n";
      }
      os << "total,," << report.totals.multiplications << "," << report.totals.additions << ","
         << report.totals.subtractions << "," << report.totals.comparisons << ","
         << report.power_mw << "," << report.area_um2 << "\n";
      return os.str();
    }
    case ReportFormat::markdown: {
      std::ostringstream os;
      os << "| layer | kind | mul | add | sub | cmp | power (mW, proxy) | area (um^2, proxy) |\n";
      os << "|---|---|---|---|---|---|---|---|\n";
      for (const auto& l : report.layers) {
        os << "| " << l.layer_id << " | " << l.kind << " | " << l.counts.multiplications << " | "
           << l.counts.additions << " | " << l.counts.subtractions << " | "
           << l.counts.comparisons << " | " << sig3(l.power_mw) << " | " << sig3(l.area_um2)
           << " |\n";
      }
      os << "| total |  | " << report.totals.multiplications << " | " << report.totals.additions
         << " | " << report.totals.subtractions << " | " << report.totals.comparisons << " | "
         << sig3(report.power_mw) << " | " << sig3(report.area_um2) << " |\n";
      os << "\n";
      os << "multiplications: " << report.multiplications
         << ", neuron kinds: " << report.neuron_kinds << "\n";
      os << "savings vs all-conventional twin: power " << sig3(report.power_savings)
         << "x, area " << sig3(report.area_savings) << "x\n";
      return os.str();
    }
  }
  throw FormatError("unknown report format");
}

ReportFormat report_format_from_name(const std::string& name) {
  if (name == "json") return ReportFormat::json;
  if (name == "csv") return ReportFormat::csv;
  if (name == "markdown") return ReportFormat::markdown;
  throw FormatError("unknown report format '" + name + "' (want json, csv, or markdown)");
}

CostReport parse_report(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("report is not valid JSON: ") + e.what());
  }
  CostReport r;
  try {
    for (const auto& jl : doc.at("layers")) {
      LayerCost lc;
      lc.layer_id = jl.at("layer_id").get<int>();
      lc.kind = jl.at("kind").get<std::string>();
      lc.counts = counts_from_json(jl.at("counts"));
      lc.power_mw = jl.at("power_mw").get<double>();
      lc.area_um2 = jl.at("area_um2").get<double>();
      r.layers.push_back(std::move(lc));
    }
    r.totals = counts_from_json(doc.at("totals"));
    r.power_mw = doc.at("power_mw_proxy").get<double>();
    r.area_um2 = doc.at("area_um2_proxy").get<double>();
    r.multiplications = doc.at("multiplications").get<uint64_t>();
    r.neuron_kinds = doc.at("neuron_kinds").get<int>();
    r.conventional_power_mw = doc.at("conventional_power_mw_proxy").get<double>();
    r.conventional_area_um2 = doc.at("conventional_area_um2_proxy").get<double>();
    r.power_savings = doc.at("power_savings").get<double>();
    r.area_savings = doc.at("area_savings").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed cost report: ") + e.what());
  }
  return r;
}

}  // namespace tnet
