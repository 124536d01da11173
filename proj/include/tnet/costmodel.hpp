#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tnet/network.hpp"

namespace tnet {

enum class OpKind {
  multiplication,
  addition,
  subtraction,
  shift,
  logic_or,
  logic_and,
  logic_not,
  logic_xor,
  logic_xnor,
  comparison,
};

const char* op_kind_name(OpKind k);

struct OpCost {
  double power_mw = 0.0;
  double area_um2 = 0.0;
};

// Per-operation circuit cost figures. The default table carries the 28nm /
// 50 MHz synthesis numbers this model is calibrated on; all derived power and
// area totals are proxies, not cycle-accurate measurements.
class OpCostTable {
 public:
  static OpCostTable defaults();
  static OpCostTable from_json(const std::string& text);
  static OpCostTable from_file(const std::string& path);

  const OpCost& cost(OpKind k) const;
  void set(OpKind k, OpCost c);
  std::string to_json(int indent = -1) const;

 private:
  std::map<OpKind, OpCost> costs_;
};

// How a threshold element's gate comparison is costed. The default treats it
// as the sign bit of the subtraction already being paid for (zero marginal
// cost); the explicit mode charges the table's `comparison` entry per element.
enum class CompareCost { sign_bit, explicit_gate };

enum class KernelKind { conventional, threshold };
enum class CostDimension { power, area };

CostDimension cost_dimension_from_name(const std::string& name);

struct KernelProfile {
  KernelKind kind = KernelKind::conventional;
  int kernel_size = 1;
  OpCounts counts;
  double power_mw = 0.0;
  double area_um2 = 0.0;
};

// One S x S kernel: conventional = S^2 multiplications + (S^2 - 1) additions;
// threshold = S^2 subtractions + (S^2 - 1) additions, comparisons costed per
// `compare`.
KernelProfile profile_kernel(KernelKind kind, int kernel_size, const OpCostTable& table,
                             CompareCost compare = CompareCost::sign_bit);

// conventional kernel total / threshold kernel total along one dimension.
double savings_ratio(int kernel_size, CostDimension dim, const OpCostTable& table,
                     CompareCost compare = CompareCost::sign_bit);

struct LayerCost {
  int layer_id = -1;
  std::string kind;
  OpCounts counts;
  double power_mw = 0.0;
  double area_um2 = 0.0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  OpCounts totals;
  double power_mw = 0.0;
  double area_um2 = 0.0;
  uint64_t multiplications = 0;
  int neuron_kinds = 0;
  // All-conventional twin of the same architecture, the savings reference.
  double conventional_power_mw = 0.0;
  double conventional_area_um2 = 0.0;
  double power_savings = 0.0;  // 0 when the network costs nothing
  double area_savings = 0.0;

  bool operator==(const CostReport& o) const;
};

// Op inventory of one inference priced by the table.
CostReport profile_network(const Model& m, const OpCostTable& table,
                           CompareCost compare = CompareCost::sign_bit);

enum class ReportFormat { json, csv, markdown };
ReportFormat report_format_from_name(const std::string& name);

// json round-trips through parse_report; csv carries one row per layer plus a
// totals row; markdown is a table with a trailing savings-ratio line. Ratios
// print with 3 significant figures.
std::string emit_report(const CostReport& report, ReportFormat format);
CostReport parse_report(const std::string& json_text);

}  // namespace tnet
