#include "tnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tnet/digest.hpp"
#include "tnet/error.hpp"
#include "tnet/rng.hpp"

namespace tnet {

using nlohmann::json;

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::t_conv: return "t_conv";
    case LayerKind::t_linear: return "t_linear";
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::downsample_conv: return "downsample_conv";
    case LayerKind::residual_add: return "residual_add";
    case LayerKind::flatten: return "flatten";
  }
  throw InvariantError("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "t_conv") return LayerKind::t_conv;
  if (name == "t_linear") return LayerKind::t_linear;
  if (name == "conv") return LayerKind::conv;
  if (name == "linear") return LayerKind::linear;
  if (name == "downsample_conv") return LayerKind::downsample_conv;
  if (name == "residual_add") return LayerKind::residual_add;
  if (name == "flatten") return LayerKind::flatten;
  throw FormatError("unknown layer kind '" + name + "'");
}

bool is_threshold_kind(LayerKind k) {
  return k == LayerKind::t_conv || k == LayerKind::t_linear || k == LayerKind::downsample_conv;
}
bool is_conventional_kind(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::linear;
}
bool is_conv_kind(LayerKind k) {
  return k == LayerKind::t_conv || k == LayerKind::conv || k == LayerKind::downsample_conv;
}
bool is_linear_kind(LayerKind k) {
  return k == LayerKind::t_linear || k == LayerKind::linear;
}

namespace {

bool layer_has_weights(LayerKind k) { return is_conv_kind(k) || is_linear_kind(k); }

std::string layer_tag(const LayerSpec& l) {
  return std::string(layer_kind_name(l.kind)) + " (id " + std::to_string(l.id) + ")";
}

}  // namespace

const LayerSpec* NetworkSpec::find(int id) const {
  for (const auto& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

int NetworkSpec::index_of(int id) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

void NetworkSpec::validate() const {
  if (input_shape.empty()) throw ShapeError("network spec has empty input shape");
  for (size_t e : input_shape) {
    if (e < 1) throw ShapeError("network input shape has extent < 1");
  }
  std::set<int> ids;
  for (const auto& l : layers) {
    if (l.id < 0) throw InvariantError("layer id must be >= 0");
    if (!ids.insert(l.id).second) {
      throw InvariantError("duplicate layer id " + std::to_string(l.id));
    }
  }
  for (const auto& l : layers) {
    if (l.kind == LayerKind::residual_add) {
      const int src_idx = index_of(l.residual_source);
      if (src_idx < 0 || src_idx >= index_of(l.id)) {
        throw InvariantError("residual_add (id " + std::to_string(l.id) +
                             ") must source an earlier layer, got id " +
                             std::to_string(l.residual_source));
      }
      const bool edge_found =
          std::any_of(residual_edges.begin(), residual_edges.end(), [&](const ResidualEdge& e) {
            return e.source == l.residual_source && e.target == l.id;
          });
      if (!edge_found) {
        throw InvariantError("residual_add (id " + std::to_string(l.id) +
                             ") has no matching entry in residual_edges");
      }
    }
  }
  for (const auto& e : residual_edges) {
    const LayerSpec* t = find(e.target);
    if (t == nullptr || t->kind != LayerKind::residual_add || t->residual_source != e.source) {
      throw InvariantError("residual edge " + std::to_string(e.source) + " -> " +
                           std::to_string(e.target) + " does not match a residual_add layer");
    }
  }
  for (int id : mi_ids) {
    const LayerSpec* l = find(id);
    if (l == nullptr) throw InvariantError("mi id " + std::to_string(id) + " references no layer");
    if (!is_conventional_kind(l->kind)) {
      throw InvariantError("mi id " + std::to_string(id) + " references a non-conventional layer");
    }
  }
  layer_output_shapes(*this);  // composition check
}

std::vector<std::vector<size_t>> layer_output_shapes(const NetworkSpec& spec) {
  std::vector<std::vector<size_t>> shapes;
  shapes.reserve(spec.layers.size());
  std::vector<size_t> cur = spec.input_shape;

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::t_conv:
      case LayerKind::conv:
      case LayerKind::downsample_conv: {
        if (cur.size() != 3) {
          throw ShapeError(layer_tag(l) + ": expected [C, H, W] input, got " +
                           shape_to_string(cur));
        }
        if (cur[0] != static_cast<size_t>(l.geom.in_channels)) {
          throw ShapeError(layer_tag(l) + ": input has " + std::to_string(cur[0]) +
                           " channels, geometry expects " + std::to_string(l.geom.in_channels));
        }
        l.geom.validate(static_cast<int>(cur[1]), static_cast<int>(cur[2]));
        cur = {static_cast<size_t>(l.geom.out_channels),
               static_cast<size_t>(l.geom.out_extent(static_cast<int>(cur[1]))),
               static_cast<size_t>(l.geom.out_extent(static_cast<int>(cur[2])))};
        break;
      }
      case LayerKind::t_linear:
      case LayerKind::linear: {
        if (shape_product(cur) != static_cast<size_t>(l.in_features)) {
          throw ShapeError(layer_tag(l) + ": input " + shape_to_string(cur) + " has " +
                           std::to_string(shape_product(cur)) + " features, layer expects " +
                           std::to_string(l.in_features));
        }
        cur = {static_cast<size_t>(l.out_features)};
        break;
      }
      case LayerKind::flatten: {
        cur = {shape_product(cur)};
        break;
      }
      case LayerKind::residual_add: {
        const int src_idx = spec.index_of(l.residual_source);
        if (src_idx < 0 || static_cast<size_t>(src_idx) >= i) {
          throw InvariantError(layer_tag(l) + ": bad residual source");
        }
        std::vector<size_t> skip = shapes[src_idx];
        if (l.projection.has_value()) {
          const ConvGeometry& pg = *l.projection;
          if (skip.size() != 3 || skip[0] != static_cast<size_t>(pg.in_channels)) {
            throw ShapeError(layer_tag(l) + ": projection input mismatch, skip shape " +
                             shape_to_string(skip));
          }
          pg.validate(static_cast<int>(skip[1]), static_cast<int>(skip[2]));
          skip = {static_cast<size_t>(pg.out_channels),
                  static_cast<size_t>(pg.out_extent(static_cast<int>(skip[1]))),
                  static_cast<size_t>(pg.out_extent(static_cast<int>(skip[2])))};
        }
        if (skip != cur) {
          throw ShapeError(layer_tag(l) + ": skip shape " + shape_to_string(skip) +
                           " != main path shape " + shape_to_string(cur));
        }
        break;
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

std::string table_signature(const NetworkSpec& spec) {
  const bool any_conv = std::any_of(spec.layers.begin(), spec.layers.end(),
                                    [](const LayerSpec& l) { return is_conv_kind(l.kind); });

  // A residual_add preceded by two convolutions prints as one BasicBlock.
  std::vector<int> block_of(spec.layers.size(), -1);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::residual_add && i >= 2 &&
        is_conv_kind(spec.layers[i - 1].kind) && is_conv_kind(spec.layers[i - 2].kind)) {
      block_of[i - 2] = block_of[i - 1] = block_of[i] = static_cast<int>(i);
    }
  }

  std::vector<std::string> atoms;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (block_of[i] >= 0) {
      if (static_cast<size_t>(block_of[i]) == i) {
        atoms.push_back("BasicBlock(" + std::to_string(spec.layers[i - 1].geom.out_channels) +
                        ")");
      }
      continue;
    }
    switch (l.kind) {
      case LayerKind::t_conv:
      case LayerKind::conv:
        atoms.push_back("CONV" + std::to_string(l.geom.kernel_size) + "(" +
                        std::to_string(l.geom.out_channels) + ")");
        break;
      case LayerKind::downsample_conv:
        atoms.push_back("DOWN" + std::to_string(l.geom.kernel_size) + "(" +
                        std::to_string(l.geom.out_channels) + ")");
        break;
      case LayerKind::t_linear:
      case LayerKind::linear:
        atoms.push_back(any_conv ? "FC"
                                 : "N" + std::to_string(l.in_features) + "(" +
                                       std::to_string(l.out_features) + ")");
        break;
      case LayerKind::residual_add:
        atoms.push_back("ADD");
        break;
      case LayerKind::flatten:
        break;
    }
  }
  std::string out;
  for (size_t i = 0; i < atoms.size(); ++i) {
    if (i) out += "-";
    out += atoms[i];
  }
  return out;
}

namespace {

json geometry_to_json(const ConvGeometry& g) {
  return json{{"kernel_size", g.kernel_size}, {"in_channels", g.in_channels},
              {"out_channels", g.out_channels}, {"stride", g.stride}, {"pad", g.pad}};
}

ConvGeometry geometry_from_json(const json& j) {
  ConvGeometry g;
  g.kernel_size = j.at("kernel_size").get<int>();
  g.in_channels = j.at("in_channels").get<int>();
  g.out_channels = j.at("out_channels").get<int>();
  g.stride = j.at("stride").get<int>();
  g.pad = j.at("pad").get<int>();
  return g;
}

}  // namespace

std::string spec_to_json(const NetworkSpec& spec, int indent) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json jl{{"id", l.id}, {"kind", layer_kind_name(l.kind)}};
    if (is_conv_kind(l.kind)) jl["geometry"] = geometry_to_json(l.geom);
    if (is_linear_kind(l.kind)) {
      jl["in_features"] = l.in_features;
      jl["out_features"] = l.out_features;
    }
    if (is_conventional_kind(l.kind)) jl["rectifier"] = l.rectifier;
    if (l.kind == LayerKind::residual_add) {
      jl["source"] = l.residual_source;
      if (l.projection.has_value()) jl["projection"] = geometry_to_json(*l.projection);
    }
    layers.push_back(std::move(jl));
  }
  json edges = json::array();
  for (const auto& e : spec.residual_edges) {
    edges.push_back(json{{"source", e.source}, {"target", e.target}});
  }
  json doc{{"input_shape", spec.input_shape},
           {"layers", layers},
           {"residual_edges", edges},
           {"mi_ids", spec.mi_ids}};
  return doc.dump(indent);
}

NetworkSpec spec_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("network spec is not valid JSON: ") + e.what());
  }
  NetworkSpec spec;
  try {
    spec.input_shape = doc.at("input_shape").get<std::vector<size_t>>();
    for (const auto& jl : doc.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<int>();
      l.kind = layer_kind_from_name(jl.at("kind").get<std::string>());
      if (is_conv_kind(l.kind)) l.geom = geometry_from_json(jl.at("geometry"));
      if (is_linear_kind(l.kind)) {
        l.in_features = jl.at("in_features").get<int>();
        l.out_features = jl.at("out_features").get<int>();
      }
      if (is_conventional_kind(l.kind)) l.rectifier = jl.value("rectifier", false);
      if (l.kind == LayerKind::residual_add) {
        l.residual_source = jl.at("source").get<int>();
        if (jl.contains("projection")) l.projection = geometry_from_json(jl.at("projection"));
      }
      spec.layers.push_back(std::move(l));
    }
    for (const auto& je : doc.at("residual_edges")) {
      spec.residual_edges.push_back(
          ResidualEdge{je.at("source").get<int>(), je.at("target").get<int>()});
    }
    spec.mi_ids = doc.at("mi_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed network spec document: ") + e.what());
  }
  spec.validate();
  return spec;
}

PolarityMask init_polarity(size_t n_units, uint64_t seed) {
  if (n_units < 1) throw InvariantError("init_polarity: unit count must be >= 1");
  Rng rng(seed);
  std::vector<uint8_t> bits(n_units);
  for (auto& b : bits) b = rng.coin() ? 1 : 0;
  return PolarityMask(std::move(bits));
}

namespace {

Tensor normal_tensor(std::vector<size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

void init_weight_layer(ThresholdParams& p, PolarityMask& mask, bool threshold,
                       const std::vector<size_t>& w_shape, size_t fan_in, size_t out_units,
                       Rng w_rng, uint64_t mask_seed) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  p.weights = normal_tensor(w_shape, stddev, w_rng);
  p.bias = Tensor({out_units});
  if (threshold) mask = init_polarity(out_units, mask_seed);
}

}  // namespace

Model build(const NetworkSpec& spec, uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  m.seed = seed;
  m.layers.resize(spec.layers.size());
  Rng root(seed);

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerState& st = m.layers[i];
    const uint64_t base = static_cast<uint64_t>(l.id) * 4;
    if (is_conv_kind(l.kind)) {
      const auto& g = l.geom;
      const size_t fan_in = static_cast<size_t>(g.kernel_size) * g.kernel_size * g.in_channels;
      init_weight_layer(st.params, st.mask, is_threshold_kind(l.kind),
                        {static_cast<size_t>(g.out_channels), static_cast<size_t>(g.in_channels),
                         static_cast<size_t>(g.kernel_size), static_cast<size_t>(g.kernel_size)},
                        fan_in, static_cast<size_t>(g.out_channels), root.fork(base),
                        root.fork(base + 1).seed());
    } else if (is_linear_kind(l.kind)) {
      init_weight_layer(st.params, st.mask, is_threshold_kind(l.kind),
                        {static_cast<size_t>(l.out_features), static_cast<size_t>(l.in_features)},
                        static_cast<size_t>(l.in_features), static_cast<size_t>(l.out_features),
                        root.fork(base), root.fork(base + 1).seed());
    } else if (l.kind == LayerKind::residual_add && l.projection.has_value()) {
      const auto& g = *l.projection;
      const size_t fan_in = static_cast<size_t>(g.kernel_size) * g.kernel_size * g.in_channels;
      init_weight_layer(st.proj, st.proj_mask, true,
                        {static_cast<size_t>(g.out_channels), static_cast<size_t>(g.in_channels),
                         static_cast<size_t>(g.kernel_size), static_cast<size_t>(g.kernel_size)},
                        fan_in, static_cast<size_t>(g.out_channels), root.fork(base + 2),
                        root.fork(base + 3).seed());
    }
  }
  for (const auto& st : m.layers) {
    st.params.validate_finite();
    st.proj.validate_finite();
  }
  return m;
}

NetworkSpec apply_mi(const NetworkSpec& spec, const std::vector<int>& layer_ids) {
  NetworkSpec out = spec;
  for (int id : layer_ids) {
    const int idx = out.index_of(id);
    if (idx < 0) throw InvariantError("apply_mi: unknown layer id " + std::to_string(id));
    LayerSpec& l = out.layers[idx];
    if (is_conventional_kind(l.kind)) {
      throw InvariantError("apply_mi: layer id " + std::to_string(id) +
                           " is already conventional");
    }
    if (!is_threshold_kind(l.kind)) {
      throw InvariantError("apply_mi: layer id " + std::to_string(id) +
                           " is not a threshold layer");
    }
    l.kind = is_conv_kind(l.kind) ? LayerKind::conv : LayerKind::linear;
    l.rectifier = false;
    out.mi_ids.push_back(id);
  }
  out.validate();
  return out;
}

namespace {

Tensor flatten_batch(const Tensor& x) {
  const size_t b = x.extent(0);
  return x.reshaped({b, x.size() / b});
}

void add_into(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("cannot add " + src.shape_str() + " into " + dst.shape_str());
  }
  double* d = dst.data();
  const double* s = src.data();
  for (size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Tensor forward(const Model& m, const Tensor& x, ForwardCache* cache) {
  const NetworkSpec& spec = m.spec;
  if (x.rank() != spec.input_shape.size() + 1) {
    throw ShapeError("network input " + x.shape_str() + " must be batched " +
                     shape_to_string(spec.input_shape));
  }
  for (size_t d = 0; d < spec.input_shape.size(); ++d) {
    if (x.extent(d + 1) != spec.input_shape[d]) {
      throw ShapeError("network input " + x.shape_str() + " does not match declared shape " +
                       shape_to_string(spec.input_shape));
    }
  }
  if (m.layers.size() != spec.layers.size()) {
    throw InvariantError("model parameter table does not match spec layer count");
  }

  // Residual sources must be stashed even when no cache was requested.
  std::set<int> wanted;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::residual_add) wanted.insert(spec.index_of(l.residual_source));
  }

  const size_t n = spec.layers.size();
  if (cache != nullptr) {
    cache->inputs.assign(n, Tensor());
    cache->outputs.assign(n, Tensor());
  }
  std::vector<Tensor> stash(n);

  Tensor cur = x;
  for (size_t i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerState& st = m.layers[i];
    if (cache != nullptr) cache->inputs[i] = cur;
    Tensor out;
    try {
      switch (l.kind) {
        case LayerKind::t_conv:
        case LayerKind::downsample_conv:
          out = t_conv2d_forward(cur, st.params, st.mask, l.geom);
          break;
        case LayerKind::conv:
          out = conv2d_forward(cur, st.params.weights, st.params.bias, l.geom, l.rectifier);
          break;
        case LayerKind::t_linear:
          out = t_linear_forward(cur.rank() == 2 ? cur : flatten_batch(cur), st.params, st.mask);
          break;
        case LayerKind::linear:
          out = linear_forward(cur.rank() == 2 ? cur : flatten_batch(cur), st.params.weights,
                               st.params.bias, l.rectifier);
          break;
        case LayerKind::flatten:
          out = flatten_batch(cur);
          break;
        case LayerKind::residual_add: {
          const int src = spec.index_of(l.residual_source);
          Tensor skip = stash[src];
          if (skip.empty()) throw InvariantError("residual source output was not stashed");
          if (l.projection.has_value()) {
            skip = t_conv2d_forward(skip, st.proj, st.proj_mask, *l.projection);
          }
          out = cur;
          add_into(out, skip);
          break;
        }
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer id " + std::to_string(l.id) + " (" + layer_kind_name(l.kind) +
                       "): " + e.what());
    }
    if (wanted.count(static_cast<int>(i)) != 0) stash[i] = out;
    if (cache != nullptr) cache->outputs[i] = out;
    cur = std::move(out);
  }
  return cur;
}

OpCounts& OpCounts::operator+=(const OpCounts& o) {
  multiplications += o.multiplications;
  additions += o.additions;
  subtractions += o.subtractions;
  comparisons += o.comparisons;
  return *this;
}

namespace {

// One output element aggregating n gated/weighted terms plus a bias.
OpCounts threshold_unit_ops(uint64_t outputs, uint64_t n) {
  return OpCounts{0, outputs * n, outputs * n, outputs * n};
}
OpCounts conventional_unit_ops(uint64_t outputs, uint64_t n, bool rectifier) {
  return OpCounts{outputs * n, outputs * n, 0, rectifier ? outputs : 0};
}

OpCounts layer_ops(const NetworkSpec& spec, size_t idx,
                   const std::vector<std::vector<size_t>>& shapes, bool as_conventional) {
  const LayerSpec& l = spec.layers[idx];
  const uint64_t out_elems = shape_product(shapes[idx]);
  switch (l.kind) {
    case LayerKind::t_conv:
    case LayerKind::downsample_conv: {
      const uint64_t n =
          static_cast<uint64_t>(l.geom.kernel_size) * l.geom.kernel_size * l.geom.in_channels;
      return as_conventional ? conventional_unit_ops(out_elems, n, false)
                             : threshold_unit_ops(out_elems, n);
    }
    case LayerKind::conv: {
      const uint64_t n =
          static_cast<uint64_t>(l.geom.kernel_size) * l.geom.kernel_size * l.geom.in_channels;
      return conventional_unit_ops(out_elems, n, l.rectifier);
    }
    case LayerKind::t_linear:
      return as_conventional
                 ? conventional_unit_ops(out_elems, static_cast<uint64_t>(l.in_features), false)
                 : threshold_unit_ops(out_elems, static_cast<uint64_t>(l.in_features));
    case LayerKind::linear:
      return conventional_unit_ops(out_elems, static_cast<uint64_t>(l.in_features), l.rectifier);
    case LayerKind::flatten:
      return OpCounts{};
    case LayerKind::residual_add: {
      OpCounts c{0, out_elems, 0, 0};
      if (l.projection.has_value()) {
        const uint64_t n = static_cast<uint64_t>(l.projection->kernel_size) *
                           l.projection->kernel_size * l.projection->in_channels;
        c += as_conventional ? conventional_unit_ops(out_elems, n, false)
                             : threshold_unit_ops(out_elems, n);
      }
      return c;
    }
  }
  throw InvariantError("unhandled layer kind in op counting");
}

}  // namespace

OpCounts count_layer_ops(const NetworkSpec& spec, size_t layer_index) {
  if (layer_index >= spec.layers.size()) {
    throw InvariantError("count_layer_ops: layer index out of range");
  }
  return layer_ops(spec, layer_index, layer_output_shapes(spec), false);
}

OpCounts count_ops(const Model& m) {
  const auto shapes = layer_output_shapes(m.spec);
  OpCounts total;
  for (size_t i = 0; i < m.spec.layers.size(); ++i) {
    total += layer_ops(m.spec, i, shapes, false);
  }
  return total;
}

OpCounts count_ops_conventional_twin(const Model& m) {
  const auto shapes = layer_output_shapes(m.spec);
  OpCounts total;
  for (size_t i = 0; i < m.spec.layers.size(); ++i) {
    total += layer_ops(m.spec, i, shapes, true);
  }
  return total;
}

int neuron_kind_count(const Model& m) {
  bool threshold = false;
  bool conventional = false;
  for (const auto& l : m.spec.layers) {
    if (is_threshold_kind(l.kind)) threshold = true;
    if (is_conventional_kind(l.kind)) conventional = true;
    if (l.kind == LayerKind::residual_add && l.projection.has_value()) threshold = true;
  }
  return (threshold ? 1 : 0) + (conventional ? 1 : 0);
}

ModelGrads backward(const Model& m, const ForwardCache& cache, const Tensor& d_output) {
  const NetworkSpec& spec = m.spec;
  const size_t n = spec.layers.size();
  if (cache.inputs.size() != n || cache.outputs.size() != n) {
    throw InvariantError("backward: forward cache does not match the model");
  }

  ModelGrads grads;
  grads.layers.resize(n);
  if (n == 0) {
    grads.d_input = d_output;
    return grads;
  }
  if (!d_output.same_shape(cache.outputs[n - 1])) {
    throw ShapeError("backward: d_output " + d_output.shape_str() + " != network output " +
                     cache.outputs[n - 1].shape_str());
  }

  // grad_out[i] accumulates the gradient at layer i's output; consumers of an
  // output always sit later in the chain, so a reverse sweep sees each
  // gradient complete.
  std::vector<Tensor> grad_out(n);
  grad_out[n - 1] = d_output;
  Tensor d_input;

  auto send_back = [&](size_t i, const Tensor& g) {
    if (i == 0) {
      if (d_input.empty()) {
        d_input = g;
      } else {
        add_into(d_input, g);
      }
    } else if (grad_out[i - 1].empty()) {
      grad_out[i - 1] = g;
    } else {
      add_into(grad_out[i - 1], g);
    }
  };

  for (size_t ri = n; ri-- > 0;) {
    if (grad_out[ri].empty()) grad_out[ri] = Tensor(cache.outputs[ri].shape());
    const Tensor& g = grad_out[ri];
    const LayerSpec& l = spec.layers[ri];
    const LayerState& st = m.layers[ri];
    ModelGrads::PerLayer& pg = grads.layers[ri];
    const Tensor& in = cache.inputs[ri];

    switch (l.kind) {
      case LayerKind::t_conv:
      case LayerKind::downsample_conv: {
        KernelGrads kg = t_conv2d_backward(in, st.params, st.mask, l.geom, g);
        pg.d_weights = std::move(kg.d_weights);
        pg.d_bias = std::move(kg.d_bias);
        send_back(ri, kg.d_input);
        break;
      }
      case LayerKind::conv: {
        KernelGrads kg = conv2d_backward(in, st.params.weights, st.params.bias, l.geom,
                                         l.rectifier, g);
        pg.d_weights = std::move(kg.d_weights);
        pg.d_bias = std::move(kg.d_bias);
        send_back(ri, kg.d_input);
        break;
      }
      case LayerKind::t_linear: {
        const Tensor xin = in.rank() == 2 ? in : flatten_batch(in);
        KernelGrads kg = t_linear_backward(xin, st.params, st.mask, g);
        pg.d_weights = std::move(kg.d_weights);
        pg.d_bias = std::move(kg.d_bias);
        send_back(ri, kg.d_input.reshaped(in.shape()));
        break;
      }
      case LayerKind::linear: {
        const Tensor xin = in.rank() == 2 ? in : flatten_batch(in);
        KernelGrads kg = linear_backward(xin, st.params.weights, st.params.bias, l.rectifier, g);
        pg.d_weights = std::move(kg.d_weights);
        pg.d_bias = std::move(kg.d_bias);
        send_back(ri, kg.d_input.reshaped(in.shape()));
        break;
      }
      case LayerKind::flatten:
        send_back(ri, g.reshaped(in.shape()));
        break;
      case LayerKind::residual_add: {
        send_back(ri, g);  // main path
        const int src = spec.index_of(l.residual_source);
        if (l.projection.has_value()) {
          KernelGrads kg =
              t_conv2d_backward(cache.outputs[src], st.proj, st.proj_mask, *l.projection, g);
          pg.d_proj_weights = std::move(kg.d_weights);
          pg.d_proj_bias = std::move(kg.d_bias);
          if (grad_out[src].empty()) grad_out[src] = Tensor(cache.outputs[src].shape());
          add_into(grad_out[src], kg.d_input);
        } else {
          if (grad_out[src].empty()) grad_out[src] = Tensor(cache.outputs[src].shape());
          add_into(grad_out[src], g);
        }
        break;
      }
    }
  }

  grads.d_input = d_input.empty() ? Tensor(cache.inputs[0].shape()) : std::move(d_input);
  return grads;
}

namespace {

void hash_tensor(Fnv1a64& h, const Tensor& t) {
  for (double v : t.values()) {
    uint64_t u = 0;
    std::memcpy(&u, &v, sizeof(u));
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(u >> (8 * i));
    h.update(b, sizeof(b));
  }
}

}  // namespace

uint64_t param_hash(const Model& m) {
  Fnv1a64 h;
  for (const auto& st : m.layers) {
    hash_tensor(h, st.params.weights);
    hash_tensor(h, st.params.bias);
    hash_tensor(h, st.proj.weights);
    hash_tensor(h, st.proj.bias);
  }
  return h.digest();
}

uint64_t polarity_hash(const Model& m) {
  Fnv1a64 h;
  for (const auto& st : m.layers) {
    h.update(st.mask.bits().data(), st.mask.bits().size());
    h.update(st.proj_mask.bits().data(), st.proj_mask.bits().size());
  }
  return h.digest();
}

NetworkSpec simple_cnn_spec(const std::vector<int>& conv_widths, int in_channels, int in_hw,
                            int fc_hidden, int classes) {
  if (conv_widths.size() != 4) {
    throw InvariantError("simple_cnn_spec expects exactly 4 convolution widths");
  }
  NetworkSpec spec;
  spec.input_shape = {static_cast<size_t>(in_channels), static_cast<size_t>(in_hw),
                      static_cast<size_t>(in_hw)};
  int id = 0;
  int c_in = in_channels;
  int hw = in_hw;
  for (int w : conv_widths) {
    LayerSpec l;
    l.id = id++;
    l.kind = LayerKind::t_conv;
    l.geom = ConvGeometry{3, c_in, w, 2, 1};
    spec.layers.push_back(l);
    hw = l.geom.out_extent(hw);
    c_in = w;
  }
  LayerSpec fc1;
  fc1.id = id++;
  fc1.kind = LayerKind::t_linear;
  fc1.in_features = c_in * hw * hw;
  fc1.out_features = fc_hidden;
  spec.layers.push_back(fc1);
  LayerSpec fc2;
  fc2.id = id++;
  fc2.kind = LayerKind::t_linear;
  fc2.in_features = fc_hidden;
  fc2.out_features = classes;
  spec.layers.push_back(fc2);
  spec.validate();
  return spec;
}

NetworkSpec four_layer_nn_spec() {
  NetworkSpec spec;
  spec.input_shape = {3};
  const int widths_in[] = {3, 5, 3, 1};
  const int widths_out[] = {5, 3, 1, 1};
  for (int i = 0; i < 4; ++i) {
    LayerSpec l;
    l.id = i;
    l.kind = LayerKind::t_linear;
    l.in_features = widths_in[i];
    l.out_features = widths_out[i];
    spec.layers.push_back(l);
  }
  spec.validate();
  return spec;
}

NetworkSpec resnet18_fw_spec(int final_width, int in_channels, int in_hw, int classes) {
  if (final_width % 4 != 0 || final_width < 4) {
    throw InvariantError("resnet18_fw_spec: final width must be a positive multiple of 4");
  }
  NetworkSpec spec;
  spec.input_shape = {static_cast<size_t>(in_channels), static_cast<size_t>(in_hw),
                      static_cast<size_t>(in_hw)};
  int id = 0;
  int hw = in_hw;

  LayerSpec stem;
  stem.id = id++;
  stem.kind = LayerKind::t_conv;
  stem.geom = ConvGeometry{3, in_channels, final_width / 4, 1, 1};
  spec.layers.push_back(stem);
  hw = stem.geom.out_extent(hw);
  int c_in = final_width / 4;
  int prev_out_id = stem.id;

  const int block_widths[] = {final_width / 2, final_width, final_width};
  const int block_strides[] = {2, 2, 1};
  for (int bi = 0; bi < 3; ++bi) {
    const int c = block_widths[bi];
    const int s = block_strides[bi];

    LayerSpec conv_a;
    conv_a.id = id++;
    conv_a.kind = LayerKind::t_conv;
    conv_a.geom = ConvGeometry{3, c_in, c, s, 1};
    spec.layers.push_back(conv_a);

    LayerSpec conv_b;
    conv_b.id = id++;
    conv_b.kind = LayerKind::t_conv;
    conv_b.geom = ConvGeometry{3, c, c, 1, 1};
    spec.layers.push_back(conv_b);

    LayerSpec add;
    add.id = id++;
    add.kind = LayerKind::residual_add;
    add.residual_source = prev_out_id;
    if (s != 1 || c_in != c) add.projection = ConvGeometry{1, c_in, c, s, 0};
    spec.layers.push_back(add);
    spec.residual_edges.push_back(ResidualEdge{prev_out_id, add.id});

    hw = conv_a.geom.out_extent(hw);
    c_in = c;
    prev_out_id = add.id;
  }

  // Pool replacement: one convolution whose kernel covers the remaining map.
  LayerSpec down;
  down.id = id++;
  down.kind = LayerKind::downsample_conv;
  down.geom = ConvGeometry{hw, c_in, c_in, hw, 0};
  spec.layers.push_back(down);

  LayerSpec head;
  head.id = id++;
  head.kind = LayerKind::t_linear;
  head.in_features = c_in;
  head.out_features = classes;
  spec.layers.push_back(head);

  spec.validate();
  return spec;
}

}  // namespace tnet
