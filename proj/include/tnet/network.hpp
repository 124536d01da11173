#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tnet/quant.hpp"
#include "tnet/tensor.hpp"
#include "tnet/threshold.hpp"

namespace tnet {

// The layer vocabulary. There is deliberately no normalization, pooling, or
// standalone rectifier kind: those cannot be expressed, only replaced
// (strided/downsample convolutions for pooling, threshold non-linearity for
// rectifiers).
enum class LayerKind {
  t_conv,           // threshold convolution
  t_linear,         // threshold fully-connected
  conv,             // conventional weighted-sum convolution (MI / baseline)
  linear,           // conventional weighted-sum fully-connected
  downsample_conv,  // threshold convolution standing in for a pooling layer
  residual_add,     // skip-connection add point
  flatten,          // explicit reshape to [B, N]
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);
bool is_threshold_kind(LayerKind k);     // t_conv, t_linear, downsample_conv
bool is_conventional_kind(LayerKind k);  // conv, linear
bool is_conv_kind(LayerKind k);          // any convolution kind
bool is_linear_kind(LayerKind k);        // any fully-connected kind

struct LayerSpec {
  int id = -1;
  LayerKind kind = LayerKind::flatten;
  ConvGeometry geom;       // conv kinds
  int in_features = 0;     // linear kinds
  int out_features = 0;
  bool rectifier = false;  // conv/linear only
  int residual_source = -1;                // residual_add: id of the skip source layer
  std::optional<ConvGeometry> projection;  // residual_add: skip projection, if any
};

struct ResidualEdge {
  int source = -1;
  int target = -1;
};

struct NetworkSpec {
  std::vector<size_t> input_shape;  // batch-free: [C, H, W] or [N]
  std::vector<LayerSpec> layers;
  std::vector<ResidualEdge> residual_edges;
  std::vector<int> mi_ids;  // layers converted to conventional kinds

  const LayerSpec* find(int id) const;
  int index_of(int id) const;  // -1 if absent
  void validate() const;
};

// Per-layer output shapes (batch-free). Throws ShapeError, naming the layer,
// if consecutive layers do not compose or a residual edge is incompatible.
std::vector<std::vector<size_t>> layer_output_shapes(const NetworkSpec& spec);

// Compact architecture string, e.g.
//   "CONV3(64)-CONV3(128)-CONV3(256)-CONV3(512)-FC-FC"
//   "N3(5)-N5(3)-N3(1)-N1(1)"
//   "CONV3(16)-BasicBlock(32)-BasicBlock(64)-BasicBlock(64)-DOWN7(64)-FC"
// Fully-connected layers print as FC when the network has convolutions and as
// N{in}({out}) otherwise.
std::string table_signature(const NetworkSpec& spec);

std::string spec_to_json(const NetworkSpec& spec, int indent = -1);
NetworkSpec spec_from_json(const std::string& text);

// Parameters behind one LayerSpec. Threshold kinds carry a polarity mask;
// a residual_add with a projection carries the projection's parameters.
struct LayerState {
  ThresholdParams params;
  PolarityMask mask;
  std::optional<QuantizedTensor> q_weights;

  ThresholdParams proj;
  PolarityMask proj_mask;
  std::optional<QuantizedTensor> q_proj_weights;

  bool has_params() const { return !params.weights.empty(); }
  bool has_projection() const { return !proj.weights.empty(); }
};

struct Model {
  NetworkSpec spec;
  std::vector<LayerState> layers;  // aligned with spec.layers
  uint64_t seed = 0;
};

// One polarity bit per unit, each independently positive with p = 0.5, from a
// deterministic seeded stream. Same seed, same mask.
PolarityMask init_polarity(size_t n_units, uint64_t seed);

// Materializes parameters: thresholds and conventional weights drawn from
// N(0, 2/fan_in), biases zero, polarity masks seeded per layer from `seed`.
Model build(const NetworkSpec& spec, uint64_t seed);

// Converts the listed threshold layers to weighted-sum layers with identical
// geometry. Throws on unknown ids and on layers that are already conventional.
NetworkSpec apply_mi(const NetworkSpec& spec, const std::vector<int>& layer_ids);

struct ForwardCache {
  std::vector<Tensor> inputs;   // main-chain input of each layer
  std::vector<Tensor> outputs;  // output of each layer
};

// Runs the layer chain. Residual add points pull the stashed output of their
// source layer, apply the projection when present, and add. Shape errors name
// the offending layer id.
Tensor forward(const Model& m, const Tensor& x, ForwardCache* cache = nullptr);

struct OpCounts {
  uint64_t multiplications = 0;
  uint64_t additions = 0;
  uint64_t subtractions = 0;
  uint64_t comparisons = 0;

  OpCounts& operator+=(const OpCounts& o);
  bool operator==(const OpCounts& o) const = default;
};

// Arithmetic op inventory for one inference (batch 1). Threshold pairs count
// one subtraction plus one comparison each; aggregation of N terms counts
// (N-1)+1 additions (sum plus bias); conventional pairs count one
// multiplication plus the same additions.
OpCounts count_ops(const Model& m);
OpCounts count_layer_ops(const NetworkSpec& spec, size_t layer_index);
// Same inventory with every weight layer costed as a conventional
// multiply-accumulate kernel; the reference point for savings ratios.
OpCounts count_ops_conventional_twin(const Model& m);
// Distinct neuron kinds present: threshold and/or conventional weighted-sum.
int neuron_kind_count(const Model& m);

struct ModelGrads {
  struct PerLayer {
    Tensor d_weights;
    Tensor d_bias;
    Tensor d_proj_weights;
    Tensor d_proj_bias;
  };
  std::vector<PerLayer> layers;
  Tensor d_input;
};

// Reverse pass over a cached forward run. d_output matches the network output
// shape; gate ties contribute zero everywhere.
ModelGrads backward(const Model& m, const ForwardCache& cache, const Tensor& d_output);

uint64_t param_hash(const Model& m);
uint64_t polarity_hash(const Model& m);

// ---- Architecture builders ------------------------------------------------

// CONV3(w0)-CONV3(w1)-CONV3(w2)-CONV3(w3)-FC-FC. The convolutions downsample
// by stride 2 (convolution sampling instead of pooling).
NetworkSpec simple_cnn_spec(const std::vector<int>& conv_widths = {64, 128, 256, 512},
                            int in_channels = 1, int in_hw = 28, int fc_hidden = 128,
                            int classes = 10);

// N3(5)-N5(3)-N3(1)-N1(1).
NetworkSpec four_layer_nn_spec();

// CONV3(fw/4) stem, then BasicBlocks with channels fw/2, fw, fw (two 3x3
// threshold convolutions each, skip projection where shape changes), a
// pool-replacement downsample convolution, and a fully-connected head.
NetworkSpec resnet18_fw_spec(int final_width, int in_channels = 1, int in_hw = 28,
                             int classes = 10);

}  // namespace tnet
