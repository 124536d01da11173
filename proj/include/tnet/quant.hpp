#pragma once

#include <cstdint>
#include <vector>

#include "tnet/tensor.hpp"

namespace tnet {

struct Model;

// 8-bit uniform symmetric per-tensor quantization. Zero-point is fixed at 0
// and the integer range is [-127, 127] so that negation is exact. Rounding is
// half-away-from-zero.
struct QuantizedTensor {
  std::vector<int8_t> values;
  double scale = 1.0;  // dequantized value = int * scale
  std::vector<size_t> shape;
};

// scale = max|w| / 127; an all-zero tensor uses the sentinel scale 1.0.
QuantizedTensor quantize(const Tensor& w);
Tensor dequantize(const QuantizedTensor& q);

// Quantizes every weight tensor of the model (weight-only; biases and
// activations stay float). Float weights are replaced by their dequantized
// values so the in-memory model always matches what an int8 checkpoint holds.
Model quantize_model(const Model& m);
bool is_quantized(const Model& m);

// Forward pass of a weight-quantized model: dequantizes each weight tensor
// and runs the standard float kernels. Throws if any weight layer lacks int8
// data.
Tensor quantized_forward(const Model& m, const Tensor& x);

// Pooled histogram of all float weight values, for distribution inspection.
struct WeightHistogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<uint64_t> counts;
};
WeightHistogram weight_histogram(const Model& m, int bins = 256);

// Excess kurtosis of the pooled weight distribution (0 for a Gaussian,
// positive for heavier tails).
double weight_excess_kurtosis(const Model& m);

}  // namespace tnet
