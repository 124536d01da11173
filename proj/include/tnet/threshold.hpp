#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tnet/tensor.hpp"

namespace tnet {

// Fixed excitatory/inhibitory identity of a unit. Assigned once at
// initialization and never trained.
enum class Polarity : uint8_t { negative = 0, positive = 1 };

// One polarity bit per output unit (linear) or output channel (conv).
class PolarityMask {
 public:
  PolarityMask() = default;
  explicit PolarityMask(std::vector<uint8_t> bits) : bits_(std::move(bits)) {}

  size_t size() const { return bits_.size(); }
  bool empty() const { return bits_.empty(); }
  bool positive(size_t i) const { return bits_[i] != 0; }
  Polarity polarity(size_t i) const { return positive(i) ? Polarity::positive : Polarity::negative; }
  double sign(size_t i) const { return positive(i) ? 1.0 : -1.0; }
  double positive_fraction() const;

  const std::vector<uint8_t>& bits() const { return bits_; }
  uint64_t hash() const;

  // Little-endian bit packing (bit i of byte i/8), for checkpoint payloads.
  std::vector<uint8_t> packed() const;
  static PolarityMask from_packed(const std::vector<uint8_t>& bytes, size_t n_bits);

  bool operator==(const PolarityMask& other) const { return bits_ == other.bits_; }

 private:
  std::vector<uint8_t> bits_;  // 0 = negative, 1 = positive
};

// Learnable thresholds plus bias. Shapes match a conventional layer:
// weights [out, in] for linear, [C_out, C_in, S, S] for conv; bias [out].
struct ThresholdParams {
  Tensor weights;
  Tensor bias;

  // Throws InvariantError on NaN/Inf. Called at build and checkpoint time,
  // not in kernels.
  void validate_finite() const;
};

// Single threshold interaction: the gate opens when x > w, the open-gate
// contribution is +(x - w) for a positive unit and -(x - w) for a negative
// one. Ties (x == w) output 0.
inline double t_apply(double x, double w, Polarity p) {
  if (x > w) {
    const double d = x - w;
    return p == Polarity::positive ? d : -d;
  }
  return 0.0;
}

// Gated aggregation of one unit: sum_i t_apply(x_i, w_i, p) + bias.
// Accumulation is sequential in index order so results are bit-stable.
double t_dot(std::span<const double> x, std::span<const double> w, Polarity p, double bias);

// Y[b, o] = t_dot(x[b, :], W[o, :], mask[o], bias[o]).  x is [B, N_in].
Tensor t_linear_forward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask);

// Threshold convolution over [B, C_in, H, W], one polarity per output
// channel. Lowered through im2col, which in float64 is exactly the naive
// triple-sum: both walk the same (x, w) pairs in the same order.
Tensor t_conv2d_forward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                        const ConvGeometry& g);

struct KernelGrads {
  Tensor d_weights;
  Tensor d_bias;
  Tensor d_input;
};

// Backward rules. For each (x, w) pair whose gate is open (x > w):
//   positive unit:  dW -= dY,  dX += dY
//   negative unit:  dW += dY,  dX -= dY
// Closed gates and ties contribute zero. db[o] sums dY over unit o's outputs.
KernelGrads t_linear_backward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                              const Tensor& d_out);
KernelGrads t_conv2d_backward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                              const ConvGeometry& g, const Tensor& d_out);

// Conventional weighted-sum kernels (baselines and MI layers). The optional
// rectifier is elementwise max(0, .).
Tensor linear_forward(const Tensor& x, const Tensor& weights, const Tensor& bias, bool rectifier);
Tensor conv2d_forward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                      const ConvGeometry& g, bool rectifier);
KernelGrads linear_backward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                            bool rectifier, const Tensor& d_out);
KernelGrads conv2d_backward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                            const ConvGeometry& g, bool rectifier, const Tensor& d_out);

}  // namespace tnet
