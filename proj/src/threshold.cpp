#include "tnet/threshold.hpp"

#include <cmath>

#include "tnet/digest.hpp"
#include "tnet/error.hpp"

namespace tnet {

double PolarityMask::positive_fraction() const {
  if (bits_.empty()) return 0.0;
  size_t pos = 0;
  for (uint8_t b : bits_) pos += (b != 0);
  return static_cast<double>(pos) / static_cast<double>(bits_.size());
}

uint64_t PolarityMask::hash() const {
  Fnv1a64 h;
  h.update(bits_.data(), bits_.size());
  return h.digest();
}

std::vector<uint8_t> PolarityMask::packed() const {
  std::vector<uint8_t> out((bits_.size() + 7) / 8, 0);
  for (size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i]) out[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  }
  return out;
}

PolarityMask PolarityMask::from_packed(const std::vector<uint8_t>& bytes, size_t n_bits) {
  if (bytes.size() != (n_bits + 7) / 8) {
    throw FormatError("packed polarity mask has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string((n_bits + 7) / 8));
  }
  std::vector<uint8_t> bits(n_bits, 0);
  for (size_t i = 0; i < n_bits; ++i) {
    bits[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  }
  return PolarityMask(std::move(bits));
}

void ThresholdParams::validate_finite() const {
  for (double v : weights.values()) {
    if (!std::isfinite(v)) throw InvariantError("non-finite weight value");
  }
  for (double v : bias.values()) {
    if (!std::isfinite(v)) throw InvariantError("non-finite bias value");
  }
}

double t_dot(std::span<const double> x, std::span<const double> w, Polarity p, double bias) {
  if (x.size() != w.size()) {
    throw ShapeError("t_dot length mismatch: " + std::to_string(x.size()) + " vs " +
                     std::to_string(w.size()));
  }
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i] > w[i]) acc += x[i] - w[i];
  }
  if (p == Polarity::negative) acc = -acc;
  return acc + bias;
}

namespace {

void check_linear_shapes(const Tensor& x, const ThresholdParams& p, size_t mask_size,
                         const char* who) {
  if (x.rank() != 2 || p.weights.rank() != 2 || p.bias.rank() != 1) {
    throw ShapeError(std::string(who) + ": expected x [B, N_in], W [N_out, N_in], bias [N_out]");
  }
  if (x.extent(1) != p.weights.extent(1)) {
    throw ShapeError(std::string(who) + ": input width " + std::to_string(x.extent(1)) +
                     " != weight width " + std::to_string(p.weights.extent(1)));
  }
  if (p.bias.extent(0) != p.weights.extent(0)) {
    throw ShapeError(std::string(who) + ": bias size " + std::to_string(p.bias.extent(0)) +
                     " != unit count " + std::to_string(p.weights.extent(0)));
  }
  if (mask_size != static_cast<size_t>(-1) && mask_size != p.weights.extent(0)) {
    throw ShapeError(std::string(who) + ": polarity mask size " + std::to_string(mask_size) +
                     " != unit count " + std::to_string(p.weights.extent(0)));
  }
}

void check_conv_shapes(const Tensor& x, const Tensor& weights, const Tensor& bias,
                       size_t mask_size, const ConvGeometry& g, const char* who) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(who) + ": expected input [B, C, H, W], got " + x.shape_str());
  }
  const size_t S = static_cast<size_t>(g.kernel_size);
  if (weights.rank() != 4 || weights.extent(0) != static_cast<size_t>(g.out_channels) ||
      weights.extent(1) != static_cast<size_t>(g.in_channels) || weights.extent(2) != S ||
      weights.extent(3) != S) {
    throw ShapeError(std::string(who) + ": weights " + weights.shape_str() +
                     " do not match geometry [C_out, C_in, S, S]");
  }
  if (bias.rank() != 1 || bias.extent(0) != static_cast<size_t>(g.out_channels)) {
    throw ShapeError(std::string(who) + ": bias " + bias.shape_str() + " != [C_out]");
  }
  if (mask_size != static_cast<size_t>(-1) && mask_size != static_cast<size_t>(g.out_channels)) {
    throw ShapeError(std::string(who) + ": polarity mask size " + std::to_string(mask_size) +
                     " != out channel count " + std::to_string(g.out_channels));
  }
}

// Gathers dY[b, t, m, n] as a row-major [rows, C_out] matrix aligned with
// im2col's row order r = (b*oh + m)*ow + n.
Tensor grad_rows(const Tensor& d_out) {
  const size_t B = d_out.extent(0), T = d_out.extent(1);
  const size_t oh = d_out.extent(2), ow = d_out.extent(3);
  Tensor rows({B * oh * ow, T});
  for (size_t b = 0; b < B; ++b) {
    for (size_t t = 0; t < T; ++t) {
      for (size_t m = 0; m < oh; ++m) {
        for (size_t n = 0; n < ow; ++n) {
          rows.at2((b * oh + m) * ow + n, t) = d_out.at4(b, t, m, n);
        }
      }
    }
  }
  return rows;
}

}  // namespace

Tensor t_linear_forward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask) {
  check_linear_shapes(x, p, mask.size(), "t_linear_forward");
  const size_t B = x.extent(0), n_in = x.extent(1), n_out = p.weights.extent(0);
  Tensor y({B, n_out});
  for (size_t b = 0; b < B; ++b) {
    std::span<const double> row(x.data() + b * n_in, n_in);
    for (size_t o = 0; o < n_out; ++o) {
      std::span<const double> w(p.weights.data() + o * n_in, n_in);
      y.at2(b, o) = t_dot(row, w, mask.polarity(o), p.bias[o]);
    }
  }
  return y;
}

Tensor t_conv2d_forward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                        const ConvGeometry& g) {
  check_conv_shapes(x, p.weights, p.bias, mask.size(), g, "t_conv2d_forward");
  const Tensor cols = im2col(x, g);
  const size_t B = x.extent(0);
  const size_t oh = g.out_extent(static_cast<int>(x.extent(2)));
  const size_t ow = g.out_extent(static_cast<int>(x.extent(3)));
  const size_t n = cols.extent(1);
  const size_t t_count = static_cast<size_t>(g.out_channels);

  Tensor y({B, t_count, oh, ow});
  const size_t rows = cols.extent(0);
  for (size_t r = 0; r < rows; ++r) {
    std::span<const double> patch(cols.data() + r * n, n);
    const size_t b = r / (oh * ow);
    const size_t m = (r / ow) % oh;
    const size_t w = r % ow;
    for (size_t t = 0; t < t_count; ++t) {
      std::span<const double> filt(p.weights.data() + t * n, n);
      y.at4(b, t, m, w) = t_dot(patch, filt, mask.polarity(t), p.bias[t]);
    }
  }
  return y;
}

KernelGrads t_linear_backward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                              const Tensor& d_out) {
  check_linear_shapes(x, p, mask.size(), "t_linear_backward");
  const size_t B = x.extent(0), n_in = x.extent(1), n_out = p.weights.extent(0);
  if (d_out.rank() != 2 || d_out.extent(0) != B || d_out.extent(1) != n_out) {
    throw ShapeError("t_linear_backward: d_out " + d_out.shape_str() + " != [B, N_out]");
  }
  KernelGrads gr{Tensor(p.weights.shape()), Tensor(p.bias.shape()), Tensor(x.shape())};
  for (size_t b = 0; b < B; ++b) {
    for (size_t o = 0; o < n_out; ++o) {
      const double dy = d_out.at2(b, o);
      gr.d_bias[o] += dy;
      if (dy == 0.0) continue;
      const double sdy = mask.positive(o) ? dy : -dy;
      for (size_t i = 0; i < n_in; ++i) {
        if (x.at2(b, i) > p.weights.at2(o, i)) {
          gr.d_weights.at2(o, i) -= sdy;
          gr.d_input.at2(b, i) += sdy;
        }
      }
    }
  }
  return gr;
}

KernelGrads t_conv2d_backward(const Tensor& x, const ThresholdParams& p, const PolarityMask& mask,
                              const ConvGeometry& g, const Tensor& d_out) {
  check_conv_shapes(x, p.weights, p.bias, mask.size(), g, "t_conv2d_backward");
  const size_t B = x.extent(0);
  const size_t oh = g.out_extent(static_cast<int>(x.extent(2)));
  const size_t ow = g.out_extent(static_cast<int>(x.extent(3)));
  const size_t t_count = static_cast<size_t>(g.out_channels);
  if (d_out.rank() != 4 || d_out.extent(0) != B || d_out.extent(1) != t_count ||
      d_out.extent(2) != oh || d_out.extent(3) != ow) {
    throw ShapeError("t_conv2d_backward: d_out " + d_out.shape_str() +
                     " != [B, C_out, H_out, W_out]");
  }

  const Tensor cols = im2col(x, g);
  const Tensor dy = grad_rows(d_out);
  const size_t rows = cols.extent(0), n = cols.extent(1);

  KernelGrads gr{Tensor(p.weights.shape()), Tensor(p.bias.shape()), Tensor()};
  Tensor d_cols({rows, n});
  for (size_t r = 0; r < rows; ++r) {
    const double* patch = cols.data() + r * n;
    double* dpatch = d_cols.data() + r * n;
    for (size_t t = 0; t < t_count; ++t) {
      const double g_out = dy.at2(r, t);
      gr.d_bias[t] += g_out;
      if (g_out == 0.0) continue;
      const double sdy = mask.positive(t) ? g_out : -g_out;
      const double* filt = p.weights.data() + t * n;
      double* dfilt = gr.d_weights.data() + t * n;
      for (size_t c = 0; c < n; ++c) {
        if (patch[c] > filt[c]) {
          dfilt[c] -= sdy;
          dpatch[c] += sdy;
        }
      }
    }
  }
  gr.d_input = col2im(d_cols, g, x.shape());
  return gr;
}

Tensor linear_forward(const Tensor& x, const Tensor& weights, const Tensor& bias, bool rectifier) {
  ThresholdParams view{weights, bias};
  check_linear_shapes(x, view, static_cast<size_t>(-1), "linear_forward");
  const size_t B = x.extent(0), n_in = x.extent(1), n_out = weights.extent(0);
  Tensor y({B, n_out});
  for (size_t b = 0; b < B; ++b) {
    for (size_t o = 0; o < n_out; ++o) {
      double acc = 0.0;
      for (size_t i = 0; i < n_in; ++i) acc += x.at2(b, i) * weights.at2(o, i);
      acc += bias[o];
      y.at2(b, o) = rectifier && acc < 0.0 ? 0.0 : acc;
    }
  }
  return y;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                      const ConvGeometry& g, bool rectifier) {
  check_conv_shapes(x, weights, bias, static_cast<size_t>(-1), g, "conv2d_forward");
  const Tensor cols = im2col(x, g);
  const size_t B = x.extent(0);
  const size_t oh = g.out_extent(static_cast<int>(x.extent(2)));
  const size_t ow = g.out_extent(static_cast<int>(x.extent(3)));
  const size_t n = cols.extent(1);
  const size_t t_count = static_cast<size_t>(g.out_channels);

  Tensor y({B, t_count, oh, ow});
  for (size_t r = 0; r < cols.extent(0); ++r) {
    const double* patch = cols.data() + r * n;
    const size_t b = r / (oh * ow);
    const size_t m = (r / ow) % oh;
    const size_t w = r % ow;
    for (size_t t = 0; t < t_count; ++t) {
      const double* filt = weights.data() + t * n;
      double acc = 0.0;
      for (size_t c = 0; c < n; ++c) acc += patch[c] * filt[c];
      acc += bias[t];
      y.at4(b, t, m, w) = rectifier && acc < 0.0 ? 0.0 : acc;
    }
  }
  return y;
}

KernelGrads linear_backward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                            bool rectifier, const Tensor& d_out) {
  ThresholdParams view{weights, bias};
  check_linear_shapes(x, view, static_cast<size_t>(-1), "linear_backward");
  const size_t B = x.extent(0), n_in = x.extent(1), n_out = weights.extent(0);
  if (d_out.rank() != 2 || d_out.extent(0) != B || d_out.extent(1) != n_out) {
    throw ShapeError("linear_backward: d_out " + d_out.shape_str() + " != [B, N_out]");
  }
  KernelGrads gr{Tensor(weights.shape()), Tensor(bias.shape()), Tensor(x.shape())};
  for (size_t b = 0; b < B; ++b) {
    for (size_t o = 0; o < n_out; ++o) {
      double dy = d_out.at2(b, o);
      if (rectifier) {
        double pre = bias[o];
        for (size_t i = 0; i < n_in; ++i) pre += x.at2(b, i) * weights.at2(o, i);
        if (pre <= 0.0) dy = 0.0;
      }
      gr.d_bias[o] += dy;
      if (dy == 0.0) continue;
      for (size_t i = 0; i < n_in; ++i) {
        gr.d_weights.at2(o, i) += dy * x.at2(b, i);
        gr.d_input.at2(b, i) += dy * weights.at2(o, i);
      }
    }
  }
  return gr;
}

KernelGrads conv2d_backward(const Tensor& x, const Tensor& weights, const Tensor& bias,
                            const ConvGeometry& g, bool rectifier, const Tensor& d_out) {
  check_conv_shapes(x, weights, bias, static_cast<size_t>(-1), g, "conv2d_backward");
  const size_t B = x.extent(0);
  const size_t oh = g.out_extent(static_cast<int>(x.extent(2)));
  const size_t ow = g.out_extent(static_cast<int>(x.extent(3)));
  const size_t t_count = static_cast<size_t>(g.out_channels);
  if (d_out.rank() != 4 || d_out.extent(0) != B || d_out.extent(1) != t_count ||
      d_out.extent(2) != oh || d_out.extent(3) != ow) {
    throw ShapeError("conv2d_backward: d_out " + d_out.shape_str() +
                     " != [B, C_out, H_out, W_out]");
  }

  const Tensor cols = im2col(x, g);
  const Tensor dy = grad_rows(d_out);
  const size_t rows = cols.extent(0), n = cols.extent(1);

  KernelGrads gr{Tensor(weights.shape()), Tensor(bias.shape()), Tensor()};
  Tensor d_cols({rows, n});
  for (size_t r = 0; r < rows; ++r) {
    const double* patch = cols.data() + r * n;
    double* dpatch = d_cols.data() + r * n;
    for (size_t t = 0; t < t_count; ++t) {
      double g_out = dy.at2(r, t);
      const double* filt = weights.data() + t * n;
      if (rectifier) {
        double pre = bias[t];
        for (size_t c = 0; c < n; ++c) pre += patch[c] * filt[c];
        if (pre <= 0.0) g_out = 0.0;
      }
      gr.d_bias[t] += g_out;
      if (g_out == 0.0) continue;
      double* dfilt = gr.d_weights.data() + t * n;
      for (size_t c = 0; c < n; ++c) {
        dfilt[c] += g_out * patch[c];
        dpatch[c] += g_out * filt[c];
      }
    }
  }
  gr.d_input = col2im(d_cols, g, x.shape());
  return gr;
}

}  // namespace tnet
