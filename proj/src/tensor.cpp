#include "tnet/tensor.hpp"

#include <sstream>

#include "tnet/error.hpp"

namespace tnet {

size_t shape_product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check_shape(const std::vector<size_t>& shape, size_t data_size) {
  for (size_t e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_to_string(shape));
  }
  if (shape_product(shape) != data_size) {
    throw ShapeError("shape " + shape_to_string(shape) + " does not match data size " +
                     std::to_string(data_size));
  }
}

}  // namespace

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
  check_shape(shape_, data_.size());
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_, data_.size());
}

Tensor Tensor::full(std::vector<size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::reshaped(std::vector<size_t> shape) const {
  if (shape_product(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str() + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

int ConvGeometry::out_extent(int in_extent) const {
  return (in_extent + 2 * pad - kernel_size) / stride + 1;
}

void ConvGeometry::validate(int in_h, int in_w) const {
  if (kernel_size < 1 || stride < 1 || pad < 0 || in_channels < 1 || out_channels < 1) {
    throw ShapeError("invalid conv geometry: S=" + std::to_string(kernel_size) +
                     " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad));
  }
  if (in_h + 2 * pad < kernel_size || in_w + 2 * pad < kernel_size || out_extent(in_h) < 1 ||
      out_extent(in_w) < 1) {
    throw ShapeError("conv output extent < 1 for input " + std::to_string(in_h) + "x" +
                     std::to_string(in_w) + " with S=" + std::to_string(kernel_size) +
                     " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad));
  }
}

Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  if (x.rank() != 4) {
    throw ShapeError("im2col expects [B, C, H, W], got " + x.shape_str());
  }
  const int B = static_cast<int>(x.extent(0));
  const int C = static_cast<int>(x.extent(1));
  const int H = static_cast<int>(x.extent(2));
  const int W = static_cast<int>(x.extent(3));
  if (C != g.in_channels) {
    throw ShapeError("im2col: input has " + std::to_string(C) + " channels, geometry expects " +
                     std::to_string(g.in_channels));
  }
  g.validate(H, W);

  const int S = g.kernel_size;
  const int oh = g.out_extent(H);
  const int ow = g.out_extent(W);
  const size_t rows = static_cast<size_t>(B) * oh * ow;
  const size_t cols = static_cast<size_t>(S) * S * C;

  Tensor out({rows, cols});
  double* dst = out.data();
  for (int b = 0; b < B; ++b) {
    for (int m = 0; m < oh; ++m) {
      for (int n = 0; n < ow; ++n) {
        const size_t r = (static_cast<size_t>(b) * oh + m) * ow + n;
        double* row = dst + r * cols;
        for (int k = 0; k < C; ++k) {
          for (int i = 0; i < S; ++i) {
            const int h = m * g.stride - g.pad + i;
            for (int j = 0; j < S; ++j) {
              const int w = n * g.stride - g.pad + j;
              const size_t c = (static_cast<size_t>(k) * S + i) * S + j;
              row[c] = (h >= 0 && h < H && w >= 0 && w < W) ? x.at4(b, k, h, w) : 0.0;
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor col2im(const Tensor& cols, const ConvGeometry& g, const std::vector<size_t>& target_shape) {
  if (target_shape.size() != 4) {
    throw ShapeError("col2im target must be [B, C, H, W], got " + shape_to_string(target_shape));
  }
  const int B = static_cast<int>(target_shape[0]);
  const int C = static_cast<int>(target_shape[1]);
  const int H = static_cast<int>(target_shape[2]);
  const int W = static_cast<int>(target_shape[3]);
  if (C != g.in_channels) {
    throw ShapeError("col2im: target has " + std::to_string(C) + " channels, geometry expects " +
                     std::to_string(g.in_channels));
  }
  g.validate(H, W);

  const int S = g.kernel_size;
  const int oh = g.out_extent(H);
  const int ow = g.out_extent(W);
  const size_t rows = static_cast<size_t>(B) * oh * ow;
  const size_t width = static_cast<size_t>(S) * S * C;
  if (cols.rank() != 2 || cols.extent(0) != rows || cols.extent(1) != width) {
    throw ShapeError("col2im: cols shape " + cols.shape_str() + " does not match target " +
                     shape_to_string(target_shape) + " under the given geometry");
  }

  Tensor out(target_shape);
  const double* src = cols.data();
  for (int b = 0; b < B; ++b) {
    for (int m = 0; m < oh; ++m) {
      for (int n = 0; n < ow; ++n) {
        const size_t r = (static_cast<size_t>(b) * oh + m) * ow + n;
        const double* row = src + r * width;
        for (int k = 0; k < C; ++k) {
          for (int i = 0; i < S; ++i) {
            const int h = m * g.stride - g.pad + i;
            if (h < 0 || h >= H) continue;
            for (int j = 0; j < S; ++j) {
              const int w = n * g.stride - g.pad + j;
              if (w < 0 || w >= W) continue;
              const size_t c = (static_cast<size_t>(k) * S + i) * S + j;
              out.at4(b, k, h, w) += row[c];
            }
          }
        }
      }
    }
  }
  return out;
}

}  // namespace tnet
