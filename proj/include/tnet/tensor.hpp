#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace tnet {

// Dense row-major float64 tensor.
//
// Shape conventions used throughout the project:
//   images      [B, C, H, W]
//   matrices    [rows, cols]
//   vectors     [n]
// All math runs in IEEE float64; int8 enters only through quantized weights.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape);  // zero-filled
  Tensor(std::vector<size_t> shape, std::vector<double> data);

  static Tensor full(std::vector<size_t> shape, double value);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t extent(size_t dim) const { return shape_[dim]; }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](size_t i) const { return data_[i]; }
  double& operator[](size_t i) { return data_[i]; }

  // Row-major offsets for the common ranks.
  size_t index2(size_t r, size_t c) const { return r * shape_[1] + c; }
  size_t index4(size_t b, size_t c, size_t h, size_t w) const {
    return ((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  double at2(size_t r, size_t c) const { return data_[index2(r, c)]; }
  double& at2(size_t r, size_t c) { return data_[index2(r, c)]; }
  double at4(size_t b, size_t c, size_t h, size_t w) const { return data_[index4(b, c, h, w)]; }
  double& at4(size_t b, size_t c, size_t h, size_t w) { return data_[index4(b, c, h, w)]; }

  // Same data, new shape; element count must match.
  Tensor reshaped(std::vector<size_t> shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const;

 private:
  std::vector<size_t> shape_;
  std::vector<double> data_;
};

size_t shape_product(const std::vector<size_t>& shape);
std::string shape_to_string(const std::vector<size_t>& shape);

// Geometry of a square sliding-window kernel.
struct ConvGeometry {
  int kernel_size = 1;
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
  int pad = 0;

  // floor((extent + 2*pad - S)/stride) + 1
  int out_extent(int in_extent) const;
  // Throws ShapeError unless both output extents are >= 1.
  void validate(int in_h, int in_w) const;
};

// Lowers [B, C, H, W] into a patch matrix [B*H_out*W_out, S*S*C]. Row r holds
// the receptive field of output position r; within a row the layout is
// channel-major, i.e. column (k*S + i)*S + j holds input channel k at kernel
// offset (i, j). Padded positions are literal 0.0.
Tensor im2col(const Tensor& x, const ConvGeometry& g);

// Adjoint of im2col: scatters patch rows back onto [B, C, H, W], summing
// overlapping contributions and discarding anything that fell on padding.
Tensor col2im(const Tensor& cols, const ConvGeometry& g, const std::vector<size_t>& target_shape);

}  // namespace tnet
