#include "doctest.h"
#include "support/oracles.hpp"
#include "tnet/error.hpp"
#include "tnet/rng.hpp"
#include "tnet/tensor.hpp"

using namespace tnet;

namespace {

Tensor random_image(size_t b, size_t c, size_t h, size_t w, Rng& rng) {
  Tensor t({b, c, h, w});
  for (double& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("tensor invariants are enforced at construction") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}).reshaped({3}), ShapeError);
  const Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape_str() == "[2, 3]");
}

TEST_CASE("im2col extracts the single full patch") {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const ConvGeometry g{2, 1, 1, 1, 0};
  const Tensor cols = im2col(x, g);
  REQUIRE(cols.shape() == std::vector<size_t>{1, 4});
  CHECK(cols[0] == 1.0);
  CHECK(cols[1] == 2.0);
  CHECK(cols[2] == 3.0);
  CHECK(cols[3] == 4.0);
}

TEST_CASE("im2col with S=1 yields identity patches") {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const ConvGeometry g{1, 1, 1, 1, 0};
  const Tensor cols = im2col(x, g);
  REQUIRE(cols.shape() == std::vector<size_t>{4, 1});
  for (size_t i = 0; i < 4; ++i) CHECK(cols[i] == static_cast<double>(i + 1));
}

TEST_CASE("im2col pads with literal zeros") {
  const Tensor x({1, 1, 1, 1}, {5.0});
  const ConvGeometry g{3, 1, 1, 1, 1};
  const Tensor cols = im2col(x, g);
  REQUIRE(cols.shape() == std::vector<size_t>{1, 9});
  for (size_t i = 0; i < 9; ++i) CHECK(cols[i] == (i == 4 ? 5.0 : 0.0));
}

TEST_CASE("im2col rejects mismatched shapes") {
  const Tensor x({1, 2, 4, 4});
  CHECK_THROWS_AS(im2col(x, ConvGeometry{3, 1, 1, 1, 0}), ShapeError);      // channel mismatch
  CHECK_THROWS_AS(im2col(x, ConvGeometry{5, 2, 1, 1, 0}), ShapeError);      // kernel too large
  CHECK_THROWS_AS(im2col(Tensor({4, 4}), ConvGeometry{3, 1, 1, 1, 1}), ShapeError);
}

TEST_CASE("col2im inverts im2col for disjoint patches") {
  Rng rng(7);
  const Tensor x = random_image(2, 3, 4, 5, rng);
  const ConvGeometry g{1, 3, 1, 1, 0};
  const Tensor back = col2im(im2col(x, g), g, x.shape());
  CHECK(oracle::max_abs_diff(back, x) == 0.0);
}

TEST_CASE("col2im sums overlapping windows, 4 at the center of a 3x3") {
  const ConvGeometry g{2, 1, 1, 1, 0};
  const std::vector<size_t> shape{1, 1, 3, 3};
  const Tensor ones_cols = Tensor::full({4, 4}, 1.0);
  const Tensor out = col2im(ones_cols, g, shape);
  const Tensor counts = oracle::window_membership_counts(shape, g);
  CHECK(counts.at4(0, 0, 1, 1) == 4.0);  // brute-force overlap count
  CHECK(oracle::max_abs_diff(out, counts) == 0.0);
}

TEST_CASE("col2im of zero columns is a zero tensor") {
  const ConvGeometry g{3, 2, 1, 2, 1};
  const std::vector<size_t> shape{1, 2, 5, 5};
  const Tensor zeros({static_cast<size_t>(3 * 3), 18});
  const Tensor out = col2im(zeros, g, shape);
  for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("col2im(im2col(x)) equals x weighted by window membership counts") {
  Rng rng(123);
  const int kernel_sizes[] = {1, 2, 3};
  const int strides[] = {1, 2};
  const int pads[] = {0, 1};
  for (int s : kernel_sizes) {
    for (int st : strides) {
      for (int pad : pads) {
        if (6 + 2 * pad < s) continue;
        const ConvGeometry g{s, 2, 1, st, pad};
        const Tensor x = random_image(2, 2, 6, 7, rng);
        const Tensor round = col2im(im2col(x, g), g, x.shape());
        const Tensor counts = oracle::window_membership_counts(x.shape(), g);
        Tensor expect = x;
        for (size_t i = 0; i < expect.size(); ++i) expect[i] *= counts[i];
        CHECK(oracle::max_abs_diff(round, expect) < 1e-12);
      }
    }
  }
}

TEST_CASE("im2col is linear") {
  Rng rng(99);
  for (int iter = 0; iter < 5; ++iter) {
    const Tensor x = random_image(1, 2, 5, 5, rng);
    const Tensor y = random_image(1, 2, 5, 5, rng);
    const double a = rng.normal();
    const double b = rng.normal();
    const ConvGeometry g{3, 2, 1, 1, 1};

    Tensor mix(x.shape());
    for (size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const Tensor lhs = im2col(mix, g);
    const Tensor cx = im2col(x, g);
    const Tensor cy = im2col(y, g);
    Tensor rhs(lhs.shape());
    for (size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cy[i];
    CHECK(oracle::max_abs_diff(lhs, rhs) < 1e-12);
  }
}
