#include <cmath>

#include "doctest.h"
#include "support/fd.hpp"
#include "support/oracles.hpp"
#include "tnet/error.hpp"
#include "tnet/rng.hpp"
#include "tnet/threshold.hpp"

using namespace tnet;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

PolarityMask random_mask(size_t n, Rng& rng) {
  std::vector<uint8_t> bits(n);
  for (auto& b : bits) b = rng.coin() ? 1 : 0;
  return PolarityMask(std::move(bits));
}

}  // namespace

TEST_CASE("t_apply follows the gated difference rules") {
  CHECK(t_apply(3.0, 1.0, Polarity::positive) == 2.0);
  CHECK(t_apply(3.0, 1.0, Polarity::negative) == -2.0);
  CHECK(t_apply(2.0, 2.0, Polarity::positive) == 0.0);  // tie
  CHECK(t_apply(2.0, 2.0, Polarity::negative) == 0.0);
  CHECK(t_apply(0.0, 1.0, Polarity::positive) == 0.0);  // closed gate
}

TEST_CASE("t_dot aggregates gated terms plus bias") {
  const std::vector<double> x{1, 2, 3};
  const std::vector<double> w{2, 1, 1};
  CHECK(t_dot(x, w, Polarity::positive, 0.0) == 3.0);    // 0 + 1 + 2
  CHECK(t_dot(x, w, Polarity::negative, 0.5) == -2.5);   // -3 + 0.5
  CHECK(t_dot(x, x, Polarity::positive, 7.0) == 7.0);    // all gates at tie
  CHECK(t_dot(x, x, Polarity::negative, 7.0) == 7.0);
  CHECK_THROWS_AS(t_dot(x, std::vector<double>{1, 2}, Polarity::positive, 0.0), ShapeError);
}

TEST_CASE("t_linear_forward reduces to t_dot per unit") {
  ThresholdParams p{Tensor({1, 3}, {2, 1, 1}), Tensor({1}, {0.0})};
  const PolarityMask mask({1});
  const Tensor x({1, 3}, {1, 2, 3});
  const Tensor y = t_linear_forward(x, p, mask);
  REQUIRE(y.shape() == std::vector<size_t>{1, 1});
  CHECK(y[0] == 3.0);
}

TEST_CASE("t_linear_forward with zero thresholds and positive inputs sums the inputs") {
  ThresholdParams p{Tensor({2, 4}), Tensor({2})};
  const PolarityMask mask({1, 1});
  const Tensor x({1, 4}, {0.5, 1.5, 2.0, 3.0});
  const Tensor y = t_linear_forward(x, p, mask);
  CHECK(y.at2(0, 0) == 7.0);
  CHECK(y.at2(0, 1) == 7.0);
}

TEST_CASE("t_linear_forward matches the nested-loop oracle") {
  Rng rng(41);
  const Tensor x = random_tensor({4, 6}, rng);
  ThresholdParams p{random_tensor({5, 6}, rng), random_tensor({5}, rng)};
  const PolarityMask mask = random_mask(5, rng);
  const Tensor got = t_linear_forward(x, p, mask);
  const Tensor want = oracle::naive_t_linear(x, p, mask);
  CHECK(oracle::max_abs_diff(got, want) <= 1e-12);
}

TEST_CASE("t_conv2d_forward termwise examples") {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  ThresholdParams p{Tensor::full({1, 1, 2, 2}, 2.0), Tensor({1})};
  const ConvGeometry g{2, 1, 1, 1, 0};

  const Tensor pos = t_conv2d_forward(x, p, PolarityMask({1}), g);
  REQUIRE(pos.shape() == std::vector<size_t>{1, 1, 1, 1});
  CHECK(pos[0] == 3.0);  // 0 + 0 + 1 + 2

  const Tensor neg = t_conv2d_forward(x, p, PolarityMask({0}), g);
  CHECK(neg[0] == -3.0);
}

TEST_CASE("t_conv2d_forward is bit-identical to the naive oracle") {
  Rng rng(4242);
  const ConvGeometry g{3, 3, 4, 2, 1};
  const Tensor x = random_tensor({1, 3, 8, 8}, rng);
  ThresholdParams p{random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)};
  const PolarityMask mask = random_mask(4, rng);
  const Tensor got = t_conv2d_forward(x, p, mask, g);
  const Tensor want = oracle::naive_t_conv2d(x, p, mask, g);
  REQUIRE(got.shape() == want.shape());
  CHECK(oracle::max_abs_diff(got, want) == 0.0);
}

TEST_CASE("im2col path equals naive path over 100 random geometries") {
  Rng rng(77);
  const int kernel_sizes[] = {1, 2, 3, 5};
  int runs = 0;
  while (runs < 100) {
    const int S = kernel_sizes[rng.below(4)];
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(2));
    const int c_in = 1 + static_cast<int>(rng.below(3));
    const int c_out = 1 + static_cast<int>(rng.below(3));
    const int h = S + static_cast<int>(rng.below(6));
    const int w = S + static_cast<int>(rng.below(6));
    if (h + 2 * pad < S || w + 2 * pad < S) continue;
    ++runs;

    const ConvGeometry g{S, c_in, c_out, stride, pad};
    const Tensor x = random_tensor({1 + rng.below(2), static_cast<size_t>(c_in),
                                    static_cast<size_t>(h), static_cast<size_t>(w)},
                                   rng);
    ThresholdParams p{random_tensor({static_cast<size_t>(c_out), static_cast<size_t>(c_in),
                                     static_cast<size_t>(S), static_cast<size_t>(S)},
                                    rng),
                      random_tensor({static_cast<size_t>(c_out)}, rng)};
    const PolarityMask mask = random_mask(static_cast<size_t>(c_out), rng);
    const Tensor got = t_conv2d_forward(x, p, mask, g);
    const Tensor want = oracle::naive_t_conv2d(x, p, mask, g);
    CHECK(oracle::max_abs_diff(got, want) <= 1e-12);
  }
}

TEST_CASE("t_backward scalar rules") {
  const Tensor x({1, 1}, {3.0});
  ThresholdParams p{Tensor({1, 1}, {1.0}), Tensor({1})};
  const Tensor dy({1, 1}, {1.0});

  const KernelGrads pos = t_linear_backward(x, p, PolarityMask({1}), dy);
  CHECK(pos.d_weights[0] == -1.0);
  CHECK(pos.d_input[0] == 1.0);
  CHECK(pos.d_bias[0] == 1.0);

  const KernelGrads neg = t_linear_backward(x, p, PolarityMask({0}), dy);
  CHECK(neg.d_weights[0] == 1.0);
  CHECK(neg.d_input[0] == -1.0);
  CHECK(neg.d_bias[0] == 1.0);

  // Closed gate and tie contribute nothing.
  const Tensor x2({1, 1}, {1.0});
  ThresholdParams p2{Tensor({1, 1}, {1.0}), Tensor({1})};
  const KernelGrads tie = t_linear_backward(x2, p2, PolarityMask({1}), dy);
  CHECK(tie.d_weights[0] == 0.0);
  CHECK(tie.d_input[0] == 0.0);
  CHECK(tie.d_bias[0] == 1.0);
}

TEST_CASE("t_conv2d_backward matches central finite differences") {
  const double h = 1e-5;
  const double band = 10.0 * h;
  Rng rng(2024);

  const ConvGeometry g{3, 2, 3, 2, 1};
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  ThresholdParams p{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)};
  const PolarityMask mask = random_mask(3, rng);
  const Tensor probe = random_tensor({2, 3, 3, 3}, rng);  // fixed functional direction

  const auto loss_for = [&](const Tensor& xin, const ThresholdParams& params) {
    const Tensor y = t_conv2d_forward(xin, params, mask, g);
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };

  Tensor d_out(probe.shape(), probe.values());
  const KernelGrads grads = t_conv2d_backward(x, p, mask, g, d_out);

  // Tie exclusion: a coordinate is skipped when any (x, w) pair it touches is
  // within the band. Pairings are recomputed here from first principles.
  const Tensor cols = im2col(x, g);
  const size_t n = cols.extent(1);
  const size_t t_count = 3;

  Tensor x_mut = x;
  ThresholdParams p_mut = p;
  fd::Tally w_tally, x_tally, b_tally;

  for (size_t t = 0; t < t_count; ++t) {
    for (size_t c = 0; c < n; ++c) {
      bool excluded = false;
      for (size_t r = 0; r < cols.extent(0) && !excluded; ++r) {
        if (std::abs(cols.at2(r, c) - p.weights[t * n + c]) < band) excluded = true;
      }
      if (excluded) {
        ++w_tally.excluded;
        continue;
      }
      const double numeric = fd::central_diff(
          [&] { return loss_for(x, p_mut); }, &p_mut.weights[t * n + c], h);
      w_tally.add(grads.d_weights[t * n + c], numeric, 1e-6);
    }
  }

  // Input coordinates; map each (row, col) of the patch matrix back to its
  // source cell the same way im2col lays them out.
  const int S = g.kernel_size, C = 2, H = 5, W = 5, oh = 3, ow = 3;
  std::vector<bool> x_excluded(x.size(), false);
  for (int b = 0; b < 2; ++b) {
    for (int m = 0; m < oh; ++m) {
      for (int nn = 0; nn < ow; ++nn) {
        const size_t r = (static_cast<size_t>(b) * oh + m) * ow + nn;
        for (int k = 0; k < C; ++k) {
          for (int i = 0; i < S; ++i) {
            for (int j = 0; j < S; ++j) {
              const int hh = m * g.stride - g.pad + i;
              const int ww = nn * g.stride - g.pad + j;
              if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
              const size_t c = (static_cast<size_t>(k) * S + i) * S + j;
              for (size_t t = 0; t < t_count; ++t) {
                if (std::abs(cols.at2(r, c) - p.weights[t * n + c]) < band) {
                  x_excluded[x.index4(b, k, hh, ww)] = true;
                }
              }
            }
          }
        }
      }
    }
  }
  for (size_t i = 0; i < x.size(); ++i) {
    if (x_excluded[i]) {
      ++x_tally.excluded;
      continue;
    }
    const double numeric =
        fd::central_diff([&] { return loss_for(x_mut, p); }, &x_mut[i], h);
    x_tally.add(grads.d_input[i], numeric, 1e-6);
  }

  for (size_t t = 0; t < t_count; ++t) {
    const double numeric =
        fd::central_diff([&] { return loss_for(x, p_mut); }, &p_mut.bias[t], h);
    b_tally.add(grads.d_bias[t], numeric, 1e-6);
  }

  CHECK(w_tally.checked > 0);
  CHECK(x_tally.checked > 0);
  CHECK(w_tally.worst < 1e-6);
  CHECK(x_tally.worst < 1e-6);
  CHECK(b_tally.worst < 1e-6);
}

TEST_CASE("conventional kernels: dot product, rectifier clamp, oracle agreement") {
  const Tensor x({1, 2}, {1, 2});
  const Tensor w({1, 2}, {3, 4});
  const Tensor b({1}, {0.0});
  CHECK(linear_forward(x, w, b, false)[0] == 11.0);

  const Tensor b_neg({1}, {-16.0});
  CHECK(linear_forward(x, w, b_neg, false)[0] == -5.0);
  CHECK(linear_forward(x, w, b_neg, true)[0] == 0.0);

  Rng rng(31);
  const ConvGeometry g{3, 2, 2, 1, 1};
  const Tensor xi = random_tensor({2, 2, 6, 6}, rng);
  const Tensor wi = random_tensor({2, 2, 3, 3}, rng);
  const Tensor bi = random_tensor({2}, rng);
  const Tensor got = conv2d_forward(xi, wi, bi, g, false);
  const Tensor want = oracle::naive_conv2d(xi, wi, bi, g, false);
  CHECK(oracle::max_abs_diff(got, want) <= 1e-12);
}

TEST_CASE("conventional backward matches finite differences") {
  const double h = 1e-5;
  Rng rng(55);
  const ConvGeometry g{3, 2, 2, 1, 1};
  const Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  const Tensor probe = random_tensor({1, 2, 4, 4}, rng);

  const auto loss_for = [&](const Tensor& xin, const Tensor& win, const Tensor& bin) {
    const Tensor y = conv2d_forward(xin, win, bin, g, false);
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  const KernelGrads grads = conv2d_backward(x, w, b, g, false, probe);

  fd::Tally tally;
  Tensor x_mut = x;
  for (size_t i = 0; i < w.size(); ++i) {
    tally.add(grads.d_weights[i],
              fd::central_diff([&] { return loss_for(x, w, b); }, &w[i], h), 1e-6);
  }
  for (size_t i = 0; i < x.size(); ++i) {
    tally.add(grads.d_input[i],
              fd::central_diff([&] { return loss_for(x_mut, w, b); }, &x_mut[i], h), 1e-6);
  }
  for (size_t i = 0; i < b.size(); ++i) {
    tally.add(grads.d_bias[i],
              fd::central_diff([&] { return loss_for(x, w, b); }, &b[i], h), 1e-6);
  }
  CHECK(tally.worst < 1e-6);
}

TEST_CASE("gate consistency, polarity sign, and output bound") {
  Rng rng(6);
  for (int iter = 0; iter < 20; ++iter) {
    const size_t n_in = 1 + rng.below(8);
    const Tensor x = random_tensor({1, n_in}, rng);
    ThresholdParams p{random_tensor({1, n_in}, rng), random_tensor({1}, rng)};
    const PolarityMask mask = random_mask(1, rng);

    // Per-element contribution is nonzero iff the gate is open, and carries
    // the mask's sign when open.
    double bound = 0.0;
    for (size_t i = 0; i < n_in; ++i) {
      const double c = t_apply(x[i], p.weights[i], mask.polarity(0));
      if (x[i] > p.weights[i]) {
        CHECK(c != 0.0);
        CHECK((c > 0.0) == mask.positive(0));
      } else {
        CHECK(c == 0.0);
      }
      bound += std::abs(x[i] - p.weights[i]);
    }
    const Tensor y = t_linear_forward(x, p, mask);
    CHECK(std::abs(y[0] - p.bias[0]) <= bound + 1e-12);
  }
}

TEST_CASE("gradient-gate alignment: nonzero dW implies an open forward gate") {
  Rng rng(8);
  const Tensor x = random_tensor({3, 5}, rng);
  ThresholdParams p{random_tensor({4, 5}, rng), random_tensor({4}, rng)};
  const PolarityMask mask = random_mask(4, rng);
  const Tensor dy = random_tensor({3, 4}, rng);
  const KernelGrads grads = t_linear_backward(x, p, mask, dy);
  for (size_t o = 0; o < 4; ++o) {
    for (size_t i = 0; i < 5; ++i) {
      if (grads.d_weights.at2(o, i) != 0.0) {
        bool open_somewhere = false;
        for (size_t b = 0; b < 3; ++b) {
          if (x.at2(b, i) > p.weights.at2(o, i)) open_somewhere = true;
        }
        CHECK(open_somewhere);
      }
    }
  }
}

TEST_CASE("forward is affine where no gate state changes") {
  Rng rng(9);
  for (int iter = 0; iter < 10; ++iter) {
    const size_t n_in = 4;
    const Tensor x = random_tensor({1, n_in}, rng);
    ThresholdParams p{random_tensor({2, n_in}, rng), random_tensor({2}, rng)};
    const PolarityMask mask = random_mask(2, rng);
    const Tensor dir = random_tensor({1, n_in}, rng, 0.1);

    // Shrink the step until the gate pattern is identical at both endpoints.
    double eps = 1.0;
    auto gates_at = [&](double scale) {
      std::vector<bool> open;
      for (size_t o = 0; o < 2; ++o) {
        for (size_t i = 0; i < n_in; ++i) {
          open.push_back(x[i] + scale * dir[i] > p.weights.at2(o, i));
        }
      }
      return open;
    };
    while (eps > 1e-6 && (gates_at(eps) != gates_at(-eps) || gates_at(eps) != gates_at(0.0))) {
      eps *= 0.5;
    }
    if (gates_at(eps) != gates_at(-eps)) continue;  // tie hugger; skip this draw

    auto eval = [&](double scale) {
      Tensor xs = x;
      for (size_t i = 0; i < n_in; ++i) xs[i] += scale * dir[i];
      return t_linear_forward(xs, p, mask);
    };
    const Tensor lo = eval(-eps), mid = eval(0.0), hi = eval(eps);
    for (size_t o = 0; o < 2; ++o) {
      CHECK(std::abs(hi[o] + lo[o] - 2.0 * mid[o]) < 1e-9);
    }
  }
}
