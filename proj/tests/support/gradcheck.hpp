#pragma once

// End-to-end finite-difference check: a 3-layer threshold network (194
// parameters) against the analytic gradient of the softmax cross-entropy
// loss. Weight coordinates whose gate pair sits within 10*h of a tie are
// excluded; a central difference across a gate flip measures a different
// piecewise-linear segment.

#include <cmath>
#include <vector>

#include "support/fd.hpp"
#include "tnet/network.hpp"
#include "tnet/rng.hpp"
#include "tnet/trainer.hpp"

namespace tnet::gradcheck {

struct Result {
  fd::Tally weights;
  fd::Tally biases;
  size_t params_total = 0;
};

inline Result run_three_layer_check(uint64_t seed, double h = 1e-5, double tolerance = 1e-4) {
  NetworkSpec spec;
  spec.input_shape = {6};
  const int dims[4] = {6, 10, 8, 4};
  for (int i = 0; i < 3; ++i) {
    LayerSpec l;
    l.id = i;
    l.kind = LayerKind::t_linear;
    l.in_features = dims[i];
    l.out_features = dims[i + 1];
    spec.layers.push_back(l);
  }
  Model model = build(spec, seed);

  Rng rng = Rng(seed).fork(17);
  Tensor x({4, 6});
  for (double& v : x.values()) v = rng.normal();
  std::vector<int> labels(4);
  for (int& y : labels) y = static_cast<int>(rng.below(4));

  const auto loss_of = [&](const Model& m) {
    return softmax_xent(forward(m, x), labels).loss;
  };

  ForwardCache cache;
  const Tensor logits = forward(model, x, &cache);
  const LossGrad lg = softmax_xent(logits, labels);
  const ModelGrads grads = backward(model, cache, lg.d_logits);

  const double band = 10.0 * h;
  Result res;
  Model probe = model;
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const Tensor& w = model.layers[li].params.weights;
    const Tensor& in = cache.inputs[li];
    const size_t n_in = w.extent(1);
    const size_t n_out = w.extent(0);
    res.params_total += w.size() + model.layers[li].params.bias.size();

    for (size_t o = 0; o < n_out; ++o) {
      for (size_t i = 0; i < n_in; ++i) {
        bool excluded = false;
        for (size_t b = 0; b < in.extent(0) && !excluded; ++b) {
          if (std::abs(in.at2(b, i) - w.at2(o, i)) < band) excluded = true;
        }
        if (excluded) {
          ++res.weights.excluded;
          continue;
        }
        double* slot = &probe.layers[li].params.weights.at2(o, i);
        const double numeric = fd::central_diff([&] { return loss_of(probe); }, slot, h);
        res.weights.add(grads.layers[li].d_weights.at2(o, i), numeric, tolerance);
      }
    }
    for (size_t o = 0; o < n_out; ++o) {
      double* slot = &probe.layers[li].params.bias[o];
      const double numeric = fd::central_diff([&] { return loss_of(probe); }, slot, h);
      res.biases.add(grads.layers[li].d_bias[o], numeric, tolerance);
    }
  }
  return res;
}

}  // namespace tnet::gradcheck
