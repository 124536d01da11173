#include <cmath>

#include "doctest.h"
#include "support/fd.hpp"
#include "support/gradcheck.hpp"
#include "tnet/data_io.hpp"
#include "tnet/error.hpp"
#include "tnet/network.hpp"
#include "tnet/rng.hpp"
#include "tnet/trainer.hpp"

using namespace tnet;

namespace {

NetworkSpec tiny_mlp(int n_in, int hidden, int n_out) {
  NetworkSpec spec;
  spec.input_shape = {static_cast<size_t>(n_in)};
  LayerSpec a;
  a.id = 0;
  a.kind = LayerKind::t_linear;
  a.in_features = n_in;
  a.out_features = hidden;
  spec.layers.push_back(a);
  LayerSpec b;
  b.id = 1;
  b.kind = LayerKind::t_linear;
  b.in_features = hidden;
  b.out_features = n_out;
  spec.layers.push_back(b);
  return spec;
}

}  // namespace

TEST_CASE("softmax_xent closed forms") {
  const Tensor uniform({1, 2}, {0.0, 0.0});
  const LossGrad a = softmax_xent(uniform, {0});
  CHECK(a.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const Tensor confident({1, 2}, {10.0, -10.0});
  const LossGrad b = softmax_xent(confident, {0});
  CHECK(b.loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
  CHECK(b.loss == doctest::Approx(2.061e-9).epsilon(1e-3));

  CHECK_THROWS_AS(softmax_xent(uniform, {2}), Error);  // label out of range
}

TEST_CASE("softmax_xent gradient matches finite differences") {
  Rng rng(19);
  Tensor logits({3, 5});
  for (double& v : logits.values()) v = rng.normal();
  const std::vector<int> labels{1, 4, 0};
  const LossGrad lg = softmax_xent(logits, labels);

  Tensor probe = logits;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double numeric = fd::central_diff(
        [&] { return softmax_xent(probe, labels).loss; }, &probe[i], 1e-5);
    CHECK(fd::rel_err(lg.d_logits[i], numeric) < 1e-6);
  }
}

TEST_CASE("mse_loss gradient matches finite differences") {
  Rng rng(23);
  Tensor logits({2, 3});
  Tensor targets({2, 3});
  for (double& v : logits.values()) v = rng.normal();
  for (double& v : targets.values()) v = rng.normal();
  const LossGrad lg = mse_loss(logits, targets);
  Tensor probe = logits;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double numeric = fd::central_diff(
        [&] { return mse_loss(probe, targets).loss; }, &probe[i], 1e-6);
    CHECK(fd::rel_err(lg.d_logits[i], numeric) < 1e-6);
  }
}

TEST_CASE("sgd_step recurrences") {
  NetworkSpec spec;
  spec.input_shape = {1};
  LayerSpec l;
  l.id = 0;
  l.kind = LayerKind::t_linear;
  l.in_features = 1;
  l.out_features = 1;
  spec.layers.push_back(l);
  Model m = build(spec, 1);
  m.layers[0].params.weights[0] = 2.0;

  ModelGrads g;
  g.layers.resize(1);
  g.layers[0].d_weights = Tensor({1, 1}, {0.5});
  g.layers[0].d_bias = Tensor({1});

  TrainConfig plain;
  plain.learning_rate = 1.0;
  plain.momentum = 0.0;
  Velocity vel = Velocity::zeros_like(m);
  sgd_step(m, g, plain, vel);
  CHECK(m.layers[0].params.weights[0] == 1.5);

  // Two momentum steps with unit gradient: velocities 1 then 1.9.
  Model m2 = build(spec, 1);
  const double w0 = m2.layers[0].params.weights[0];
  TrainConfig mom;
  mom.learning_rate = 0.1;
  mom.momentum = 0.9;
  Velocity vel2 = Velocity::zeros_like(m2);
  ModelGrads unit = g;
  unit.layers[0].d_weights[0] = 1.0;
  sgd_step(m2, unit, mom, vel2);
  sgd_step(m2, unit, mom, vel2);
  CHECK(m2.layers[0].params.weights[0] == doctest::Approx(w0 - 0.1 * (1.0 + 1.9)).epsilon(1e-12));

  // Zero gradient is a bit-for-bit fixed point.
  Model m3 = build(spec, 1);
  const uint64_t before = param_hash(m3);
  ModelGrads zero = g;
  zero.layers[0].d_weights[0] = 0.0;
  Velocity vel3 = Velocity::zeros_like(m3);
  sgd_step(m3, zero, mom, vel3);
  CHECK(param_hash(m3) == before);

  // Polarity is never a parameter.
  CHECK(polarity_hash(m2) == polarity_hash(build(spec, 1)));
}

TEST_CASE("train with lr=0 leaves parameters unchanged and loss constant") {
  Model m = build(tiny_mlp(2, 6, 2), 3);
  // Every sample identical, so each batch sees the same data.
  Dataset ds;
  ds.name = "constant";
  ds.class_count = 2;
  ds.samples = Tensor({16, 2});
  for (size_t i = 0; i < 16; ++i) {
    ds.samples.at2(i, 0) = 0.3;
    ds.samples.at2(i, 1) = -0.7;
  }
  ds.labels.assign(16, 1);
  const uint64_t before = param_hash(m);

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.momentum = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const TrainReport report = train(m, ds, nullptr, cfg);
  CHECK(param_hash(m) == before);
  CHECK(report.train_loss[0] == report.train_loss[1]);
}

TEST_CASE("same seed twice gives byte-identical parameters and loss sequences") {
  const Dataset ds = synth_blobs(24, 3.0, 0.7, 4);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 77;

  Model a = build(tiny_mlp(2, 8, 2), 50);
  Model b = build(tiny_mlp(2, 8, 2), 50);
  const TrainReport ra = train(a, ds, nullptr, cfg);
  const TrainReport rb = train(b, ds, nullptr, cfg);
  CHECK(ra.final_param_hash == rb.final_param_hash);
  REQUIRE(ra.train_loss.size() == rb.train_loss.size());
  for (size_t i = 0; i < ra.train_loss.size(); ++i) {
    CHECK(ra.train_loss[i] == rb.train_loss[i]);  // bit-identical
  }
}

TEST_CASE("polarity masks survive a training run untouched") {
  Model m = build(tiny_mlp(2, 16, 2), 8);
  const uint64_t mask_before = polarity_hash(m);
  const Dataset ds = synth_blobs(32, 2.0, 0.6, 5);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 5;  // 100 steps at batch 4... 16 steps/epoch
  cfg.batch_size = 4;
  train(m, ds, nullptr, cfg);
  CHECK(polarity_hash(m) == mask_before);
}

TEST_CASE("training loss decreases on separable blobs for at least 9 of 10 seeds") {
  int improved = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset ds = synth_blobs(32, 4.0, 0.8, 100 + seed);
    Model m = build(tiny_mlp(2, 8, 2), 200 + seed);
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.momentum = 0.9;
    cfg.batch_size = 8;
    cfg.epochs = 25;  // 8 steps per epoch = 200 steps
    cfg.seed = seed;
    const EvalResult initial = evaluate(m, ds);
    const TrainReport report = train(m, ds, nullptr, cfg);
    if (report.train_loss.back() < initial.mean_loss) ++improved;
  }
  CHECK(improved >= 9);
}

TEST_CASE("evaluate: exact predictor, tie-break, empty dataset") {
  // Hand-built 2->2 threshold model: logit k tracks feature k (gate pinned
  // open by a very low threshold), so argmax reproduces the larger feature.
  NetworkSpec spec;
  spec.input_shape = {2};
  LayerSpec l;
  l.id = 0;
  l.kind = LayerKind::t_linear;
  l.in_features = 2;
  l.out_features = 2;
  spec.layers.push_back(l);
  Model m = build(spec, 1);
  m.layers[0].params.weights = Tensor({2, 2}, {-100.0, 100.0, 100.0, -100.0});
  m.layers[0].params.bias = Tensor({2});
  m.layers[0].mask = PolarityMask({1, 1});

  Dataset ds;
  ds.name = "toy";
  ds.class_count = 2;
  ds.samples = Tensor({4, 2}, {3, 1, 0, 2, 5, 4, 1, 6});
  ds.labels = {0, 1, 0, 1};
  CHECK(evaluate(m, ds).accuracy == 1.0);

  // Constant logits -> always class 0 -> exactly 1/K on balanced data.
  Model flat = build(spec, 1);
  flat.layers[0].params.weights = Tensor({2, 2});
  flat.layers[0].params.bias = Tensor({2});
  flat.layers[0].mask = PolarityMask({1, 1});
  Dataset balanced;
  balanced.name = "balanced";
  balanced.class_count = 2;
  balanced.samples = Tensor({4, 2}, {1, 2, 2, 1, 3, 1, 1, 3});
  balanced.labels = {1, 0, 1, 0};
  CHECK(evaluate(flat, balanced).accuracy == doctest::Approx(0.5).epsilon(1e-12));

  Dataset empty;
  empty.name = "empty";
  empty.class_count = 2;
  empty.samples = Tensor();
  CHECK_THROWS_AS(evaluate(m, empty), Error);
}

TEST_CASE("end-to-end gradient check on a 3-layer threshold network") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const auto res = gradcheck::run_three_layer_check(seed);
    CHECK(res.params_total == 194);
    CHECK(res.weights.pass_fraction() >= 0.95);
    CHECK(res.biases.pass_fraction() >= 0.95);
  }
}

TEST_CASE("XOR trains to full accuracy without rectifiers or normalization") {
  const Dataset xor_ds = synth_xor(1, 0.0, 0);
  Model m = build(tiny_mlp(2, 8, 2), 12345);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  cfg.batch_size = 4;
  cfg.epochs = 500;  // 500 steps at full batch
  cfg.seed = 1;
  train(m, xor_ds, nullptr, cfg);
  CHECK(evaluate(m, xor_ds).accuracy == 1.0);
}

TEST_CASE("report_to_jsonl emits one record per epoch plus a summary") {
  TrainReport r;
  r.train_loss = {1.0, 0.5};
  r.test_accuracy = {0.4, 0.9};
  r.wall_time_s = {0.1, 0.1};
  r.final_param_hash = 0xabcdef;
  const std::string text = report_to_jsonl(r);
  size_t lines = 0;
  for (char c : text) lines += (c == '\n');
  CHECK(lines == 3);
  CHECK(text.find("\"epoch\":1") != std::string::npos);
  CHECK(text.find("final_param_hash") != std::string::npos);
}
