#include "tnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "tnet/error.hpp"
#include "tnet/rng.hpp"

namespace tnet {

const char* loss_kind_name(LossKind k) {
  return k == LossKind::softmax_cross_entropy ? "softmax-cross-entropy" : "mean-squared-error";
}

LossKind loss_kind_from_name(const std::string& name) {
  if (name == "softmax-cross-entropy" || name == "xent") return LossKind::softmax_cross_entropy;
  if (name == "mean-squared-error" || name == "mse") return LossKind::mean_squared_error;
  throw FormatError("unknown loss kind '" + name + "'");
}

void TrainConfig::validate() const {
  // lr == 0 is allowed as a degenerate no-update configuration.
  if (learning_rate < 0.0) throw InvariantError("learning rate must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw InvariantError("momentum must be in [0, 1)");
  if (batch_size < 1) throw InvariantError("batch size must be >= 1");
  if (epochs < 1) throw InvariantError("epoch count must be >= 1");
}

std::string report_to_jsonl(const TrainReport& report) {
  std::ostringstream os;
  for (size_t e = 0; e < report.train_loss.size(); ++e) {
    nlohmann::json rec{{"epoch", e + 1},
                       {"train_loss", report.train_loss[e]},
                       {"test_accuracy", report.test_accuracy[e]},
                       {"wall_time_s", report.wall_time_s[e]}};
    os << rec.dump() << "\n";
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(report.final_param_hash));
  os << nlohmann::json{{"final_param_hash", std::string(buf)}}.dump() << "\n";
  return os.str();
}

LossGrad softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_xent expects logits [B, K], got " + logits.shape_str());
  }
  const size_t B = logits.extent(0), K = logits.extent(1);
  if (labels.size() != B) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<size_t>(y) >= K) {
      throw Error("label " + std::to_string(y) + " out of range [0, " + std::to_string(K) + ")");
    }
  }

  LossGrad out;
  out.d_logits = Tensor({B, K});
  double total = 0.0;
  for (size_t b = 0; b < B; ++b) {
    double hi = logits.at2(b, 0);
    for (size_t k = 1; k < K; ++k) hi = std::max(hi, logits.at2(b, k));
    double z = 0.0;
    for (size_t k = 0; k < K; ++k) z += std::exp(logits.at2(b, k) - hi);
    const double log_z = std::log(z);
    total += log_z - (logits.at2(b, static_cast<size_t>(labels[b])) - hi);
    for (size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits.at2(b, k) - hi) / z;
      out.d_logits.at2(b, k) =
          (p - (static_cast<size_t>(labels[b]) == k ? 1.0 : 0.0)) / static_cast<double>(B);
    }
  }
  out.loss = total / static_cast<double>(B);
  return out;
}

LossGrad mse_loss(const Tensor& logits, const Tensor& targets) {
  if (!logits.same_shape(targets)) {
    throw ShapeError("mse_loss: logits " + logits.shape_str() + " vs targets " +
                     targets.shape_str());
  }
  LossGrad out;
  out.d_logits = Tensor(logits.shape());
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double total = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double d = logits[i] - targets[i];
    total += d * d;
    out.d_logits[i] = 2.0 * d * inv_n;
  }
  out.loss = total * inv_n;
  return out;
}

Velocity Velocity::zeros_like(const Model& m) {
  Velocity v;
  v.layers.resize(m.layers.size());
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerState& st = m.layers[i];
    if (st.has_params()) {
      v.layers[i].v_weights = Tensor(st.params.weights.shape());
      v.layers[i].v_bias = Tensor(st.params.bias.shape());
    }
    if (st.has_projection()) {
      v.layers[i].v_proj_weights = Tensor(st.proj.weights.shape());
      v.layers[i].v_proj_bias = Tensor(st.proj.bias.shape());
    }
  }
  return v;
}

namespace {

void sgd_update(Tensor& w, const Tensor& g, Tensor& v, double lr, double momentum) {
  if (w.empty() && g.empty()) return;
  if (!w.same_shape(g) || !w.same_shape(v)) {
    throw ShapeError("sgd_step: gradient " + g.shape_str() + " does not match parameter " +
                     w.shape_str());
  }
  for (size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

}  // namespace

void sgd_step(Model& m, const ModelGrads& grads, const TrainConfig& cfg, Velocity& vel) {
  cfg.validate();
  if (grads.layers.size() != m.layers.size() || vel.layers.size() != m.layers.size()) {
    throw ShapeError("sgd_step: gradient/velocity layer count does not match the model");
  }
  for (size_t i = 0; i < m.layers.size(); ++i) {
    LayerState& st = m.layers[i];
    const auto& g = grads.layers[i];
    auto& v = vel.layers[i];
    if (st.has_params()) {
      sgd_update(st.params.weights, g.d_weights, v.v_weights, cfg.learning_rate, cfg.momentum);
      sgd_update(st.params.bias, g.d_bias, v.v_bias, cfg.learning_rate, cfg.momentum);
    }
    if (st.has_projection()) {
      sgd_update(st.proj.weights, g.d_proj_weights, v.v_proj_weights, cfg.learning_rate,
                 cfg.momentum);
      sgd_update(st.proj.bias, g.d_proj_bias, v.v_proj_bias, cfg.learning_rate, cfg.momentum);
    }
  }
}

EvalResult evaluate(const Model& m, const Dataset& ds) {
  if (ds.size() == 0) throw Error("evaluate: empty dataset");
  ds.validate();

  const size_t chunk = 256;
  size_t correct = 0;
  double loss_sum = 0.0;
  for (size_t start = 0; start < ds.size(); start += chunk) {
    const size_t stop = std::min(ds.size(), start + chunk);
    std::vector<size_t> idx(stop - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Tensor logits = forward(m, ds.gather(idx));
    const size_t K = logits.extent(1);

    std::vector<int> labels(ds.labels.begin() + static_cast<long>(start),
                            ds.labels.begin() + static_cast<long>(stop));
    loss_sum += softmax_xent(logits, labels).loss * static_cast<double>(idx.size());

    for (size_t b = 0; b < idx.size(); ++b) {
      size_t best = 0;
      for (size_t k = 1; k < K; ++k) {
        if (logits.at2(b, k) > logits.at2(b, best)) best = k;  // ties keep the lowest index
      }
      if (static_cast<int>(best) == labels[b]) ++correct;
    }
  }
  return EvalResult{static_cast<double>(correct) / static_cast<double>(ds.size()),
                    loss_sum / static_cast<double>(ds.size())};
}

namespace {

Tensor one_hot(const std::vector<int>& labels, size_t k) {
  Tensor t({labels.size(), k});
  for (size_t b = 0; b < labels.size(); ++b) t.at2(b, static_cast<size_t>(labels[b])) = 1.0;
  return t;
}

}  // namespace

TrainReport train(Model& m, const Dataset& train_set, const Dataset* test,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0) throw Error("train: empty dataset");
  train_set.validate();

  const uint64_t mask_fingerprint = polarity_hash(m);
  Velocity vel = Velocity::zeros_like(m);
  Rng shuffle_rng = Rng(cfg.seed).fork(0x5f1e);
  TrainReport report;

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates with the seeded stream; std::shuffle is not pinned by the
    // standard and would break run-to-run determinism guarantees.
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = shuffle_rng.below(i);
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<size_t> idx(order.begin() + static_cast<long>(start),
                              order.begin() + static_cast<long>(stop));
      std::vector<int> labels(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[idx[i]];

      ForwardCache cache;
      const Tensor logits = forward(m, train_set.gather(idx), &cache);

      LossGrad lg;
      try {
        lg = cfg.loss == LossKind::softmax_cross_entropy
                 ? softmax_xent(logits, labels)
                 : mse_loss(logits, one_hot(labels, logits.extent(1)));
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch + 1) + ", batch at sample " +
                    std::to_string(start) + ": " + e.what());
      }
      loss_sum += lg.loss * static_cast<double>(idx.size());

      const ModelGrads grads = backward(m, cache, lg.d_logits);
      sgd_step(m, grads, cfg, vel);
    }

    report.train_loss.push_back(loss_sum / static_cast<double>(train_set.size()));
    report.test_accuracy.push_back(evaluate(m, test != nullptr ? *test : train_set).accuracy);
    report.wall_time_s.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  if (polarity_hash(m) != mask_fingerprint) {
    throw InvariantError("polarity mask changed during training");
  }
  report.final_param_hash = param_hash(m);
  return report;
}

}  // namespace tnet
