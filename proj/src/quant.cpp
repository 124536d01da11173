#include "tnet/quant.hpp"

#include <algorithm>
#include <cmath>

#include "tnet/error.hpp"
#include "tnet/network.hpp"

namespace tnet {

QuantizedTensor quantize(const Tensor& w) {
  for (double v : w.values()) {
    if (!std::isfinite(v)) throw InvariantError("quantize: non-finite weight");
  }
  double max_abs = 0.0;
  for (double v : w.values()) max_abs = std::max(max_abs, std::fabs(v));

  QuantizedTensor q;
  q.shape = w.shape();
  q.scale = max_abs > 0.0 ? max_abs / 127.0 : 1.0;
  q.values.resize(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    const double r = std::round(w[i] / q.scale);  // half away from zero
    q.values[i] = static_cast<int8_t>(std::clamp(r, -127.0, 127.0));
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor t(q.shape);
  for (size_t i = 0; i < q.values.size(); ++i) {
    t[i] = static_cast<double>(q.values[i]) * q.scale;
  }
  return t;
}

Model quantize_model(const Model& m) {
  Model out = m;
  for (auto& st : out.layers) {
    if (st.has_params()) {
      st.q_weights = quantize(st.params.weights);
      st.params.weights = dequantize(*st.q_weights);
    }
    if (st.has_projection()) {
      st.q_proj_weights = quantize(st.proj.weights);
      st.proj.weights = dequantize(*st.q_proj_weights);
    }
  }
  return out;
}

bool is_quantized(const Model& m) {
  bool any_weights = false;
  for (const auto& st : m.layers) {
    if (st.has_params()) {
      any_weights = true;
      if (!st.q_weights.has_value()) return false;
    }
    if (st.has_projection()) {
      any_weights = true;
      if (!st.q_proj_weights.has_value()) return false;
    }
  }
  return any_weights;
}

Tensor quantized_forward(const Model& m, const Tensor& x) {
  Model deq = m;
  for (size_t i = 0; i < deq.layers.size(); ++i) {
    LayerState& st = deq.layers[i];
    if (st.has_params()) {
      if (!st.q_weights.has_value()) {
        throw InvariantError("quantized_forward: layer id " +
                             std::to_string(m.spec.layers[i].id) + " has no quantized weights");
      }
      st.params.weights = dequantize(*st.q_weights);
    }
    if (st.has_projection()) {
      if (!st.q_proj_weights.has_value()) {
        throw InvariantError("quantized_forward: layer id " +
                             std::to_string(m.spec.layers[i].id) +
                             " has no quantized projection weights");
      }
      st.proj.weights = dequantize(*st.q_proj_weights);
    }
  }
  return forward(deq, x);
}

namespace {

template <typename Fn>
void for_each_weight(const Model& m, Fn&& fn) {
  for (const auto& st : m.layers) {
    if (st.has_params()) {
      for (double v : st.params.weights.values()) fn(v);
    }
    if (st.has_projection()) {
      for (double v : st.proj.weights.values()) fn(v);
    }
  }
}

}  // namespace

WeightHistogram weight_histogram(const Model& m, int bins) {
  if (bins < 1) throw InvariantError("weight_histogram: bin count must be >= 1");
  WeightHistogram h;
  h.counts.assign(static_cast<size_t>(bins), 0);

  size_t count = 0;
  double lo = 0.0, hi = 0.0;
  for_each_weight(m, [&](double v) {
    if (count == 0) {
      lo = hi = v;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    ++count;
  });
  if (count == 0) return h;
  if (hi <= lo) hi = lo + 1.0;  // degenerate range
  h.lo = lo;
  h.hi = hi;

  const double width = (hi - lo) / static_cast<double>(bins);
  for_each_weight(m, [&](double v) {
    auto bin = static_cast<long>((v - lo) / width);
    bin = std::clamp(bin, 0L, static_cast<long>(bins - 1));
    ++h.counts[static_cast<size_t>(bin)];
  });
  return h;
}

double weight_excess_kurtosis(const Model& m) {
  size_t n = 0;
  double mean = 0.0;
  for_each_weight(m, [&](double v) {
    ++n;
    mean += v;
  });
  if (n < 4) throw Error("weight_excess_kurtosis: needs at least 4 weights");
  mean /= static_cast<double>(n);

  double m2 = 0.0, m4 = 0.0;
  for_each_weight(m, [&](double v) {
    const double d = v - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  });
  m2 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  if (m2 <= 0.0) throw Error("weight_excess_kurtosis: degenerate (constant) weights");
  return m4 / (m2 * m2) - 3.0;
}

}  // namespace tnet
