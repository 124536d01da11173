#include "tnet/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "tnet/digest.hpp"
#include "tnet/error.hpp"
#include "tnet/rng.hpp"

namespace tnet {

using nlohmann::json;

void Dataset::validate() const {
  if (samples.rank() < 2) {
    throw ShapeError("dataset samples must be batched, got " + samples.shape_str());
  }
  if (samples.extent(0) != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(samples.extent(0)) + " samples but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (class_count < 1) throw InvariantError("dataset class count must be >= 1");
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw InvariantError("label " + std::to_string(y) + " outside [0, " +
                           std::to_string(class_count) + ")");
    }
  }
}

Tensor Dataset::gather(const std::vector<size_t>& indices) const {
  const size_t B = samples.extent(0);
  const size_t row = samples.size() / B;
  std::vector<size_t> shape = samples.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= B) throw InvariantError("gather index out of range");
    std::memcpy(out.data() + i * row, samples.data() + indices[i] * row, row * sizeof(double));
  }
  return out;
}

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

uint32_t read_u32_be(const std::vector<uint8_t>& b, size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError("'" + path + "' is truncated");
  return (static_cast<uint32_t>(b[off]) << 24) | (static_cast<uint32_t>(b[off + 1]) << 16) |
         (static_cast<uint32_t>(b[off + 2]) << 8) | static_cast<uint32_t>(b[off + 3]);
}

void write_u32_be(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(static_cast<uint8_t>(v >> 24));
  b.push_back(static_cast<uint8_t>(v >> 16));
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v));
}

char hex_digit(uint32_t v) { return "0123456789abcdef"[v & 0xF]; }

std::string hex32(uint32_t v) {
  std::string s = "0x";
  for (int i = 7; i >= 0; --i) s += hex_digit(v >> (4 * i));
  return s;
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<uint8_t> img = read_file(images_path);
  const std::vector<uint8_t> lab = read_file(labels_path);

  const uint32_t img_magic = read_u32_be(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    throw FormatError("'" + images_path + "': bad IDX image magic " + hex32(img_magic) +
                      " (expected 0x00000803)");
  }
  const uint32_t lab_magic = read_u32_be(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    throw FormatError("'" + labels_path + "': bad IDX label magic " + hex32(lab_magic) +
                      " (expected 0x00000801)");
  }

  const uint32_t n_img = read_u32_be(img, 4, images_path);
  const uint32_t rows = read_u32_be(img, 8, images_path);
  const uint32_t cols = read_u32_be(img, 12, images_path);
  const uint32_t n_lab = read_u32_be(lab, 4, labels_path);
  if (n_img != n_lab) {
    throw FormatError("IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                      std::to_string(n_lab) + " labels");
  }
  if (n_img == 0 || rows == 0 || cols == 0) {
    throw FormatError("'" + images_path + "': empty IDX container");
  }
  const size_t pixels = static_cast<size_t>(n_img) * rows * cols;
  if (img.size() != 16 + pixels) {
    throw FormatError("'" + images_path + "': expected " + std::to_string(16 + pixels) +
                      " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + n_lab) {
    throw FormatError("'" + labels_path + "': expected " + std::to_string(8 + n_lab) +
                      " bytes, found " + std::to_string(lab.size()));
  }

  Dataset ds;
  ds.name = "mnist-idx";
  ds.class_count = 10;
  ds.samples = Tensor({n_img, 1, rows, cols});
  for (size_t i = 0; i < pixels; ++i) {
    ds.samples[i] = static_cast<double>(img[16 + i]) / 255.0;
  }
  ds.labels.resize(n_lab);
  for (size_t i = 0; i < n_lab; ++i) {
    ds.labels[i] = static_cast<int>(lab[8 + i]);
    if (ds.labels[i] > 9) {
      throw FormatError("'" + labels_path + "': label byte " + std::to_string(ds.labels[i]) +
                        " out of range");
    }
  }
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  if (ds.samples.rank() != 4 || ds.samples.extent(1) != 1) {
    throw ShapeError("write_idx expects samples [B, 1, rows, cols], got " +
                     ds.samples.shape_str());
  }
  const auto B = static_cast<uint32_t>(ds.samples.extent(0));
  const auto rows = static_cast<uint32_t>(ds.samples.extent(2));
  const auto cols = static_cast<uint32_t>(ds.samples.extent(3));

  std::vector<uint8_t> img;
  img.reserve(16 + ds.samples.size());
  write_u32_be(img, 0x00000803u);
  write_u32_be(img, B);
  write_u32_be(img, rows);
  write_u32_be(img, cols);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const double v = std::clamp(ds.samples[i], 0.0, 1.0);
    img.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
  }

  std::vector<uint8_t> lab;
  lab.reserve(8 + B);
  write_u32_be(lab, 0x00000801u);
  write_u32_be(lab, B);
  for (int y : ds.labels) lab.push_back(static_cast<uint8_t>(y));

  std::ofstream fi(images_path, std::ios::binary);
  if (!fi || !fi.write(reinterpret_cast<const char*>(img.data()), static_cast<long>(img.size()))) {
    throw IoError("cannot write '" + images_path + "'");
  }
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl || !fl.write(reinterpret_cast<const char*>(lab.data()), static_cast<long>(lab.size()))) {
    throw IoError("cannot write '" + labels_path + "'");
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

Dataset load_csv_windows(const std::string& path, size_t window_len,
                         const std::vector<std::string>& channel_columns,
                         const std::string& label_column) {
  if (window_len < 1) throw InvariantError("window length must be >= 1");
  if (channel_columns.empty()) throw InvariantError("need at least one channel column");

  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path + "': missing header row");
  const std::vector<std::string> header = split_csv_line(line);
  std::map<std::string, size_t> col_index;
  for (size_t i = 0; i < header.size(); ++i) col_index[header[i]] = i;

  std::vector<size_t> channel_idx;
  for (const auto& name : channel_columns) {
    auto it = col_index.find(name);
    if (it == col_index.end()) {
      throw FormatError("'" + path + "': no column named '" + name + "'");
    }
    channel_idx.push_back(it->second);
  }
  auto lit = col_index.find(label_column);
  if (lit == col_index.end()) {
    throw FormatError("'" + path + "': no label column named '" + label_column + "'");
  }
  const size_t label_idx = lit->second;

  std::vector<std::vector<double>> rows;  // channel values per row
  std::vector<long> row_labels;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields, found " +
                        std::to_string(fields.size()));
    }
    std::vector<double> vals(channel_idx.size());
    for (size_t c = 0; c < channel_idx.size(); ++c) {
      try {
        size_t used = 0;
        vals[c] = std::stod(fields[channel_idx[c]], &used);
        if (used != fields[channel_idx[c]].size()) throw std::invalid_argument("trailing junk");
      } catch (const std::exception&) {
        throw FormatError("'" + path + "' line " + std::to_string(line_no) +
                          ": non-numeric value '" + fields[channel_idx[c]] + "' in column '" +
                          channel_columns[c] + "'");
      }
    }
    long y = 0;
    try {
      size_t used = 0;
      y = std::stol(fields[label_idx], &used);
      if (used != fields[label_idx].size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw FormatError("'" + path + "' line " + std::to_string(line_no) +
                        ": non-integer label '" + fields[label_idx] + "'");
    }
    rows.push_back(std::move(vals));
    row_labels.push_back(y);
  }

  const size_t n_channels = channel_idx.size();
  std::vector<std::vector<double>> windows;
  std::vector<long> window_labels;
  size_t dropped = 0;
  for (size_t start = 0; start + window_len <= rows.size(); start += window_len) {
    bool uniform = true;
    for (size_t t = 1; t < window_len; ++t) {
      if (row_labels[start + t] != row_labels[start]) {
        uniform = false;
        break;
      }
    }
    if (!uniform) {
      ++dropped;
      continue;
    }
    std::vector<double> sample(n_channels * window_len);
    for (size_t c = 0; c < n_channels; ++c) {
      for (size_t t = 0; t < window_len; ++t) sample[c * window_len + t] = rows[start + t][c];
    }
    windows.push_back(std::move(sample));
    window_labels.push_back(row_labels[start]);
  }
  if (windows.empty()) {
    throw FormatError("'" + path + "': no usable windows (" + std::to_string(dropped) +
                      " dropped at label boundaries)");
  }

  std::vector<long> distinct = window_labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::map<long, int> remap;
  for (size_t i = 0; i < distinct.size(); ++i) remap[distinct[i]] = static_cast<int>(i);

  Dataset ds;
  ds.name = "csv-windows";
  ds.class_count = static_cast<int>(distinct.size());
  ds.dropped_windows = dropped;
  ds.samples = Tensor({windows.size(), n_channels, window_len});
  for (size_t b = 0; b < windows.size(); ++b) {
    std::memcpy(ds.samples.data() + b * n_channels * window_len, windows[b].data(),
                n_channels * window_len * sizeof(double));
    ds.labels.push_back(remap[window_labels[b]]);
  }
  return ds;
}

Dataset synth_xor(int n_per_corner, double noise_std, uint64_t seed) {
  if (n_per_corner < 1) throw InvariantError("synth_xor: n_per_corner must be >= 1");
  if (noise_std < 0.0) throw InvariantError("synth_xor: noise_std must be >= 0");
  Rng rng(seed);
  const double cx[4] = {1.0, 1.0, -1.0, -1.0};
  const double cy[4] = {1.0, -1.0, 1.0, -1.0};
  const int parity[4] = {0, 1, 1, 0};

  Dataset ds;
  ds.name = "synth-xor";
  ds.class_count = 2;
  const size_t n = static_cast<size_t>(n_per_corner) * 4;
  ds.samples = Tensor({n, 2});
  size_t row = 0;
  for (int rep = 0; rep < n_per_corner; ++rep) {
    for (int c = 0; c < 4; ++c, ++row) {
      ds.samples.at2(row, 0) = cx[c] + noise_std * rng.normal();
      ds.samples.at2(row, 1) = cy[c] + noise_std * rng.normal();
      ds.labels.push_back(parity[c]);
    }
  }
  return ds;
}

Dataset synth_blobs(int n_per_class, double separation, double noise_std, uint64_t seed) {
  if (n_per_class < 1) throw InvariantError("synth_blobs: n_per_class must be >= 1");
  if (noise_std < 0.0) throw InvariantError("synth_blobs: noise_std must be >= 0");
  Rng rng(seed);
  Dataset ds;
  ds.name = "synth-blobs";
  ds.class_count = 2;
  const size_t n = static_cast<size_t>(n_per_class) * 2;
  ds.samples = Tensor({n, 2});
  size_t row = 0;
  for (int rep = 0; rep < n_per_class; ++rep) {
    for (int cls = 0; cls < 2; ++cls, ++row) {
      const double cx = (cls == 0 ? -0.5 : 0.5) * separation;
      ds.samples.at2(row, 0) = cx + noise_std * rng.normal();
      ds.samples.at2(row, 1) = noise_std * rng.normal();
      ds.labels.push_back(cls);
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double test_fraction, uint64_t seed) {
  ds.validate();
  if (test_fraction < 0.0 || test_fraction >= 1.0) {
    throw InvariantError("test fraction must be in [0, 1)");
  }
  std::vector<size_t> order(ds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const size_t n_test = static_cast<size_t>(std::llround(test_fraction * static_cast<double>(ds.size())));
  std::vector<size_t> test_idx(order.begin(), order.begin() + static_cast<long>(n_test));
  std::vector<size_t> train_idx(order.begin() + static_cast<long>(n_test), order.end());

  auto subset = [&](const std::vector<size_t>& idx, const char* suffix) {
    Dataset out;
    out.name = ds.name + suffix;
    out.class_count = ds.class_count;
    out.split_seed = seed;
    out.samples = idx.empty() ? Tensor() : ds.gather(idx);
    for (size_t i : idx) out.labels.push_back(ds.labels[i]);
    return out;
  };
  return {subset(train_idx, "/train"), subset(test_idx, "/test")};
}

ChannelStats standardize_fit(const Dataset& train) {
  train.validate();
  const size_t B = train.samples.extent(0);
  const size_t C = train.samples.rank() >= 2 ? train.samples.extent(1) : 1;
  const size_t inner = train.samples.size() / (B * C);

  ChannelStats stats;
  stats.mean.assign(C, 0.0);
  stats.stddev.assign(C, 1.0);
  for (size_t c = 0; c < C; ++c) {
    double sum = 0.0, sum2 = 0.0;
    for (size_t b = 0; b < B; ++b) {
      const double* p = train.samples.data() + (b * C + c) * inner;
      for (size_t i = 0; i < inner; ++i) {
        sum += p[i];
        sum2 += p[i] * p[i];
      }
    }
    const double n = static_cast<double>(B * inner);
    const double mean = sum / n;
    const double var = std::max(0.0, sum2 / n - mean * mean);
    stats.mean[c] = mean;
    stats.stddev[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

Dataset standardize_apply(const Dataset& ds, const ChannelStats& stats) {
  ds.validate();
  const size_t B = ds.samples.extent(0);
  const size_t C = ds.samples.extent(1);
  if (stats.mean.size() != C || stats.stddev.size() != C) {
    throw ShapeError("channel stats for " + std::to_string(stats.mean.size()) +
                     " channels applied to " + std::to_string(C) + "-channel data");
  }
  const size_t inner = ds.samples.size() / (B * C);
  Dataset out = ds;
  for (size_t b = 0; b < B; ++b) {
    for (size_t c = 0; c < C; ++c) {
      double* p = out.samples.data() + (b * C + c) * inner;
      for (size_t i = 0; i < inner; ++i) p[i] = (p[i] - stats.mean[c]) / stats.stddev[c];
    }
  }
  return out;
}

// ---- checkpoint container ---------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kMagic[4] = {'T', 'N', 'E', 'T'};

void put_u32_le(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64_le(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32_le(const std::vector<uint8_t>& b, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[off + i]) << (8 * i);
  return v;
}

uint64_t get_u64_le(const std::vector<uint8_t>& b, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[off + i]) << (8 * i);
  return v;
}

void put_f64_le(std::vector<uint8_t>& b, double v) {
  uint64_t u = 0;
  std::memcpy(&u, &v, sizeof(u));
  put_u64_le(b, u);
}

double get_f64_le(const std::vector<uint8_t>& b, size_t off) {
  const uint64_t u = get_u64_le(b, off);
  double v = 0.0;
  std::memcpy(&v, &u, sizeof(v));
  return v;
}

struct TensorEntry {
  std::string name;
  std::string dtype;  // "f64" or "i8"
  std::vector<size_t> shape;
  size_t offset = 0;
  size_t bytes = 0;
  double scale = 0.0;  // i8 only
};

struct MaskEntry {
  std::string name;
  size_t bits = 0;
  size_t offset = 0;
  size_t bytes = 0;
};

void append_tensor(std::vector<uint8_t>& payload, std::vector<TensorEntry>& manifest,
                   const std::string& name, const Tensor& t,
                   const QuantizedTensor* q) {
  TensorEntry e;
  e.name = name;
  e.offset = payload.size();
  if (q != nullptr) {
    e.dtype = "i8";
    e.shape = q->shape;
    e.scale = q->scale;
    e.bytes = q->values.size();
    for (int8_t v : q->values) payload.push_back(static_cast<uint8_t>(v));
  } else {
    e.dtype = "f64";
    e.shape = t.shape();
    e.bytes = t.size() * 8;
    for (double v : t.values()) put_f64_le(payload, v);
  }
  manifest.push_back(std::move(e));
}

void append_mask(std::vector<uint8_t>& payload, std::vector<MaskEntry>& manifest,
                 const std::string& name, const PolarityMask& mask) {
  MaskEntry e;
  e.name = name;
  e.bits = mask.size();
  e.offset = payload.size();
  const std::vector<uint8_t> packed = mask.packed();
  e.bytes = packed.size();
  payload.insert(payload.end(), packed.begin(), packed.end());
  manifest.push_back(std::move(e));
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path, const ChannelStats* stats) {
  m.spec.validate();
  if (m.layers.size() != m.spec.layers.size()) {
    throw InvariantError("model parameter table does not match spec layer count");
  }
  for (const auto& st : m.layers) {
    st.params.validate_finite();
    st.proj.validate_finite();
  }

  std::vector<uint8_t> payload;
  std::vector<TensorEntry> tensors;
  std::vector<MaskEntry> masks;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const LayerState& st = m.layers[i];
    const std::string prefix = "layer" + std::to_string(m.spec.layers[i].id);
    if (st.has_params()) {
      append_tensor(payload, tensors, prefix + ".weights", st.params.weights,
                    st.q_weights.has_value() ? &*st.q_weights : nullptr);
      append_tensor(payload, tensors, prefix + ".bias", st.params.bias, nullptr);
    }
    if (!st.mask.empty()) append_mask(payload, masks, prefix + ".polarity", st.mask);
    if (st.has_projection()) {
      append_tensor(payload, tensors, prefix + ".proj_weights", st.proj.weights,
                    st.q_proj_weights.has_value() ? &*st.q_proj_weights : nullptr);
      append_tensor(payload, tensors, prefix + ".proj_bias", st.proj.bias, nullptr);
    }
    if (!st.proj_mask.empty()) append_mask(payload, masks, prefix + ".proj_polarity", st.proj_mask);
  }

  json jt = json::array();
  for (const auto& e : tensors) {
    json je{{"name", e.name},
            {"dtype", e.dtype},
            {"shape", e.shape},
            {"offset", e.offset},
            {"bytes", e.bytes}};
    if (e.dtype == "i8") je["scale"] = e.scale;
    jt.push_back(std::move(je));
  }
  json jm = json::array();
  for (const auto& e : masks) {
    jm.push_back(
        json{{"name", e.name}, {"bits", e.bits}, {"offset", e.offset}, {"bytes", e.bytes}});
  }
  json header{{"network", json::parse(spec_to_json(m.spec))},
              {"seed", m.seed},
              {"init_scheme", "normal(0, 2/fan_in)"},
              {"tensors", jt},
              {"masks", jm}};
  if (stats != nullptr && !stats->empty()) {
    header["channel_stats"] = json{{"mean", stats->mean}, {"stddev", stats->stddev}};
  }
  const std::string header_text = header.dump();

  std::vector<uint8_t> file;
  file.insert(file.end(), kMagic, kMagic + 4);
  put_u32_le(file, kCheckpointVersion);
  put_u64_le(file, header_text.size());
  file.insert(file.end(), header_text.begin(), header_text.end());
  file.insert(file.end(), payload.begin(), payload.end());
  put_u32_le(file, crc32(payload.data(), payload.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out ||
      !out.write(reinterpret_cast<const char*>(file.data()), static_cast<long>(file.size()))) {
    throw IoError("cannot write checkpoint '" + path + "'");
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::vector<uint8_t> file = read_file(path);
  if (file.size() < 16 || std::memcmp(file.data(), kMagic, 4) != 0) {
    throw FormatError("'" + path + "' is not a TNET checkpoint");
  }
  const uint32_t version = get_u32_le(file, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path + "': unsupported checkpoint version " +
                      std::to_string(version) + " (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const uint64_t header_len = get_u64_le(file, 8);
  if (header_len > file.size() || 16 + header_len + 4 > file.size()) {
    throw FormatError("'" + path + "': truncated checkpoint header");
  }
  const size_t payload_off = 16 + header_len;
  const size_t payload_len = file.size() - payload_off - 4;
  const uint32_t want_crc = get_u32_le(file, payload_off + payload_len);
  const uint32_t have_crc = crc32(file.data() + payload_off, payload_len);
  if (want_crc != have_crc) {
    throw FormatError("'" + path + "': payload checksum mismatch (stored " + hex32(want_crc) +
                      ", computed " + hex32(have_crc) + ")");
  }

  json header;
  try {
    header = json::parse(file.begin() + 16, file.begin() + static_cast<long>(payload_off));
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': bad checkpoint header: " + e.what());
  }

  LoadedCheckpoint loaded;
  Model& m = loaded.model;
  try {
    m.spec = spec_from_json(header.at("network").dump());
    m.seed = header.at("seed").get<uint64_t>();
    if (header.contains("channel_stats")) {
      ChannelStats st;
      st.mean = header["channel_stats"].at("mean").get<std::vector<double>>();
      st.stddev = header["channel_stats"].at("stddev").get<std::vector<double>>();
      loaded.stats = std::move(st);
    }
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': bad checkpoint header: " + e.what());
  }

  std::map<std::string, TensorEntry> tensors;
  std::map<std::string, MaskEntry> masks;
  try {
    for (const auto& je : header.at("tensors")) {
      TensorEntry e;
      e.name = je.at("name").get<std::string>();
      e.dtype = je.at("dtype").get<std::string>();
      e.shape = je.at("shape").get<std::vector<size_t>>();
      e.offset = je.at("offset").get<size_t>();
      e.bytes = je.at("bytes").get<size_t>();
      if (e.dtype == "i8") e.scale = je.at("scale").get<double>();
      tensors[e.name] = std::move(e);
    }
    for (const auto& je : header.at("masks")) {
      MaskEntry e;
      e.name = je.at("name").get<std::string>();
      e.bits = je.at("bits").get<size_t>();
      e.offset = je.at("offset").get<size_t>();
      e.bytes = je.at("bytes").get<size_t>();
      masks[e.name] = std::move(e);
    }
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "': bad checkpoint manifest: " + e.what());
  }

  auto tensor_at = [&](const std::string& name, Tensor& out, std::optional<QuantizedTensor>* q) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw FormatError("'" + path + "': checkpoint is missing tensor '" + name + "'");
    }
    const TensorEntry& e = it->second;
    if (e.offset + e.bytes > payload_len) {
      throw FormatError("'" + path + "': tensor '" + name + "' overruns the payload");
    }
    const size_t n = shape_product(e.shape);
    if (e.dtype == "f64") {
      if (e.bytes != n * 8) {
        throw FormatError("'" + path + "': tensor '" + name + "' has inconsistent byte count");
      }
      std::vector<double> vals(n);
      for (size_t i = 0; i < n; ++i) vals[i] = get_f64_le(file, payload_off + e.offset + i * 8);
      out = Tensor(e.shape, std::move(vals));
    } else if (e.dtype == "i8") {
      if (e.bytes != n) {
        throw FormatError("'" + path + "': tensor '" + name + "' has inconsistent byte count");
      }
      QuantizedTensor qt;
      qt.shape = e.shape;
      qt.scale = e.scale;
      qt.values.resize(n);
      for (size_t i = 0; i < n; ++i) {
        qt.values[i] = static_cast<int8_t>(file[payload_off + e.offset + i]);
      }
      out = dequantize(qt);
      if (q != nullptr) *q = std::move(qt);
    } else {
      throw FormatError("'" + path + "': tensor '" + name + "' has unknown dtype '" + e.dtype +
                        "'");
    }
  };
  auto mask_at = [&](const std::string& name, PolarityMask& out) {
    auto it = masks.find(name);
    if (it == masks.end()) {
      throw FormatError("'" + path + "': checkpoint is missing polarity mask '" + name + "'");
    }
    const MaskEntry& e = it->second;
    if (e.offset + e.bytes > payload_len) {
      throw FormatError("'" + path + "': mask '" + name + "' overruns the payload");
    }
    std::vector<uint8_t> packed(file.begin() + static_cast<long>(payload_off + e.offset),
                                file.begin() + static_cast<long>(payload_off + e.offset + e.bytes));
    out = PolarityMask::from_packed(packed, e.bits);
  };

  m.layers.resize(m.spec.layers.size());
  for (size_t i = 0; i < m.spec.layers.size(); ++i) {
    const LayerSpec& l = m.spec.layers[i];
    LayerState& st = m.layers[i];
    const std::string prefix = "layer" + std::to_string(l.id);
    if (is_conv_kind(l.kind) || is_linear_kind(l.kind)) {
      tensor_at(prefix + ".weights", st.params.weights, &st.q_weights);
      tensor_at(prefix + ".bias", st.params.bias, nullptr);
      if (is_threshold_kind(l.kind)) mask_at(prefix + ".polarity", st.mask);
    }
    if (l.kind == LayerKind::residual_add && l.projection.has_value()) {
      tensor_at(prefix + ".proj_weights", st.proj.weights, &st.q_proj_weights);
      tensor_at(prefix + ".proj_bias", st.proj.bias, nullptr);
      mask_at(prefix + ".proj_polarity", st.proj_mask);
    }
  }

  // Cross-check loaded shapes against the spec before handing the model out.
  for (size_t i = 0; i < m.spec.layers.size(); ++i) {
    const LayerSpec& l = m.spec.layers[i];
    const LayerState& st = m.layers[i];
    if (is_conv_kind(l.kind)) {
      const std::vector<size_t> want{
          static_cast<size_t>(l.geom.out_channels), static_cast<size_t>(l.geom.in_channels),
          static_cast<size_t>(l.geom.kernel_size), static_cast<size_t>(l.geom.kernel_size)};
      if (st.params.weights.shape() != want) {
        throw FormatError("'" + path + "': layer id " + std::to_string(l.id) +
                          " weight shape does not match its geometry");
      }
    }
    if (is_linear_kind(l.kind)) {
      const std::vector<size_t> want{static_cast<size_t>(l.out_features),
                                     static_cast<size_t>(l.in_features)};
      if (st.params.weights.shape() != want) {
        throw FormatError("'" + path + "': layer id " + std::to_string(l.id) +
                          " weight shape does not match its feature counts");
      }
    }
    if (is_threshold_kind(l.kind) && st.mask.size() != st.params.bias.size()) {
      throw FormatError("'" + path + "': layer id " + std::to_string(l.id) +
                        " polarity mask size does not match its unit count");
    }
  }
  return loaded;
}

}  // namespace tnet
