#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tnet/network.hpp"
#include "tnet/tensor.hpp"

namespace tnet {

struct Dataset {
  Tensor samples;           // [B, ...]
  std::vector<int> labels;  // class indices in [0, class_count)
  std::string name;
  int class_count = 0;
  uint64_t split_seed = 0;
  size_t dropped_windows = 0;  // CSV windows discarded at a label boundary

  size_t size() const { return labels.size(); }
  void validate() const;
  // Gathers the listed samples into a new batch tensor.
  Tensor gather(const std::vector<size_t>& indices) const;
};

// Standard IDX containers (big-endian): magic 0x00000803 for images,
// 0x00000801 for labels. Pixels are scaled to [0, 1]; images come out as
// [B, 1, rows, cols].
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// Writes a dataset back out as an IDX pair (pixels rounded to bytes).
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Cuts a CSV (with header row) into non-overlapping windows of window_len
// rows. Each sample is [channels, window_len]; a window whose rows disagree on
// the label is dropped and counted. Labels are remapped to dense indices in
// sorted order of the distinct raw values.
Dataset load_csv_windows(const std::string& path, size_t window_len,
                         const std::vector<std::string>& channel_columns,
                         const std::string& label_column);

// XOR corners {(+-1, +-1)} with parity labels and Gaussian jitter.
Dataset synth_xor(int n_per_corner, double noise_std, uint64_t seed);
// Two Gaussian blobs at (+-separation/2, 0).
Dataset synth_blobs(int n_per_class, double separation, double noise_std, uint64_t seed);

// Deterministic shuffled split; same (dataset, seed) gives the same parts.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double test_fraction, uint64_t seed);

// Per-channel standardization. Fit on the training split only; a constant
// channel standardizes to zeros (stddev sentinel 1.0).
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool empty() const { return mean.empty(); }
};
ChannelStats standardize_fit(const Dataset& train);
Dataset standardize_apply(const Dataset& ds, const ChannelStats& stats);

// Checkpoint container: "TNET" magic, u32 version, u64 header length, JSON
// header (network spec, seed, tensor/mask manifest, optional channel stats),
// little-endian payload, trailing CRC32 of the payload. Round trips are
// byte-identical.
void save_checkpoint(const Model& m, const std::string& path,
                     const ChannelStats* stats = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::optional<ChannelStats> stats;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace tnet
