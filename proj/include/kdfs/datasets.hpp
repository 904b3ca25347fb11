// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_DATASETS_HPP
#define KDFS_DATASETS_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kdfs/random.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

/// Images stored as 8-bit NCHW and normalized to floats at batch time.
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::vector<float> mean;  // per channel, in [0,1] pixel units
  std::vector<float> std;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * height * width; }
  /// Throws DataError when counts or labels are inconsistent.
  void validate() const;
};

/// Parses MNIST-style IDX files. Labels must be below `classes`.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  std::size_t classes = 10);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 10);

/// Parses concatenated CIFAR-10 records (1 label byte + 3072 image bytes).
Dataset parse_cifar_records(std::span<const std::uint8_t> bytes);
/// Loads data_batch_1..5.bin (train) or test_batch.bin from `dir`.
Dataset load_cifar_binary(const std::filesystem::path& dir, bool train = true);

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t size = 16;
  std::size_t channels = 1;
  double noise = 0.15;  // pixel noise std, in [0,1] units
  std::uint64_t seed = 0;
};

/// Class-dependent bars, squares and diagonals at class-dependent positions,
/// jittered by up to one pixel, plus seeded Gaussian pixel noise.
Dataset synthetic(const SyntheticSpec& spec);

/// Sets per-channel mean and std from the dataset's own pixels.
void compute_normalization(Dataset& ds);

/// Index batches covering 0..n-1 once. The last partial batch is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              bool shuffle);

/// Random translation by up to `max_shift` pixels per axis (zero fill) and
/// optional horizontal flip.
struct Augmentation {
  int max_shift = 0;
  bool flip = false;

  bool enabled() const { return max_shift > 0 || flip; }
};

/// Normalized [B,C,H,W] batch. When `rng` is given, each image is augmented
/// as described by `augment`.
Tensor<float> make_batch(const Dataset& ds, std::span<const std::size_t> indices, std::vector<int>* labels,
                         Rng* rng = nullptr, const Augmentation& augment = {4, true});

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

}  // namespace kdfs

#endif  // KDFS_DATASETS_HPP
