// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_CONFIG_HPP
#define KDFS_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "kdfs/datasets.hpp"
#include "kdfs/nn.hpp"
#include "kdfs/trainer.hpp"

namespace kdfs {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | mnist | cifar
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::string cifar_dir;
  std::size_t limit_train = 0;  // 0 keeps every sample
  std::size_t limit_test = 0;
  SyntheticSpec synthetic;
  std::size_t synthetic_test_per_class = 20;
};

struct TeacherConfig {
  int epochs = 30;
  double lr = 1e-2;
  double lr_min = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  Augmentation augment;  // independent of [train]
};

/// Everything one experiment needs. Every field has a default, so an empty
/// file is a valid configuration.
struct RunConfig {
  std::vector<int> widths{16, 32, 64};
  std::vector<int> blocks{1, 1, 1};
  DataConfig data;
  TeacherConfig teacher;
  TrainConfig train;
  std::string out;

  /// "KDFS-0.5" style name derived from the compression rate.
  std::string run_name() const;
  void validate() const;
};

/// Parses INI text ([section] / key = value, '#' or ';' comments). Unknown
/// sections or keys and malformed values raise ConfigError naming the line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);

/// Canonical INI rendering of every field, defaults included. Parsing it
/// gives back an identical configuration.
std::string render_config(const RunConfig& config);
/// Hex digest of render_config, ignoring the output directory.
std::string config_hash(const RunConfig& config);

struct Splits {
  Dataset train;
  Dataset test;
};

/// Loads or generates the configured data; the test split reuses the train
/// split's normalization constants.
Splits load_splits(const DataConfig& data);

/// Architecture for `splits`' image shape and class count.
ResNetConfig network_config(const RunConfig& config, const Dataset& train);

/// The teacher phase as a TrainConfig (no fine-tuning epochs).
TrainConfig teacher_train_config(const RunConfig& config);

}  // namespace kdfs

#endif  // KDFS_CONFIG_HPP
