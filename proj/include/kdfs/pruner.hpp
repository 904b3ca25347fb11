// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_PRUNER_HPP
#define KDFS_PRUNER_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdfs/model_file.hpp"
#include "kdfs/nn.hpp"

namespace kdfs {

struct Provenance {
  std::string config_hash;
  std::string source_hash;
};

/// A physically compacted network. `kept[slot]` lists, in increasing order,
/// which filters of the source network's prunable conv survived.
struct PrunedModel {
  Network network;
  std::vector<std::vector<int>> kept;
  Provenance provenance;
};

/// Removes every filter whose mask is 0 together with the matching input
/// slices of the consuming conv. Block outputs keep a scatter list so the
/// residual addition still sees the full width. Throws ContractError when a
/// mask does not fit its conv, is not binary, or drops every filter.
PrunedModel extract(const Network& net, std::span<const Mask> masks, Provenance provenance = {});

/// Architecture descriptor covering every conv shape, so pruned networks can
/// be rebuilt without their masks.
nlohmann::json describe(const Network& net);

/// Rebuilds a network from `describe` output; tensors are read from `file`
/// under `prefix` + the network's tensor names.
Network network_from(const nlohmann::json& descriptor, const ModelFile& file, const std::string& prefix = "");

/// Appends all network tensors to `file` under `prefix`.
void append_tensors(ModelFile& file, const Network& net, const std::string& prefix = "");

std::vector<std::uint8_t> serialize(const PrunedModel& model);
PrunedModel deserialize(std::span<const std::uint8_t> bytes);

void save_model(const std::string& path, const PrunedModel& model);
PrunedModel load_model(const std::string& path);

/// Multiply-accumulates of the network as built (actual weight shapes).
std::int64_t count_flops(const Network& net);
/// Conv weights, batch-norm scale and shift, classifier weight and bias.
std::int64_t count_params(const Network& net);

struct LayerReport {
  std::string name;
  std::size_t kept = 0;
  std::size_t original = 0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct Report {
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::int64_t teacher_flops = 0;
  std::int64_t teacher_params = 0;
  double flops_reduction = 0.0;   // percent
  double params_reduction = 0.0;  // percent
  std::vector<LayerReport> layers;
};

double reduction_percent(std::int64_t pruned, std::int64_t teacher);

/// Compares `model` against the unpruned `teacher`; both must share the same
/// block structure.
Report report(const Network& model, const Network& teacher);

std::string report_csv(const Report& r);
std::string report_table(const Report& r);

}  // namespace kdfs

#endif  // KDFS_PRUNER_HPP
