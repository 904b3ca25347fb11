// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/pruner.hpp"

#include <cstdio>
#include <functional>
#include <sstream>

namespace kdfs {
namespace {

using nlohmann::json;

Tensor<float> gather_rows(const Tensor<float>& t, const std::vector<int>& rows) {
  const std::size_t inner = t.numel() / t.dim(0);
  Shape shape = t.shape;
  shape[0] = rows.size();
  Tensor<float> out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(rows[r]) * inner), inner,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * inner));
  }
  return out;
}

// Keeps input channels `cols` of a [out, in, k, k] weight.
Tensor<float> gather_inputs(const Tensor<float>& w, const std::vector<int>& cols) {
  const std::size_t out_c = w.dim(0), in_c = w.dim(1), area = w.dim(2) * w.dim(3);
  Tensor<float> res({out_c, cols.size(), w.dim(2), w.dim(3)});
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto src = w.data.begin() + static_cast<std::ptrdiff_t>((o * in_c + static_cast<std::size_t>(cols[c])) * area);
      std::copy_n(src, area, res.data.begin() + static_cast<std::ptrdiff_t>((o * cols.size() + c) * area));
    }
  }
  return res;
}

void keep_outputs(ConvBlock& conv, const std::vector<int>& rows) {
  conv.weight = gather_rows(conv.weight, rows);
  conv.bn.scale = gather_rows(conv.bn.scale, rows);
  conv.bn.shift = gather_rows(conv.bn.shift, rows);
  conv.bn.running_mean = gather_rows(conv.bn.running_mean, rows);
  conv.bn.running_var = gather_rows(conv.bn.running_var, rows);
}

json describe_conv(const ConvBlock& conv) {
  return {{"in", conv.in_channels()}, {"out", conv.out_channels()}, {"kernel", conv.kernel()},
          {"stride", conv.stride},    {"padding", conv.padding},    {"prunable", conv.prunable},
          {"slot", conv.mask_slot}};
}

ConvBlock conv_from(const json& j) {
  ConvBlock conv;
  const auto in = j.at("in").get<std::size_t>(), out = j.at("out").get<std::size_t>();
  const auto k = j.at("kernel").get<std::size_t>();
  conv.weight = Tensor<float>({out, in, k, k});
  conv.bn = BatchNormParams(out);
  conv.stride = j.at("stride").get<int>();
  conv.padding = j.at("padding").get<int>();
  conv.prunable = j.at("prunable").get<bool>();
  conv.mask_slot = j.at("slot").get<int>();
  return conv;
}

// Visits every conv in forward order with its output spatial size.
void walk_convs(const Network& net, const std::function<void(const std::string&, const ConvBlock&, std::int64_t)>& fn) {
  std::size_t h = static_cast<std::size_t>(net.config.in_height), w = static_cast<std::size_t>(net.config.in_width);
  auto visit = [&](const std::string& name, const ConvBlock& conv, std::size_t in_h, std::size_t in_w) {
    const std::size_t oh = conv_out_size(in_h, conv.kernel(), conv.stride, conv.padding);
    const std::size_t ow = conv_out_size(in_w, conv.kernel(), conv.stride, conv.padding);
    fn(name, conv, static_cast<std::int64_t>(oh * ow));
    return std::pair{oh, ow};
  };
  std::tie(h, w) = visit("stem", net.stem, h, w);
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    for (std::size_t b = 0; b < net.stages[s].blocks.size(); ++b) {
      const ResidualBlock& block = net.stages[s].blocks[b];
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      auto [oh, ow] = visit(prefix + ".conv1", block.conv1, h, w);
      visit(prefix + ".conv2", block.conv2, oh, ow);
      if (block.shortcut) visit(prefix + ".shortcut", *block.shortcut, h, w);
      h = oh;
      w = ow;
    }
  }
}

std::int64_t conv_params(const ConvBlock& conv) {
  return static_cast<std::int64_t>(conv.weight.numel() + 2 * conv.out_channels());
}

}  // namespace

PrunedModel extract(const Network& net, std::span<const Mask> masks, Provenance provenance) {
  const auto convs = net.prunable();
  if (masks.size() != convs.size()) {
    throw ContractError("extract: expected " + std::to_string(convs.size()) + " masks, got " +
                        std::to_string(masks.size()));
  }
  PrunedModel model;
  model.provenance = std::move(provenance);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].size() != convs[i]->out_channels()) {
      throw ContractError("extract: mask " + std::to_string(i) + " has " + std::to_string(masks[i].size()) +
                          " entries for " + std::to_string(convs[i]->out_channels()) + " filters");
    }
    for (std::uint8_t v : masks[i]) {
      if (v > 1) throw ContractError("extract: mask " + std::to_string(i) + " is not binary");
    }
    if (popcount(masks[i]) == 0) {
      throw ContractError("extract: mask " + std::to_string(i) + " drops every filter");
    }
    model.kept.push_back(kept_indices(masks[i]));
  }

  model.network = net;
  for (Stage& stage : model.network.stages) {
    for (ResidualBlock& block : stage.blocks) {
      if (block.conv1.prunable) {
        const auto& rows = model.kept[static_cast<std::size_t>(block.conv1.mask_slot)];
        keep_outputs(block.conv1, rows);
        block.conv2.weight = gather_inputs(block.conv2.weight, rows);
      }
      if (block.conv2.prunable) {
        const auto& rows = model.kept[static_cast<std::size_t>(block.conv2.mask_slot)];
        if (!block.scatter.empty()) {
          throw ContractError("extract: source network is already pruned");
        }
        keep_outputs(block.conv2, rows);
        if (rows.size() != block.width) block.scatter = rows;
      }
    }
  }
  return model;
}

nlohmann::json describe(const Network& net) {
  const ResNetConfig& c = net.config;
  json stages = json::array();
  for (const Stage& stage : net.stages) {
    json blocks = json::array();
    for (const ResidualBlock& block : stage.blocks) {
      blocks.push_back({{"width", block.width},
                        {"conv1", describe_conv(block.conv1)},
                        {"conv2", describe_conv(block.conv2)},
                        {"shortcut", block.shortcut ? describe_conv(*block.shortcut) : json(nullptr)},
                        {"scatter", block.scatter}});
    }
    stages.push_back({{"width", stage.width}, {"blocks", std::move(blocks)}});
  }
  return {{"config",
           {{"widths", c.widths},
            {"blocks", c.blocks},
            {"in_channels", c.in_channels},
            {"in_height", c.in_height},
            {"in_width", c.in_width},
            {"classes", c.classes}}},
          {"stem", describe_conv(net.stem)},
          {"stages", std::move(stages)},
          {"fc", {{"in", net.fc_weight.dim(1)}, {"out", net.fc_weight.dim(0)}}}};
}

Network network_from(const nlohmann::json& d, const ModelFile& file, const std::string& prefix) {
  Network net;
  try {
    const json& c = d.at("config");
    net.config.widths = c.at("widths").get<std::vector<int>>();
    net.config.blocks = c.at("blocks").get<std::vector<int>>();
    net.config.in_channels = c.at("in_channels").get<int>();
    net.config.in_height = c.at("in_height").get<int>();
    net.config.in_width = c.at("in_width").get<int>();
    net.config.classes = c.at("classes").get<int>();
    net.stem = conv_from(d.at("stem"));
    for (const json& s : d.at("stages")) {
      Stage stage;
      stage.width = s.at("width").get<std::size_t>();
      for (const json& b : s.at("blocks")) {
        ResidualBlock block;
        block.width = b.at("width").get<std::size_t>();
        block.conv1 = conv_from(b.at("conv1"));
        block.conv2 = conv_from(b.at("conv2"));
        if (!b.at("shortcut").is_null()) block.shortcut = conv_from(b.at("shortcut"));
        block.scatter = b.at("scatter").get<std::vector<int>>();
        stage.blocks.push_back(std::move(block));
      }
      net.stages.push_back(std::move(stage));
    }
    const auto fc_in = d.at("fc").at("in").get<std::size_t>(), fc_out = d.at("fc").at("out").get<std::size_t>();
    net.fc_weight = Tensor<float>({fc_out, fc_in});
    net.fc_bias = Tensor<float>({fc_out});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed architecture descriptor: ") + e.what());
  }
  net.config.validate();
  for (auto& [name, tensor] : net.named_tensors()) {
    const Tensor<float>& stored = file.tensor(prefix + name);
    if (stored.shape != tensor->shape) {
      throw FormatError("tensor '" + prefix + name + "' has shape " + to_string(stored.shape) +
                        ", descriptor implies " + to_string(tensor->shape));
    }
    tensor->data = stored.data;
  }
  return net;
}

void append_tensors(ModelFile& file, const Network& net, const std::string& prefix) {
  for (const auto& [name, tensor] : net.named_tensors()) file.tensors.emplace_back(prefix + name, *tensor);
}

std::vector<std::uint8_t> serialize(const PrunedModel& model) {
  ModelFile file;
  file.descriptor = {{"kind", "pruned-model"},
                     {"network", describe(model.network)},
                     {"kept", model.kept},
                     {"provenance",
                      {{"config_hash", model.provenance.config_hash},
                       {"source_hash", model.provenance.source_hash}}}};
  append_tensors(file, model.network);
  return encode(file);
}

PrunedModel deserialize(std::span<const std::uint8_t> bytes) {
  const ModelFile file = decode(bytes);
  PrunedModel model;
  try {
    if (file.descriptor.at("kind") != "pruned-model") {
      throw FormatError("model file holds a '" + file.descriptor.at("kind").get<std::string>() +
                        "', not a pruned model");
    }
    model.network = network_from(file.descriptor.at("network"), file);
    model.kept = file.descriptor.at("kept").get<std::vector<std::vector<int>>>();
    model.provenance.config_hash = file.descriptor.at("provenance").at("config_hash").get<std::string>();
    model.provenance.source_hash = file.descriptor.at("provenance").at("source_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model descriptor: ") + e.what());
  }
  for (const auto& list : model.kept) {
    for (std::size_t i = 1; i < list.size(); ++i) {
      if (list[i] <= list[i - 1]) throw FormatError("kept-index list is not strictly increasing");
    }
  }
  return model;
}

void save_model(const std::string& path, const PrunedModel& model) { write_bytes(path, serialize(model)); }

PrunedModel load_model(const std::string& path) { return deserialize(read_bytes(path)); }

std::int64_t count_flops(const Network& net) {
  std::int64_t total = 0;
  walk_convs(net, [&](const std::string&, const ConvBlock& conv, std::int64_t spatial) {
    total += spatial * static_cast<std::int64_t>(conv.weight.numel());
  });
  return total + static_cast<std::int64_t>(net.fc_weight.numel());
}

std::int64_t count_params(const Network& net) {
  std::int64_t total = 0;
  walk_convs(net, [&](const std::string&, const ConvBlock& conv, std::int64_t) { total += conv_params(conv); });
  return total + static_cast<std::int64_t>(net.fc_weight.numel() + net.fc_bias.numel());
}

double reduction_percent(std::int64_t pruned, std::int64_t teacher) {
  if (teacher <= 0) throw ContractError("reduction_percent: teacher count must be positive");
  return 100.0 * (1.0 - static_cast<double>(pruned) / static_cast<double>(teacher));
}

Report report(const Network& model, const Network& teacher) {
  Report r;
  r.flops = count_flops(model);
  r.params = count_params(model);
  r.teacher_flops = count_flops(teacher);
  r.teacher_params = count_params(teacher);
  r.flops_reduction = reduction_percent(r.flops, r.teacher_flops);
  r.params_reduction = reduction_percent(r.params, r.teacher_params);

  std::vector<std::size_t> original;
  walk_convs(teacher, [&](const std::string&, const ConvBlock& conv, std::int64_t) {
    original.push_back(conv.out_channels());
  });
  walk_convs(model, [&](const std::string& name, const ConvBlock& conv, std::int64_t spatial) {
    const std::size_t i = r.layers.size();
    if (i >= original.size()) throw DimensionError("report: model has more convs than the teacher");
    r.layers.push_back({name, conv.out_channels(), original[i], conv_params(conv),
                        spatial * static_cast<std::int64_t>(conv.weight.numel())});
  });
  if (r.layers.size() != original.size()) throw DimensionError("report: model has fewer convs than the teacher");
  r.layers.push_back({"fc", model.fc_weight.dim(0), teacher.fc_weight.dim(0),
                      static_cast<std::int64_t>(model.fc_weight.numel() + model.fc_bias.numel()),
                      static_cast<std::int64_t>(model.fc_weight.numel())});
  return r;
}

std::string report_csv(const Report& r) {
  std::ostringstream out;
  out << "layer,kept,original,params,flops\n";
  for (const LayerReport& l : r.layers) {
    out << l.name << ',' << l.kept << ',' << l.original << ',' << l.params << ',' << l.flops << '\n';
  }
  out << "total,,," << r.params << ',' << r.flops << '\n';
  out << "teacher,,," << r.teacher_params << ',' << r.teacher_flops << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "reduction_percent,,,%.2f,%.2f\n", r.params_reduction, r.flops_reduction);
  out << buf;
  return out.str();
}

std::string report_table(const Report& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %9s %12s %14s\n", "layer", "kept", "params", "flops");
  out << line;
  for (const LayerReport& l : r.layers) {
    std::snprintf(line, sizeof line, "%-22s %4zu/%-4zu %12lld %14lld\n", l.name.c_str(), l.kept, l.original,
                  static_cast<long long>(l.params), static_cast<long long>(l.flops));
    out << line;
  }
  std::snprintf(line, sizeof line, "FLOPs  %lld / %lld  (%.2f%% reduction)\n", static_cast<long long>(r.flops),
                static_cast<long long>(r.teacher_flops), r.flops_reduction);
  out << line;
  std::snprintf(line, sizeof line, "Params %lld / %lld  (%.2f%% reduction)\n", static_cast<long long>(r.params),
                static_cast<long long>(r.teacher_params), r.params_reduction);
  out << line;
  return out.str();
}

}  // namespace kdfs
