// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/config.hpp"

#include <boost/algorithm/string/trim.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "kdfs/model_file.hpp"

namespace kdfs {
namespace {

namespace pt = boost::property_tree;

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Int>
Int parse_int(const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("expected an integer");
  return out;
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  const double out = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true or false");
}

std::vector<int> parse_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    boost::algorithm::trim(item);
    out.push_back(parse_int<int>(item));
  }
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list of integers");
  return out;
}

std::string render_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest spelling that still round-trips.
  for (int p = 1; p <= 17; ++p) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", p, v);
    if (std::stod(shorter) == v) return shorter;
  }
  return buf;
}

std::string render_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename Enum>
struct EnumNames {
  std::vector<std::pair<Enum, const char*>> names;

  std::string render(Enum e) const {
    for (const auto& [v, n] : names) {
      if (v == e) return n;
    }
    return "?";
  }
  Enum parse(const std::string& s) const {
    std::string options;
    for (const auto& [v, n] : names) {
      if (s == n) return v;
      options += (options.empty() ? "" : ", ") + std::string(n);
    }
    throw std::invalid_argument("expected one of " + options);
  }
};

const EnumNames<TemperatureSchedule::Kind> kSchedules{
    {{TemperatureSchedule::Kind::kLinear, "linear"}, {TemperatureSchedule::Kind::kExponential, "exponential"}}};
const EnumNames<RegularizerKind> kRegularizers{
    {{RegularizerKind::kAbsolute, "absolute"}, {RegularizerKind::kSquared, "squared"}}};
const EnumNames<SteRouting> kRoutings{
    {{SteRouting::kSecondColumn, "second_column"}, {SteRouting::kAntisymmetric, "antisymmetric"}}};
const EnumNames<SamplerInit> kInits{{{SamplerInit::kKaiming, "kaiming"}, {SamplerInit::kKeepAll, "keep_all"}}};

#define KDFS_INT(sec, name, expr, type)                                             \
  Field {                                                                           \
    sec, name, [](const RunConfig& c) { return std::to_string(c.expr); },          \
        [](RunConfig& c, const std::string& v) { c.expr = parse_int<type>(v); }    \
  }
#define KDFS_DOUBLE(sec, name, expr)                                                \
  Field {                                                                           \
    sec, name, [](const RunConfig& c) { return render_double(c.expr); },           \
        [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); }       \
  }
#define KDFS_STRING(sec, name, expr)                                                \
  Field {                                                                           \
    sec, name, [](const RunConfig& c) { return c.expr; },                          \
        [](RunConfig& c, const std::string& v) { c.expr = v; }                     \
  }
#define KDFS_ENUM(sec, name, expr, table)                                           \
  Field {                                                                           \
    sec, name, [](const RunConfig& c) { return table.render(c.expr); },            \
        [](RunConfig& c, const std::string& v) { c.expr = table.parse(v); }        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"model", "widths", [](const RunConfig& c) { return render_list(c.widths); },
            [](RunConfig& c, const std::string& v) { c.widths = parse_list(v); }},
      Field{"model", "blocks", [](const RunConfig& c) { return render_list(c.blocks); },
            [](RunConfig& c, const std::string& v) { c.blocks = parse_list(v); }},

      KDFS_STRING("data", "kind", data.kind),
      KDFS_STRING("data", "train_images", data.train_images),
      KDFS_STRING("data", "train_labels", data.train_labels),
      KDFS_STRING("data", "test_images", data.test_images),
      KDFS_STRING("data", "test_labels", data.test_labels),
      KDFS_STRING("data", "cifar_dir", data.cifar_dir),
      KDFS_INT("data", "limit_train", data.limit_train, std::size_t),
      KDFS_INT("data", "limit_test", data.limit_test, std::size_t),
      KDFS_INT("data", "synthetic_classes", data.synthetic.classes, std::size_t),
      KDFS_INT("data", "synthetic_per_class", data.synthetic.per_class, std::size_t),
      KDFS_INT("data", "synthetic_test_per_class", data.synthetic_test_per_class, std::size_t),
      KDFS_INT("data", "synthetic_size", data.synthetic.size, std::size_t),
      KDFS_INT("data", "synthetic_channels", data.synthetic.channels, std::size_t),
      KDFS_DOUBLE("data", "synthetic_noise", data.synthetic.noise),
      KDFS_INT("data", "synthetic_seed", data.synthetic.seed, std::uint64_t),

      KDFS_INT("teacher", "epochs", teacher.epochs, int),
      KDFS_DOUBLE("teacher", "lr", teacher.lr),
      KDFS_DOUBLE("teacher", "lr_min", teacher.lr_min),
      KDFS_DOUBLE("teacher", "weight_decay", teacher.weight_decay),
      KDFS_INT("teacher", "batch_size", teacher.batch_size, std::size_t),
      KDFS_INT("teacher", "augment_shift", teacher.augment.max_shift, int),
      Field{"teacher", "augment_flip",
            [](const RunConfig& c) { return std::string(c.teacher.augment.flip ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.teacher.augment.flip = parse_bool(v); }},

      KDFS_INT("train", "epochs", train.epochs, int),
      KDFS_INT("train", "finetune_epochs", train.finetune_epochs, int),
      KDFS_DOUBLE("train", "lr", train.lr),
      KDFS_DOUBLE("train", "lr_min", train.lr_min),
      KDFS_DOUBLE("train", "weight_decay", train.weight_decay),
      KDFS_INT("train", "batch_size", train.batch_size, std::size_t),
      KDFS_DOUBLE("train", "sampler_lr_scale", train.sampler_lr_scale),
      KDFS_INT("train", "seed", train.seed, std::uint64_t),
      KDFS_ENUM("train", "schedule", train.schedule, kSchedules),
      KDFS_DOUBLE("train", "tau_start", train.tau_start),
      KDFS_DOUBLE("train", "tau_end", train.tau_end),
      KDFS_ENUM("train", "regularizer", train.regularizer, kRegularizers),
      KDFS_ENUM("train", "ste_routing", train.routing, kRoutings),
      KDFS_ENUM("train", "sampler_init", train.sampler_init, kInits),
      KDFS_INT("train", "decoder_depth", train.decoder_depth, int),
      KDFS_INT("train", "augment_shift", train.augment.max_shift, int),
      Field{"train", "augment_flip",
            [](const RunConfig& c) { return std::string(c.train.augment.flip ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.train.augment.flip = parse_bool(v); }},
      KDFS_INT("train", "checkpoint_every", train.checkpoint_every, int),

      KDFS_DOUBLE("loss", "kd", train.weights.kd),
      KDFS_DOUBLE("loss", "rl", train.weights.rl),
      KDFS_DOUBLE("loss", "flops", train.weights.flops),
      KDFS_DOUBLE("loss", "kd_temperature", train.weights.kd_temperature),
      KDFS_DOUBLE("loss", "rate", train.weights.rate),

      KDFS_STRING("run", "out", out),
  };
  return table;
}

#undef KDFS_INT
#undef KDFS_DOUBLE
#undef KDFS_STRING
#undef KDFS_ENUM

// Finds the 1-based line declaring `key` inside `[section]`; 0 when absent.
std::size_t locate(const std::string& text, const std::string& section, const std::string& key) {
  std::istringstream in(text);
  std::string line, current;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::string t = boost::algorithm::trim_copy(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      current = boost::algorithm::trim_copy(t.substr(1, t.size() - 2));
      if (key.empty() && current == section) return n;
      continue;
    }
    const auto eq = t.find('=');
    if (!key.empty() && current == section && eq != std::string::npos &&
        boost::algorithm::trim_copy(t.substr(0, eq)) == key) {
      return n;
    }
  }
  return 0;
}

std::string where(const std::string& origin, std::size_t line) {
  return line > 0 ? origin + ":" + std::to_string(line) : origin;
}

}  // namespace

std::string RunConfig::run_name() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "KDFS-%g", train.weights.rate);
  return buf;
}

void RunConfig::validate() const {
  ResNetConfig rc;
  rc.widths = widths;
  rc.blocks = blocks;
  rc.validate();
  train.validate();
  teacher_train_config(*this).validate();
  if (data.kind != "synthetic" && data.kind != "mnist" && data.kind != "cifar") {
    throw ConfigError("data.kind must be synthetic, mnist or cifar");
  }
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(where(origin, e.line()) + ": " + e.message());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError(where(origin, locate(text, "", section)) + ": key '" + section + "' outside any section");
    }
    bool known_section = false;
    for (const Field& f : fields()) known_section |= section == f.section;
    if (!known_section) {
      throw ConfigError(where(origin, locate(text, section, "")) + ": unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      const Field* field = nullptr;
      for (const Field& f : fields()) {
        if (section == f.section && key == f.key) field = &f;
      }
      const std::size_t line = locate(text, section, key);
      if (!field) throw ConfigError(where(origin, line) + ": unknown key '" + key + "' in [" + section + "]");
      try {
        field->set(config, value.data());
      } catch (const std::exception& e) {
        throw ConfigError(where(origin, line) + ": bad value '" + value.data() + "' for " + section + "." + key +
                          ": " + e.what());
      }
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path);
}

std::string render_config(const RunConfig& config) {
  std::string out, section;
  for (const Field& f : fields()) {
    if (section != f.section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& config) {
  RunConfig located = config;
  located.out.clear();
  const std::string text = render_config(located);
  return hash_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Splits load_splits(const DataConfig& data) {
  Splits s;
  if (data.kind == "synthetic") {
    s.train = synthetic(data.synthetic);
    SyntheticSpec test_spec = data.synthetic;
    test_spec.per_class = data.synthetic_test_per_class;
    test_spec.seed = mix_seed(data.synthetic.seed, 0x7e57);
    s.test = synthetic(test_spec);
  } else if (data.kind == "mnist") {
    s.train = load_idx(data.train_images, data.train_labels);
    s.test = load_idx(data.test_images, data.test_labels);
  } else if (data.kind == "cifar") {
    s.train = load_cifar_binary(data.cifar_dir, true);
    s.test = load_cifar_binary(data.cifar_dir, false);
  } else {
    throw ConfigError("unknown data kind '" + data.kind + "'");
  }
  auto limit = [](Dataset& ds, std::size_t n) {
    if (n == 0 || n >= ds.size()) return;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    ds = subset(ds, idx);
  };
  limit(s.train, data.limit_train);
  limit(s.test, data.limit_test);
  compute_normalization(s.train);
  s.test.mean = s.train.mean;
  s.test.std = s.train.std;
  return s;
}

ResNetConfig network_config(const RunConfig& config, const Dataset& train) {
  ResNetConfig rc;
  rc.widths = config.widths;
  rc.blocks = config.blocks;
  rc.in_channels = static_cast<int>(train.channels);
  rc.in_height = static_cast<int>(train.height);
  rc.in_width = static_cast<int>(train.width);
  rc.classes = static_cast<int>(train.classes);
  rc.validate();
  return rc;
}

TrainConfig teacher_train_config(const RunConfig& config) {
  TrainConfig t = config.train;
  t.epochs = config.teacher.epochs;
  t.finetune_epochs = 0;
  t.lr = config.teacher.lr;
  t.lr_min = config.teacher.lr_min;
  t.weight_decay = config.teacher.weight_decay;
  t.batch_size = config.teacher.batch_size;
  t.augment = config.teacher.augment;
  return t;
}

}  // namespace kdfs
