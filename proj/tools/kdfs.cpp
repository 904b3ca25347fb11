// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0
//
// kdfs: teacher training, pruning, fine-tuning, export and reporting.

#include <fcntl.h>
#include <spdlog/cfg/env.h>
#include <spdlog/spdlog.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "kdfs/config.hpp"
#include "kdfs/pruner.hpp"
#include "kdfs/trainer.hpp"

namespace fs = std::filesystem;
using namespace kdfs;

namespace {

struct Options {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> rate;
  std::string model;
  bool resume = false;
};

// Exclusive advisory lock on <out>/.lock for the lifetime of the process.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    const fs::path path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error("output directory " + dir.string() + " is in use by another run");
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

struct Run {
  RunConfig config;
  fs::path out;
  std::string hash;
};

Run prepare(const Options& opt) {
  Run run;
  run.config = opt.config_path.empty() ? RunConfig{} : load_config(opt.config_path);
  if (opt.seed) run.config.train.seed = *opt.seed;
  if (opt.rate) run.config.train.weights.rate = *opt.rate;
  if (!opt.out.empty()) run.config.out = opt.out;
  if (run.config.out.empty()) run.config.out = "runs/" + run.config.run_name();
  run.config.validate();
  run.out = run.config.out;
  run.hash = config_hash(run.config);
  fs::create_directories(run.out);
  return run;
}

void echo_config(const Run& run, const std::string& phase) {
  std::ofstream(run.out / ("config." + phase + ".ini")) << render_config(run.config);
}

fs::path teacher_path(const Run& run) { return run.out / "teacher.kdfs"; }
fs::path checkpoint_path(const Run& run) { return run.out / "checkpoint.kdfs"; }
fs::path finetuned_path(const Run& run) { return run.out / "finetuned.kdfs"; }
fs::path export_path(const Run& run) { return run.out / (run.config.run_name() + ".kdfs"); }

Network load_teacher(const Run& run) {
  const fs::path path = teacher_path(run);
  if (!fs::exists(path)) {
    throw DependencyError("no teacher at " + path.string() + "; run `kdfs train-teacher` first");
  }
  return load_model(path).network;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw Error("cannot write " + path.string());
    out_ << metrics_header() << '\n';
  }
  void operator()(const EpochMetrics& m) {
    out_ << metrics_row(m) << '\n';
    out_.flush();
    spdlog::info("epoch {:>4}  tau {:.3f}  lr {:.2e}  ce {:.4f}  flops {:.3f}  train {:.4f}  eval {:.4f}", m.epoch,
                 m.tau, m.lr, m.ce, m.flops_ratio, m.train_acc, m.eval_acc);
  }

 private:
  std::ofstream out_;
};

std::string file_hash(const fs::path& path) { return hash_hex(read_bytes(path)); }

void cmd_train_teacher(const Options& opt) {
  Run run = prepare(opt);
  DirectoryLock lock(run.out);
  echo_config(run, "train-teacher");
  const Splits data = load_splits(run.config.data);
  Rng rng(mix_seed(run.config.train.seed, 0x7eac));
  Network net = build_resnet(network_config(run.config, data.train), rng);
  MetricsWriter writer(run.out / "teacher_metrics.csv");
  train_teacher(net, data.train, &data.test, teacher_train_config(run.config), std::ref(writer));
  std::vector<Mask> full;
  for (const ConvBlock* conv : net.prunable()) full.emplace_back(conv->out_channels(), 1);
  save_model(teacher_path(run), extract(net, full, {run.hash, ""}));
  spdlog::info("teacher test accuracy {:.4f}, saved {}", evaluate(net, data.test), teacher_path(run).string());
}

void cmd_prune(const Options& opt) {
  Run run = prepare(opt);
  DirectoryLock lock(run.out);
  echo_config(run, "prune");
  const Network teacher = load_teacher(run);
  const Splits data = load_splits(run.config.data);
  KdfsTrainer trainer(teacher, data.train, &data.test, run.config.train, run.hash);
  if (opt.resume && fs::exists(checkpoint_path(run))) {
    trainer.restore(decode(read_bytes(checkpoint_path(run))));
    spdlog::info("resumed from {} at epoch {}", checkpoint_path(run).string(), trainer.epoch());
  }
  MetricsWriter writer(run.out / "prune_metrics.csv");
  for (const EpochMetrics& m : trainer.history()) writer(m);
  const int every = run.config.train.checkpoint_every;
  trainer.run([&](const EpochMetrics& m) {
    writer(m);
    if (every > 0 && m.epoch % every == 0) write_bytes(checkpoint_path(run), encode(trainer.checkpoint()));
  });
  write_bytes(checkpoint_path(run), encode(trainer.checkpoint()));
  const auto masks = trainer.final_masks();
  const double ratio = static_cast<double>(flops_of(trainer.flops_model(), masks)) /
                      static_cast<double>(trainer.flops_model().teacher_flops());
  spdlog::info("pruning finished: hard-mask FLOPs {:.2f}% of teacher", 100.0 * ratio);
}

PrunedModel extract_from_checkpoint(const Run& run, const Network& teacher, const Splits& data) {
  const fs::path path = checkpoint_path(run);
  if (!fs::exists(path)) throw DependencyError("no checkpoint at " + path.string() + "; run `kdfs prune` first");
  KdfsTrainer trainer(teacher, data.train, &data.test, run.config.train, run.hash);
  trainer.restore(decode(read_bytes(path)));
  if (!trainer.done()) throw DependencyError("checkpoint at " + path.string() + " is from an unfinished prune run");
  return extract(trainer.student(), trainer.final_masks(), {run.hash, file_hash(path)});
}

void cmd_finetune(const Options& opt) {
  Run run = prepare(opt);
  DirectoryLock lock(run.out);
  echo_config(run, "finetune");
  const Network teacher = load_teacher(run);
  const Splits data = load_splits(run.config.data);
  PrunedModel model = extract_from_checkpoint(run, teacher, data);
  MetricsWriter writer(run.out / "finetune_metrics.csv");
  finetune(model, teacher, data.train, &data.test, run.config.train, std::ref(writer));
  save_model(finetuned_path(run), model);
  spdlog::info("fine-tuned model test accuracy {:.4f}", evaluate(model.network, data.test));
}

void cmd_export(const Options& opt) {
  Run run = prepare(opt);
  DirectoryLock lock(run.out);
  const Network teacher = load_teacher(run);
  PrunedModel model;
  if (fs::exists(finetuned_path(run))) {
    model = load_model(finetuned_path(run));
  } else if (run.config.train.finetune_epochs == 0) {
    model = extract_from_checkpoint(run, teacher, load_splits(run.config.data));
  } else {
    throw DependencyError("no fine-tuned model at " + finetuned_path(run).string() + "; run `kdfs finetune` first");
  }
  save_model(export_path(run), model);
  const Report r = report(model.network, teacher);
  std::ofstream(run.out / "report.csv") << report_csv(r);
  std::cout << export_path(run).string() << '\n';
}

fs::path model_or_export(const Options& opt, const Run& run) {
  const fs::path path = opt.model.empty() ? export_path(run) : fs::path(opt.model);
  if (!fs::exists(path)) throw DependencyError("no model at " + path.string() + "; run `kdfs export` first");
  return path;
}

void cmd_eval(const Options& opt) {
  Run run = prepare(opt);
  const PrunedModel model = load_model(model_or_export(opt, run));
  const Splits data = load_splits(run.config.data);
  std::printf("accuracy %.4f\n", evaluate(model.network, data.test));
}

void cmd_flops(const Options& opt) {
  Run run = prepare(opt);
  Network net;
  if (!opt.model.empty()) {
    net = load_model(opt.model).network;
  } else {
    const Splits data = load_splits(run.config.data);
    Rng rng(0);
    net = build_resnet(network_config(run.config, data.train), rng);
  }
  std::printf("flops %lld\nparams %lld\n", static_cast<long long>(count_flops(net)),
              static_cast<long long>(count_params(net)));
}

void cmd_report(const Options& opt) {
  Run run = prepare(opt);
  const Network teacher = load_teacher(run);
  const PrunedModel model = load_model(model_or_export(opt, run));
  const Report r = report(model.network, teacher);
  std::ofstream(run.out / "report.csv") << report_csv(r);
  std::cout << run.config.run_name() << '\n' << report_table(r);
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const DataError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::cfg::load_env_levels();
  CLI::App app{"KDFS filter pruning: teacher training, pruning, fine-tuning and export"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "INI configuration file");
    sub->add_option("--out", opt.out, "output directory (default runs/<run name>)");
    sub->add_option("--seed", opt.seed, "override train.seed");
    sub->add_option("--r", opt.rate, "override the compression rate loss.rate");
  };
  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Options&);
  };
  const Command commands[] = {
      {"train-teacher", "train the unpruned teacher with cross-entropy", cmd_train_teacher},
      {"prune", "run the KDFS pruning phase against the teacher", cmd_prune},
      {"finetune", "extract the compact model and fine-tune it", cmd_finetune},
      {"export", "write the final compact model file and report", cmd_export},
      {"eval", "test accuracy of a model file", cmd_eval},
      {"flops", "FLOPs and parameters of the configured architecture or a model file", cmd_flops},
      {"report", "per-layer kept channels and reductions against the teacher", cmd_report},
  };
  void (*selected)(const Options&) = nullptr;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    if (std::string(c.name) == "prune") sub->add_flag("--resume", opt.resume, "continue from checkpoint.kdfs");
    if (std::string(c.name) == "eval" || std::string(c.name) == "flops" || std::string(c.name) == "report") {
      sub->add_option("--model", opt.model, "model file (default: the exported model)");
    }
    sub->callback([&selected, fn = c.fn] { selected = fn; });
  }
  CLI11_PARSE(app, argc, argv);
  try {
    selected(opt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  }
  return 0;
}
