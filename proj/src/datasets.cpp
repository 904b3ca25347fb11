// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kdfs/model_file.hpp"

namespace kdfs {
namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::uint32_t be32(std::span<const std::uint8_t> bytes, std::size_t at) {
  if (at + 4 > bytes.size()) throw FormatError("IDX header truncated");
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

void default_normalization(Dataset& ds) {
  ds.mean.assign(ds.channels, 0.0f);
  ds.std.assign(ds.channels, 1.0f);
}

}  // namespace

void Dataset::validate() const {
  if (images.size() != size() * sample_size()) {
    throw DataError("dataset holds " + std::to_string(images.size()) + " pixel bytes for " +
                    std::to_string(size()) + " samples of " + std::to_string(sample_size()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  if (mean.size() != channels || std.size() != channels) throw DataError("normalization constants missing");
  for (float s : std) {
    if (!(s > 0.0f)) throw DataError("normalization std must be positive");
  }
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, std::size_t classes) {
  if (be32(images, 0) != kIdxImages) throw FormatError("image file is not IDX (magic 0x00000803 expected)");
  if (be32(labels, 0) != kIdxLabels) throw FormatError("label file is not IDX (magic 0x00000801 expected)");
  const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
  const std::size_t n_labels = be32(labels, 4);
  if (n != n_labels) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                    " labels");
  }
  if (images.size() != 16 + n * rows * cols) throw FormatError("IDX image payload has the wrong length");
  if (labels.size() != 8 + n) throw FormatError("IDX label payload has the wrong length");

  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.classes = classes;
  ds.images.assign(images.begin() + 16, images.end());
  ds.labels.assign(labels.begin() + 8, labels.end());
  default_normalization(ds);
  ds.validate();
  return ds;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t classes) {
  return parse_idx(read_bytes(images), read_bytes(labels), classes);
}

Dataset parse_cifar_records(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("CIFAR data is " + std::to_string(bytes.size()) + " bytes, not a multiple of " +
                      std::to_string(kCifarRecord) + " (truncated record)");
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = kCifarSide;
  ds.classes = 10;
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.images.reserve(n * (kCifarRecord - 1));
  for (std::size_t i = 0; i < n; ++i) {
    const auto record = bytes.subspan(i * kCifarRecord, kCifarRecord);
    ds.labels.push_back(record[0]);
    ds.images.insert(ds.images.end(), record.begin() + 1, record.end());
  }
  default_normalization(ds);
  ds.validate();
  return ds;
}

Dataset load_cifar_binary(const std::filesystem::path& dir, bool train) {
  std::vector<std::string> names;
  if (train) {
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    names.push_back("test_batch.bin");
  }
  std::vector<std::uint8_t> all;
  for (const auto& name : names) {
    const auto bytes = read_bytes(dir / name);
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return parse_cifar_records(all);
}

Dataset synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.size < 8 || spec.channels == 0) {
    throw ConfigError("synthetic: need at least 2 classes, 8x8 images and one channel");
  }
  Dataset ds;
  ds.channels = spec.channels;
  ds.height = ds.width = spec.size;
  ds.classes = spec.classes;
  const std::size_t s = spec.size;
  const std::size_t positions = (spec.classes + 3) / 4;
  Rng rng(mix_seed(spec.seed, 0x5e7));

  std::vector<float> canvas(s * s);
  for (std::size_t i = 0; i < spec.per_class * spec.classes; ++i) {
    const std::size_t c = i % spec.classes;
    const std::size_t shape = c % 4, slot = c / 4;
    const int jx = static_cast<int>(rng.below(3)) - 1, jy = static_cast<int>(rng.below(3)) - 1;
    // Anchor along the image for this class's position slot.
    const int anchor = static_cast<int>((slot + 1) * s / (positions + 1));
    const int thick = std::max<int>(1, static_cast<int>(s / 8));
    std::fill(canvas.begin(), canvas.end(), 0.0f);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const int yy = static_cast<int>(y) - jy, xx = static_cast<int>(x) - jx;
        bool on = false;
        switch (shape) {
          case 0: on = std::abs(yy - anchor) < thick; break;
          case 1: on = std::abs(xx - anchor) < thick; break;
          case 2: on = std::abs(yy - anchor) < 2 * thick && std::abs(xx - anchor) < 2 * thick; break;
          default: on = std::abs(xx - yy - (anchor - static_cast<int>(s) / 2)) < thick; break;
        }
        canvas[y * s + x] = on ? 0.8f : 0.1f;
      }
    }
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      for (std::size_t p = 0; p < s * s; ++p) {
        const double v = canvas[p] + spec.noise * rng.normal();
        ds.images.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
    }
    ds.labels.push_back(static_cast<int>(c));
  }
  default_normalization(ds);
  ds.validate();
  return ds;
}

void compute_normalization(Dataset& ds) {
  const std::size_t area = ds.height * ds.width;
  ds.mean.assign(ds.channels, 0.0f);
  ds.std.assign(ds.channels, 1.0f);
  if (ds.size() == 0) return;
  for (std::size_t c = 0; c < ds.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* px = ds.images.data() + (i * ds.channels + c) * area;
      for (std::size_t p = 0; p < area; ++p) {
        const double v = px[p] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double count = static_cast<double>(ds.size() * area);
    const double mean = sum / count;
    const double var = std::max(sq / count - mean * mean, 1e-12);
    ds.mean[c] = static_cast<float>(mean);
    ds.std[c] = static_cast<float>(std::sqrt(var));
  }
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              bool shuffle) {
  if (batch_size == 0) throw ContractError("batches: batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Tensor<float> make_batch(const Dataset& ds, std::span<const std::size_t> indices, std::vector<int>* labels,
                         Rng* rng, const Augmentation& augment) {
  if (augment.max_shift < 0) throw ContractError("make_batch: max_shift must be non-negative");
  const auto span = static_cast<std::uint64_t>(2 * augment.max_shift + 1);
  const std::size_t c_n = ds.channels, h = ds.height, w = ds.width, area = h * w;
  Tensor<float> batch({indices.size(), c_n, h, w});
  if (labels) labels->clear();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= ds.size()) throw ContractError("make_batch: index " + std::to_string(i) + " out of range");
    if (labels) labels->push_back(ds.labels[i]);
    bool flip = false;
    int dy = 0, dx = 0;
    if (rng) {
      if (augment.flip) flip = rng->below(2) == 1;
      if (augment.max_shift > 0) {
        dy = static_cast<int>(rng->below(span)) - augment.max_shift;
        dx = static_cast<int>(rng->below(span)) - augment.max_shift;
      }
    }
    for (std::size_t c = 0; c < c_n; ++c) {
      const std::uint8_t* src = ds.images.data() + (i * c_n + c) * area;
      float* dst = batch.data.data() + (b * c_n + c) * area;
      const float inv_std = 1.0f / ds.std[c];
      const float zero = (0.0f - ds.mean[c]) * inv_std;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const int sy = static_cast<int>(y) + dy;
          int sx = static_cast<int>(x) + dx;
          if (flip) sx = static_cast<int>(w) - 1 - sx;
          float v = zero;
          if (sy >= 0 && sy < static_cast<int>(h) && sx >= 0 && sx < static_cast<int>(w)) {
            v = (src[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] / 255.0f - ds.mean[c]) * inv_std;
          }
          dst[y * w + x] = v;
        }
      }
    }
  }
  return batch;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out = ds;
  out.images.clear();
  out.labels.clear();
  const std::size_t n = ds.sample_size();
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw ContractError("subset: index " + std::to_string(i) + " out of range");
    out.images.insert(out.images.end(), ds.images.begin() + static_cast<std::ptrdiff_t>(i * n),
                      ds.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

}  // namespace kdfs
