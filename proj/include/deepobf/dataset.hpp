#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deepobf/model_graph.hpp"

namespace deepobf {

struct DatasetSpec {
  enum class Kind { synthetic, cifar_binary };
  Kind kind = Kind::synthetic;
  Index classes = 4;
  Index train_per_class = 200;
  Index test_per_class = 50;
  ImageExtent extent{3, 16, 16};
  std::uint64_t seed = 7;
  int family = 0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  /// Overall nuisance level; 0 makes every sample its class prototype.
  double noise = 0.1;
  std::filesystem::path path;  // cifar_binary: directory or single file

  /// "synth:<classes>:<c>x<h>x<w>:<n_train>:<n_test>:<seed>[:shift=<dx,dy>]"
  /// or "cifar:<path>".
  static DatasetSpec parse(std::string_view text);
  std::string to_string() const;
};

struct Split {
  TensorF images;  // [n, c, h, w], values in [0, 1]
  std::vector<int> labels;
  Index classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
};

struct Dataset {
  Split train;
  Split test;
};

struct ImageBatch {
  TensorF images;
  std::vector<int> labels;
  std::vector<Index> indices;  // positions in the source split
};

/// Number of distinct blob positions available at an extent.
Index synth_capacity(const ImageExtent& extent);

/// Deterministic synthetic classification data. Class k is a Gaussian blob at
/// a class-specific grid position with a class-specific colour, plus a
/// class-specific sinusoidal texture; per-sample nuisances (position jitter,
/// texture phase, a distractor blob, pixel noise) scale with `noise`. Every
/// sample is generated from its own counter-derived stream, so class k's
/// samples do not depend on how many classes the spec has.
Dataset synth_generate(const DatasetSpec& spec);

/// Parses CIFAR-style binary records: 1 label byte then channel-planar
/// 8-bit pixels, scaled by 1/255.
Split parse_cifar_records(std::span<const std::uint8_t> bytes, const ImageExtent& extent = {3, 32, 32},
                          Index classes = 10);
Split load_cifar_binary(const std::filesystem::path& file, const ImageExtent& extent = {3, 32, 32},
                        Index classes = 10);
/// data_batch_*.bin as train, test_batch.bin as test.
Dataset load_cifar_dir(const std::filesystem::path& dir);

Dataset load_dataset(const DatasetSpec& spec);

/// The listed samples of a split, in the given order.
ImageBatch gather(const Split& split, std::span<const Index> order);

/// Seeded mini-batch iterator; the last partial batch is emitted.
class BatchStream {
 public:
  BatchStream(const Split& split, Index batch_size, std::uint64_t seed, bool shuffle);

  std::optional<ImageBatch> next();
  Index batch_count() const;

 private:
  const Split& split_;
  Index batch_size_;
  std::vector<Index> order_;
  Index cursor_ = 0;
};

std::uint64_t dataset_digest(const Dataset& data);

}  // namespace deepobf
