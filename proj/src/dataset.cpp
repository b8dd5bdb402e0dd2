#include "deepobf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "deepobf/model_io.hpp"
#include "deepobf/random.hpp"

namespace deepobf {
namespace {

std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in{std::string(s)};
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

long long to_int(const std::string& s, std::string_view whole) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("dataset spec '" + std::string(whole) + "': bad integer '" + s + "'");
}

double to_double(const std::string& s, std::string_view whole) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("dataset spec '" + std::string(whole) + "': bad number '" + s + "'");
}

// Uniform double in [0, 1) from the top 53 bits.
double unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gaussian(Rng& rng) {
  double u1 = unit(rng);
  while (u1 <= 0.0) u1 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * unit(rng));
}

// Stable per-class constants in [lo, hi).
double class_constant(int family, Index cls, int slot, double lo, double hi) {
  const std::uint64_t h = derive_seed(static_cast<std::uint64_t>(family), "synth-class",
                                      static_cast<std::uint64_t>(cls) * 64 + static_cast<std::uint64_t>(slot));
  return lo + (hi - lo) * static_cast<double>(h >> 11) * 0x1.0p-53;
}

Index grid_side(const ImageExtent& e) { return std::max<Index>(1, std::min(e.height, e.width) / 5); }

// Nuisance strength at the reference noise level: blob jitter in pixels and
// the largest distractor amplitude (brighter than the class blob can be).
constexpr double kJitter = 2.0;
constexpr double kDistract = 1.0;

void render_sample(const DatasetSpec& spec, Index cls, Rng& rng, float* out) {
  const ImageExtent& e = spec.extent;
  const Index side = grid_side(e);
  const double level = spec.noise / 0.1;
  const double row = static_cast<double>(cls / side), col = static_cast<double>(cls % side);
  const double cy = (row + 0.5) * static_cast<double>(e.height) / static_cast<double>(side) + spec.shift_y +
                    kJitter * level * (2.0 * unit(rng) - 1.0);
  const double cx = (col + 0.5) * static_cast<double>(e.width) / static_cast<double>(side) + spec.shift_x +
                    kJitter * level * (2.0 * unit(rng) - 1.0);
  const double blob_sigma = static_cast<double>(std::min(e.height, e.width)) / 8.0;
  const double theta = class_constant(spec.family, cls, 0, 0.0, std::numbers::pi);
  const double freq = class_constant(spec.family, cls, 1, 0.25, 0.9);
  const double phase = class_constant(spec.family, cls, 2, 0.0, 2.0 * std::numbers::pi) +
                       level * std::numbers::pi * (2.0 * unit(rng) - 1.0);
  const double dy = unit(rng) * static_cast<double>(e.height);
  const double dx = unit(rng) * static_cast<double>(e.width);
  const double distractor = kDistract * level * unit(rng);
  for (Index c = 0; c < e.channels; ++c) {
    const double colour = class_constant(spec.family, cls, 8 + static_cast<int>(c), 0.5, 1.0);
    for (Index y = 0; y < e.height; ++y) {
      for (Index x = 0; x < e.width; ++x) {
        const double fy = static_cast<double>(y), fx = static_cast<double>(x);
        const double blob = std::exp(-((fy - cy) * (fy - cy) + (fx - cx) * (fx - cx)) / (2 * blob_sigma * blob_sigma));
        const double other = std::exp(-((fy - dy) * (fy - dy) + (fx - dx) * (fx - dx)) / (2 * blob_sigma * blob_sigma));
        const double wave = std::sin(freq * (fx * std::cos(theta) + fy * std::sin(theta)) + phase);
        double v = 0.2 + 0.6 * colour * blob + distractor * other + 0.1 * wave;
        if (spec.noise > 0.0) v += spec.noise * gaussian(rng);
        out[(c * e.height + y) * e.width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

Split make_split(const DatasetSpec& spec, Index per_class, std::string_view stream) {
  const ImageExtent& e = spec.extent;
  const Index pixels = e.channels * e.height * e.width;
  Split s;
  s.classes = spec.classes;
  s.images = TensorF({spec.classes * per_class, e.channels, e.height, e.width});
  // Interleave classes so storage order is balanced.
  for (Index i = 0; i < per_class; ++i) {
    for (Index k = 0; k < spec.classes; ++k) {
      Rng rng = make_rng(spec.seed, stream, static_cast<std::uint64_t>(k) << 32 | static_cast<std::uint64_t>(i));
      const Index n = i * spec.classes + k;
      render_sample(spec, k, rng, s.images.data() + n * pixels);
      s.labels.push_back(static_cast<int>(k));
    }
  }
  return s;
}

}  // namespace

DatasetSpec DatasetSpec::parse(std::string_view text) {
  const auto parts = split_on(text, ':');
  DatasetSpec spec;
  if (!parts.empty() && parts[0] == "cifar") {
    if (parts.size() < 2) throw ConfigError("dataset spec '" + std::string(text) + "': missing path");
    spec.kind = Kind::cifar_binary;
    spec.classes = 10;
    spec.extent = {3, 32, 32};
    spec.path = std::string(text.substr(6));
    return spec;
  }
  if (parts.size() < 6 || parts.size() > 7 || parts[0] != "synth") {
    throw ConfigError("dataset spec '" + std::string(text) +
                      "' is not synth:<classes>:<c>x<h>x<w>:<n_train>:<n_test>:<seed>[:shift=<dx,dy>] or cifar:<path>");
  }
  spec.classes = to_int(parts[1], text);
  const auto dims = split_on(parts[2], 'x');
  if (dims.size() != 3) throw ConfigError("dataset spec '" + std::string(text) + "': extent must be CxHxW");
  spec.extent = {to_int(dims[0], text), to_int(dims[1], text), to_int(dims[2], text)};
  spec.train_per_class = to_int(parts[3], text);
  spec.test_per_class = to_int(parts[4], text);
  spec.seed = static_cast<std::uint64_t>(to_int(parts[5], text));
  if (parts.size() == 7) {
    if (parts[6].rfind("shift=", 0) != 0) {
      throw ConfigError("dataset spec '" + std::string(text) + "': unknown option '" + parts[6] + "'");
    }
    const auto xy = split_on(parts[6].substr(6), ',');
    if (xy.size() != 2) throw ConfigError("dataset spec '" + std::string(text) + "': shift needs dx,dy");
    spec.shift_x = to_double(xy[0], text);
    spec.shift_y = to_double(xy[1], text);
  }
  if (spec.extent.channels != 1 && spec.extent.channels != 3) {
    throw ConfigError("dataset spec '" + std::string(text) + "': channels must be 1 or 3");
  }
  if (spec.classes < 1 || spec.train_per_class < 0 || spec.test_per_class < 0) {
    throw ConfigError("dataset spec '" + std::string(text) + "': counts must be positive");
  }
  return spec;
}

std::string DatasetSpec::to_string() const {
  if (kind == Kind::cifar_binary) return "cifar:" + path.string();
  std::ostringstream out;
  out << "synth:" << classes << ":" << extent.channels << "x" << extent.height << "x" << extent.width << ":"
      << train_per_class << ":" << test_per_class << ":" << seed;
  if (shift_x != 0.0 || shift_y != 0.0) out << ":shift=" << shift_x << "," << shift_y;
  return out.str();
}

Index synth_capacity(const ImageExtent& extent) {
  const Index side = grid_side(extent);
  return side * side;
}

Dataset synth_generate(const DatasetSpec& spec) {
  if (spec.kind != DatasetSpec::Kind::synthetic) throw ConfigError("synth_generate needs a synthetic spec");
  if (spec.classes > synth_capacity(spec.extent)) {
    throw ConfigError("synthetic extent " + std::to_string(spec.extent.height) + "x" +
                      std::to_string(spec.extent.width) + " has " + std::to_string(synth_capacity(spec.extent)) +
                      " class positions, " + std::to_string(spec.classes) + " requested");
  }
  return {make_split(spec, spec.train_per_class, "synth-train"),
          make_split(spec, spec.test_per_class, "synth-test")};
}

Split parse_cifar_records(std::span<const std::uint8_t> bytes, const ImageExtent& extent, Index classes) {
  const auto pixels = static_cast<std::size_t>(extent.channels * extent.height * extent.width);
  const std::size_t record = pixels + 1;
  if (bytes.size() % record != 0) {
    throw ShapeError("CIFAR file length " + std::to_string(bytes.size()) + " is not a multiple of " +
                     std::to_string(record) + "; incomplete record at offset " +
                     std::to_string(bytes.size() / record * record));
  }
  const std::size_t n = bytes.size() / record;
  Split s;
  s.classes = classes;
  s.images = TensorF({static_cast<Index>(n), extent.channels, extent.height, extent.width});
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * record;
    if (r[0] >= classes) {
      throw ShapeError("CIFAR record " + std::to_string(i) + " at offset " + std::to_string(i * record) +
                       " has label " + std::to_string(r[0]) + " >= " + std::to_string(classes));
    }
    s.labels.push_back(r[0]);
    float* dst = s.images.data() + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) dst[p] = static_cast<float>(r[1 + p]) / 255.0f;
  }
  return s;
}

Split load_cifar_binary(const std::filesystem::path& file, const ImageExtent& extent, Index classes) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot open CIFAR file '" + file.string() + "'");
  const std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(in), {});
  return parse_cifar_records(bytes, extent, classes);
}

namespace {
Split concat_splits(const std::vector<Split>& parts) {
  Split out;
  if (parts.empty()) return out;
  out.classes = parts.front().classes;
  Shape shape = parts.front().images.shape();
  shape[0] = 0;
  for (const auto& p : parts) shape[0] += p.size();
  out.images = TensorF(shape);
  Index off = 0;
  for (const auto& p : parts) {
    out.images.values().segment(off, p.images.size()) = p.images.values();
    off += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}
}  // namespace

Dataset load_cifar_dir(const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) {
    Split s = load_cifar_binary(dir);
    return {s, s};
  }
  std::vector<Split> train;
  for (int i = 1; i <= 5; ++i) {
    const auto f = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (std::filesystem::exists(f)) train.push_back(load_cifar_binary(f));
  }
  if (train.empty()) throw ConfigError("no data_batch_*.bin files in '" + dir.string() + "'");
  return {concat_splits(train), load_cifar_binary(dir / "test_batch.bin")};
}

Dataset load_dataset(const DatasetSpec& spec) {
  return spec.kind == DatasetSpec::Kind::synthetic ? synth_generate(spec) : load_cifar_dir(spec.path);
}

ImageBatch gather(const Split& split, std::span<const Index> order) {
  const Shape& s = split.images.shape();
  const Index pixels = s[1] * s[2] * s[3];
  ImageBatch b{TensorF({static_cast<Index>(order.size()), s[1], s[2], s[3]}), {}, {}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    b.images.values().segment(static_cast<Index>(i) * pixels, pixels) =
        split.images.values().segment(order[i] * pixels, pixels);
    b.labels.push_back(split.labels[static_cast<std::size_t>(order[i])]);
  }
  b.indices.assign(order.begin(), order.end());
  return b;
}

BatchStream::BatchStream(const Split& split, Index batch_size, std::uint64_t seed, bool shuffle)
    : split_(split), batch_size_(batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  order_.resize(static_cast<std::size_t>(split.size()));
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<Index>(i);
  if (shuffle && order_.size() > 1) {
    Rng rng = make_rng(seed, "batches");
    for (std::size_t i = order_.size() - 1; i > 0; --i) {
      std::swap(order_[i], order_[static_cast<std::size_t>(rng() % (i + 1))]);
    }
  }
}

std::optional<ImageBatch> BatchStream::next() {
  if (cursor_ >= static_cast<Index>(order_.size())) return std::nullopt;
  const Index n = std::min(batch_size_, static_cast<Index>(order_.size()) - cursor_);
  auto batch = gather(split_, std::span<const Index>(order_).subspan(static_cast<std::size_t>(cursor_),
                                                                      static_cast<std::size_t>(n)));
  cursor_ += n;
  return batch;
}

Index BatchStream::batch_count() const {
  return (static_cast<Index>(order_.size()) + batch_size_ - 1) / batch_size_;
}

std::uint64_t dataset_digest(const Dataset& data) {
  std::uint64_t h = 0;
  for (const Split* s : {&data.train, &data.test}) {
    const auto* img = reinterpret_cast<const std::uint8_t*>(s->images.data());
    h = splitmix64(h ^ fnv1a64(std::span<const std::uint8_t>(img, static_cast<std::size_t>(s->images.size()) * 4)));
    const auto* lab = reinterpret_cast<const std::uint8_t*>(s->labels.data());
    h = splitmix64(h ^ fnv1a64(std::span<const std::uint8_t>(lab, s->labels.size() * sizeof(int))));
  }
  return h;
}

}  // namespace deepobf
