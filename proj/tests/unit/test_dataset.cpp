#include <algorithm>
#include <filesystem>
#include <fstream>

#include "deepobf/dataset.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace deepobf;

namespace {

DatasetSpec reference_spec() { return DatasetSpec::parse("synth:4:3x16x16:200:50:7"); }

// Softmax regression on raw pixels, full-batch gradient descent.
double linear_probe_accuracy(const Dataset& d, int epochs) {
  const Index features = d.train.images.size() / d.train.size();
  LinearParams<float> p{TensorF({d.train.classes, features}), TensorF({d.train.classes})};
  Sgd<float> sgd({0.5, 0.9, 0.0});
  const TensorF x = flatten(d.train.images);
  for (int e = 0; e < epochs; ++e) {
    const auto loss = softmax_cross_entropy(linear(x, p), std::span<const int>(d.train.labels));
    LinearGrads<float> g;
    linear_backward(x, p, loss.grad, &g);
    p.weight.grad() = g.weight.values();
    p.bias.grad() = g.bias.values();
    sgd.step("w", p.weight);
    sgd.step("b", p.bias);
  }
  const TensorF logits = linear(flatten(d.test.images), p);
  Index correct = 0;
  for (Index n = 0; n < d.test.size(); ++n) {
    Index best = 0;
    for (Index k = 1; k < d.test.classes; ++k) {
      if (logits.at(n, k) > logits.at(n, best)) best = k;
    }
    correct += best == d.test.labels[static_cast<std::size_t>(n)];
  }
  return static_cast<double>(correct) / static_cast<double>(d.test.size());
}

}  // namespace

TEST_CASE("dataset spec strings") {
  const DatasetSpec s = DatasetSpec::parse("synth:4:3x16x16:200:50:7:shift=2,-1");
  CHECK(s.classes == 4);
  CHECK(s.extent == ImageExtent{3, 16, 16});
  CHECK(s.train_per_class == 200);
  CHECK(s.test_per_class == 50);
  CHECK(s.seed == 7);
  CHECK(s.shift_x == 2.0);
  CHECK(s.shift_y == -1.0);
  CHECK(DatasetSpec::parse(s.to_string()).to_string() == s.to_string());
  CHECK_THROWS_AS(DatasetSpec::parse("synth:4:2x16x16:1:1:1"), ConfigError);
  CHECK_THROWS_AS(DatasetSpec::parse("synth:4:3x16:1:1:1"), ConfigError);
  CHECK_THROWS_AS(DatasetSpec::parse("synth:four:3x16x16:1:1:1"), ConfigError);
  CHECK_THROWS_AS(DatasetSpec::parse("synth:4:3x16x16:1:1:1:wobble=3"), ConfigError);
  CHECK(DatasetSpec::parse("cifar:/data/cifar-10").kind == DatasetSpec::Kind::cifar_binary);
}

TEST_CASE("synthetic data is deterministic and well formed") {
  const Dataset a = synth_generate(reference_spec());
  const Dataset b = synth_generate(reference_spec());
  CHECK(a.train.images == b.train.images);
  CHECK(a.test.images == b.test.images);
  CHECK(a.train.labels == b.train.labels);
  CHECK(dataset_digest(a) == dataset_digest(b));
  CHECK(a.train.size() == 800);
  CHECK(a.test.size() == 200);
  CHECK(a.train.images.values().minCoeff() >= 0.0f);
  CHECK(a.train.images.values().maxCoeff() <= 1.0f);
  for (int k = 0; k < 4; ++k) CHECK(std::count(a.test.labels.begin(), a.test.labels.end(), k) == 50);
  DatasetSpec other = reference_spec();
  other.seed = 8;
  CHECK(dataset_digest(synth_generate(other)) != dataset_digest(a));
}

TEST_CASE("train and test splits share no samples") {
  const Dataset d = synth_generate(reference_spec());
  const Index pixels = 3 * 16 * 16;
  for (Index i = 0; i < d.test.size(); i += 7) {
    for (Index j = 0; j < d.train.size(); ++j) {
      CHECK_FALSE(d.test.images.values().segment(i * pixels, pixels) ==
                  d.train.images.values().segment(j * pixels, pixels));
    }
  }
}

TEST_CASE("too many classes for the extent") {
  CHECK(synth_capacity({3, 16, 16}) == 9);
  CHECK_THROWS_AS(synth_generate(DatasetSpec::parse("synth:10:3x16x16:2:2:1")), ConfigError);
}

TEST_CASE("noise-free samples are their class prototype") {
  DatasetSpec s = reference_spec();
  s.noise = 0.0;
  s.train_per_class = 1;
  s.test_per_class = 20;
  const Dataset d = synth_generate(s);
  const Index pixels = 3 * 16 * 16;
  Index correct = 0;
  for (Index n = 0; n < d.test.size(); ++n) {
    Index best = 0;
    double best_dist = 1e30;
    for (Index k = 0; k < d.train.size(); ++k) {
      const double dist =
          (d.test.images.values().segment(n * pixels, pixels) - d.train.images.values().segment(k * pixels, pixels))
              .squaredNorm();
      if (dist < best_dist) best_dist = dist, best = k;
    }
    correct += d.train.labels[static_cast<std::size_t>(best)] == d.test.labels[static_cast<std::size_t>(n)];
  }
  CHECK(correct == d.test.size());
}

TEST_CASE("superset classes coincide with the reference classes") {
  const Dataset four = synth_generate(reference_spec());
  const Dataset eight = synth_generate(DatasetSpec::parse("synth:8:3x16x16:200:50:7"));
  const Index pixels = 3 * 16 * 16;
  // Storage interleaves classes, so sample i of class k sits at i*classes+k.
  for (Index i : {0, 17, 199}) {
    for (Index k = 0; k < 4; ++k) {
      CHECK(four.train.images.values().segment((i * 4 + k) * pixels, pixels) ==
            eight.train.images.values().segment((i * 8 + k) * pixels, pixels));
    }
  }
}

TEST_CASE("shifted domain keeps classes but moves the blobs") {
  const Dataset base = synth_generate(reference_spec());
  const Dataset moved = synth_generate(DatasetSpec::parse("synth:4:3x16x16:200:50:7:shift=3,2"));
  CHECK(moved.train.labels == base.train.labels);
  CHECK_FALSE(moved.train.images == base.train.images);
}

TEST_CASE("reference data is learnable by a linear probe") {
  const double acc = linear_probe_accuracy(synth_generate(reference_spec()), 300);
  MESSAGE("linear probe test accuracy " << acc);
  CHECK(acc >= 0.85);
  // Pinned from the first run: learnable, not trivially separable.
  CHECK(acc == doctest::Approx(0.91).epsilon(0.02));
}

TEST_CASE("CIFAR binary records") {
  std::vector<std::uint8_t> bytes(2 * 3073, 0);
  bytes[0] = 3;
  bytes[3073] = 9;
  bytes[3073 + 1] = 255;                 // R plane, pixel (0, 0)
  bytes[3073 + 1 + 1024 + 33] = 51;      // G plane, pixel (1, 1)
  const Split s = parse_cifar_records(bytes);
  REQUIRE(s.size() == 2);
  CHECK(s.labels == std::vector<int>{3, 9});
  CHECK(s.images.values().segment(0, 3072).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(s.images.at(1, 0, 0, 0) == 1.0f);
  CHECK(s.images.at(1, 1, 1, 1) == 0.2f);
  CHECK(s.images.values().segment(3072 + 1024, 2048).sum() == doctest::Approx(0.2f));

  const Split one = parse_cifar_records(std::span<const std::uint8_t>(bytes).first(3073));
  CHECK(one.size() == 1);

  try {
    parse_cifar_records(std::span<const std::uint8_t>(bytes).first(3073 + 100));
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("offset 3073") != std::string::npos);
  }
  auto bad = bytes;
  bad[3073] = 10;
  CHECK_THROWS_AS(parse_cifar_records(bad), ShapeError);

  const auto dir = std::filesystem::temp_directory_path() / "deepobf_cifar_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "data_batch_1.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::ofstream test(dir / "test_batch.bin", std::ios::binary);
    test.write(reinterpret_cast<const char*>(bytes.data()), 3073);
  }
  const Dataset d = load_dataset(DatasetSpec::parse("cifar:" + dir.string()));
  CHECK(d.train.size() == 2);
  CHECK(d.test.size() == 1);
  CHECK(d.train.images == s.images);
  std::filesystem::remove_all(dir);
}

TEST_CASE("batch streams") {
  const Dataset d = synth_generate(DatasetSpec::parse("synth:4:1x16x16:5:1:3"));
  SUBCASE("storage order without shuffle, partial tail") {
    BatchStream stream(d.train, 6, 1, false);
    CHECK(stream.batch_count() == 4);
    std::vector<int> labels;
    Index batches = 0, last = 0;
    while (auto b = stream.next()) {
      ++batches;
      last = b->images.dim(0);
      labels.insert(labels.end(), b->labels.begin(), b->labels.end());
    }
    CHECK(batches == 4);
    CHECK(last == 2);
    CHECK(labels == d.train.labels);
  }
  SUBCASE("seeded shuffle is a reproducible permutation") {
    auto collect = [&](std::uint64_t seed) {
      BatchStream stream(d.train, 3, seed, true);
      std::vector<int> labels;
      std::vector<float> firsts;
      while (auto b = stream.next()) {
        labels.insert(labels.end(), b->labels.begin(), b->labels.end());
        firsts.push_back(b->images[0]);
      }
      return std::make_pair(labels, firsts);
    };
    const auto a = collect(5), b = collect(5), c = collect(6);
    CHECK(a == b);
    CHECK(a.second != c.second);
    auto sorted = a.first, expected = d.train.labels;
    std::sort(sorted.begin(), sorted.end());
    std::sort(expected.begin(), expected.end());
    CHECK(sorted == expected);
  }
  CHECK_THROWS(BatchStream(d.train, 0, 1, false));
}
