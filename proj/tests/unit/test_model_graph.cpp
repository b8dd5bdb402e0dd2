#include <cstdio>
#include <filesystem>
#include <fstream>

#include "deepobf/model_io.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace deepobf;

namespace {

// One 3x3 conv on a 1x3x3 image followed by flatten + linear.
ModelGraph toy_conv_linear() {
  ModelGraph m;
  m.input = {1, 3, 3};
  m.classes = 2;
  BlockSpec b1{"b1", BlockRole::feature, {oracle::conv_node("b1_conv", "@in", 1, 1, 3, 1, 0)}};
  LayerSpec flat;
  flat.id = "head_flat";
  flat.kind = LayerKind::flatten;
  flat.inputs = {"@in"};
  LayerSpec fc;
  fc.id = "head_fc";
  fc.kind = LayerKind::linear;
  fc.inputs = {"head_flat"};
  fc.in_channels = 1;
  fc.out_channels = 2;
  m.blocks = {b1, BlockSpec{"head", BlockRole::classifier, {flat, fc}}};
  m.params["b1_conv.weight"] = TensorF({1, 1, 3, 3}, {1, 0, -1, 2, 0, -2, 1, 0, -1});
  m.params["b1_conv.bias"] = TensorF({1}, {0.5f});
  m.params["head_fc.weight"] = TensorF({2, 1}, {2.0f, -1.0f});
  m.params["head_fc.bias"] = TensorF({2}, {0.0f, 3.0f});
  validate(m);
  return m;
}

TensorF random_input(const ModelGraph& m, Index batch, std::uint64_t seed) {
  Rng rng = make_rng(seed, "input");
  return oracle::random_tensor<float>({batch, m.input.channels, m.input.height, m.input.width}, rng, 0.0, 1.0);
}

TensorF classifier_forward(const ModelGraph& m, const TensorF& features) {
  const BlockSpec& head = m.classifier();
  const LayerSpec& fc = head.nodes.back();
  const TensorF pooled = global_avgpool(features);
  return linear(pooled, LinearParams<float>{m.params.at(fc.id + ".weight"), m.params.at(fc.id + ".bias")});
}

// One SGD step over every trainable parameter.
void train_step(ModelGraph& m, const TensorF& x, const std::vector<int>& labels) {
  Tape tape(m, Mode::train);
  tape.zero_grad();
  const TensorF& logits = tape.run(x);
  auto loss = softmax_cross_entropy(logits, std::span<const int>(labels));
  tape.backward({{m.blocks.size() - 1, loss.grad}});
  Sgd<float> sgd({0.1, 0.9, 0.0});
  for (const auto& key : tape.trainable_keys()) sgd.step(key, m.params.at(key));
}

}  // namespace

TEST_CASE("toy conv + linear forward matches hand computation") {
  const ModelGraph m = toy_conv_linear();
  const TensorF x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  // Sobel-like kernel: (1-3) + 2(4-6) + (7-9) = -8, plus bias 0.5.
  const float feature = -7.5f;
  const TensorF logits = forward(m, x);
  CHECK(logits == TensorF({1, 2}, {2.0f * feature, -feature + 3.0f}));
  const TensorF tap = forward_to_block(m, x, "b1");
  const ConvParams<float> p{m.params.at("b1_conv.weight"), m.params.at("b1_conv.bias"), 1, 0};
  CHECK(tap == conv2d(x, p));
  CHECK_THROWS_AS(forward_to_block(m, x, "nope"), GraphError);
  CHECK_THROWS_AS(forward_to_block(m, x, "head"), GraphError);
}

TEST_CASE("classifier-only model is an affine map") {
  ModelGraph m = toy_conv_linear();
  m.blocks.erase(m.blocks.begin());
  m.params.erase("b1_conv.weight");
  m.params.erase("b1_conv.bias");
  m.input = {1, 1, 1};
  validate(m);
  const TensorF x({1, 1, 1, 1}, {4.0f});
  CHECK(forward(m, x) == TensorF({1, 2}, {8.0f, -1.0f}));
}

TEST_CASE("inference is deterministic and composes block by block") {
  const ModelGraph m = mini_inception_teacher(5);
  const TensorF x = random_input(m, 3, 1);
  const TensorF a = forward(m, x), b = forward(m, x);
  CHECK(a == b);
  const TensorF features = forward_to_block(m, x, "b4");
  CHECK((classifier_forward(m, features).values() - a.values()).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("tap extents follow the declared block outputs") {
  const std::vector<std::string> menu{"incep:8", "res:6", "conv:4:3:2", "lin2:5", "maxpool:2", "avgpool:2",
                                      "conv:6:5:1", "res:4"};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, "graphs");
    std::vector<std::string> blocks;
    const Index n = oracle::uniform_int(rng, 1, 4);
    int pools = 0;
    while (static_cast<Index>(blocks.size()) < n) {
      const auto& d = menu[static_cast<std::size_t>(oracle::uniform_int(rng, 0, 7))];
      if (d.find("pool") != std::string::npos || d == "conv:4:3:2") {
        if (pools == 2) continue;
        ++pools;
      }
      blocks.push_back(d);
    }
    const ModelGraph m = build_model({3, 16, 16}, 3, blocks, seed);
    const TensorF x = random_input(m, 2, seed);
    Shape shape = m.input.shape();
    for (std::size_t b = 0; b < m.feature_block_count(); ++b) {
      shape = infer_block_output(m.blocks[b], shape);
      const TensorF tap = forward_to_block(m, x, m.blocks[b].name);
      CHECK(Shape(tap.shape().begin() + 1, tap.shape().end()) == shape);
      CHECK(block_interface(m, m.blocks[b].name).output == shape);
    }
  }
}

TEST_CASE("validation rejects malformed graphs") {
  ModelGraph m = mini_inception_teacher(1);
  SUBCASE("dangling input") {
    m.blocks[0].nodes[2].inputs[0] = "missing";
    CHECK_THROWS_AS(validate(m), GraphError);
  }
  SUBCASE("channel closure") {
    m.blocks[1].nodes[0].in_channels = 7;
    CHECK_THROWS(validate(m));
  }
  SUBCASE("classifier must be last") {
    std::swap(m.blocks[0], m.blocks.back());
    CHECK_THROWS_AS(validate(m), GraphError);
  }
  SUBCASE("parameter extent") {
    m.params.at("b1_b1x1.weight") = TensorF({1, 1, 1, 1});
    CHECK_THROWS(validate(m));
  }
  SUBCASE("missing parameter") {
    m.params.erase("b2_bn.gamma");
    CHECK_THROWS_AS(validate(m), GraphError);
  }
  SUBCASE("frozen ids") {
    m.frozen.insert("b1_relu");
    CHECK_THROWS_AS(validate(m), GraphError);
    m.frozen.clear();
    CHECK_THROWS_AS(freeze(m, {"ghost"}), GraphError);
    CHECK_THROWS_AS(unfreeze(m, {"ghost"}), GraphError);
  }
  SUBCASE("concat needs two inputs") {
    m.blocks[0].nodes[2].inputs.pop_back();
    CHECK_THROWS_AS(validate(m), GraphError);
  }
}

TEST_CASE("replace_block") {
  const ModelGraph m = mini_inception_teacher(3);
  const TensorF x = random_input(m, 2, 4);

  SUBCASE("identical copy keeps outputs bit-identical") {
    const BlockSpec copy = m.block("b2");
    ParamStore params;
    for (const auto& id : block_node_ids(copy)) {
      for (const auto& [k, v] : m.params) {
        if (k.rfind(id + ".", 0) == 0) params[k] = v;
      }
    }
    const ModelGraph r = replace_block(m, "b2", copy, params);
    CHECK(forward(r, x) == forward(m, x));
  }
  SUBCASE("interface mismatch names both channel counts") {
    BlockSpec wrong = conv_block("sim", 16, 24, 3, 1);
    Rng rng = make_rng(1, "sim");
    try {
      replace_block(m, "b2", wrong, init_block_params(wrong, rng));
      FAIL("expected a ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("32") != std::string::npos);
      CHECK(msg.find("24") != std::string::npos);
    }
  }
  SUBCASE("downsampling is part of the interface") {
    BlockSpec strided = conv_block("sim", 16, 32, 3, 2);
    Rng rng = make_rng(1, "sim");
    CHECK_THROWS_AS(replace_block(m, "b2", strided, init_block_params(strided, rng)), ShapeError);
  }
  SUBCASE("splice locality and smaller simulators") {
    BlockSpec small = conv_block("sim", 16, 32, 1, 1);
    Rng rng = make_rng(2, "sim");
    const ModelGraph r = replace_block(m, "b2", small, init_block_params(small, rng));
    for (const auto& [k, v] : m.params) {
      if (k.rfind("b2_", 0) == 0) {
        CHECK(r.params.count(k) == 0);
      } else {
        CHECK(r.params.at(k) == v);
      }
    }
    CHECK(param_bytes(r) < param_bytes(m));
    // Blocks below the splice are untouched.
    CHECK(forward_to_block(r, x, "b1") == forward_to_block(m, x, "b1"));
  }
  SUBCASE("classifier cannot be replaced") {
    CHECK_THROWS_AS(replace_block(m, "head", m.classifier(), {}), GraphError);
  }
}

TEST_CASE("linear pair replaced by its collapse") {
  const ModelGraph m = build_model({3, 12, 12}, 3, {"conv:6:3:1", "lin2:6", "conv:8:3:1"}, 9);
  const BlockSpec& pair = m.block("b2");
  const ConvParams<float> c = collapse_linear_block(pair, m.params);
  CHECK(c.kernel_h() == 5);
  BlockSpec single{"b2c", BlockRole::feature, {oracle::conv_node("b2c_conv", "@in", 6, 6, 5, c.stride, c.padding)}};
  const ModelGraph r = replace_block(m, "b2", single, {{"b2c_conv.weight", c.weight}, {"b2c_conv.bias", c.bias}});
  const TensorF x = random_input(m, 2, 5);
  CHECK((forward(r, x).values() - forward(m, x).values()).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("parameter counting") {
  BlockSpec b{"b1", BlockRole::feature, {oracle::conv_node("c", "@in", 2, 4, 3, 1, 1)}};
  CHECK(param_count(b) == 76);
  ModelGraph m;
  m.input = {2, 4, 4};
  m.classes = 1;
  m.blocks = {b};
  Rng rng = make_rng(1, "count");
  m.params = init_block_params(b, rng);
  CHECK(param_count(m) == 76);
  CHECK(param_bytes(m) == 304);
  // Running statistics are buffers.
  CHECK(param_count(conv_block("x", 2, 4, 3, 1)) == 76 + 8);
}

TEST_CASE("freezing is exact") {
  ModelGraph m = mini_inception_teacher(7);
  const TensorF x = random_input(m, 4, 8);
  const std::vector<int> labels{0, 1, 2, 3};
  freeze_all(m);
  const ParamStore before = m.params;
  for (int i = 0; i < 3; ++i) train_step(m, x, labels);
  for (const auto& [k, v] : before) CHECK(m.params.at(k) == v);

  // Frozen batch-norm keeps its statistics; unfrozen ones move.
  unfreeze_all(m);
  freeze(m, {"b1_bn"});
  train_step(m, x, labels);
  CHECK(m.params.at("b1_bn.running_mean") == before.at("b1_bn.running_mean"));
  CHECK(m.params.at("b1_bn.gamma") == before.at("b1_bn.gamma"));
  CHECK_FALSE(m.params.at("b2_bn.running_mean") == before.at("b2_bn.running_mean"));
  CHECK_FALSE(m.params.at("b1_b1x1.weight") == before.at("b1_b1x1.weight"));
}

TEST_CASE("gradients flow through frozen nodes") {
  ModelGraph m = mini_inception_teacher(7);
  freeze(m, parameterized_nodes(m));
  unfreeze(m, {"b1_b3x3"});
  const TensorF x = random_input(m, 2, 8);
  const ParamStore before = m.params;
  train_step(m, x, {0, 1});
  CHECK_FALSE(m.params.at("b1_b3x3.weight") == before.at("b1_b3x3.weight"));
  CHECK(m.params.at("head_fc.weight") == before.at("head_fc.weight"));
}

TEST_CASE("tape gradients agree with finite differences of the model") {
  ModelGraph m = build_model({2, 6, 6}, 3, {"incep:4", "res:4"}, 3);
  const TensorF x = random_input(m, 4, 2);
  const std::vector<int> labels{0, 1, 2, 1};
  auto loss_of = [&](ModelGraph& g) {
    ModelGraph copy = g;
    return softmax_cross_entropy(forward(copy, x, Mode::train), std::span<const int>(labels)).value;
  };
  Tape tape(m, Mode::train);
  tape.zero_grad();
  ModelGraph probe = m;
  const TensorF& logits = tape.run(x);
  tape.backward({{m.blocks.size() - 1, softmax_cross_entropy(logits, std::span<const int>(labels)).grad}});
  for (const std::string key : {"b1_b3x3.weight", "b2_c2.weight", "b2_bn1.gamma", "head_fc.bias"}) {
    TensorF& p = probe.params.at(key);
    for (Index i = 0; i < std::min<Index>(p.size(), 6); ++i) {
      const float keep = p[i];
      p[i] = keep + 1e-3f;
      const double up = loss_of(probe);
      p[i] = keep - 1e-3f;
      const double down = loss_of(probe);
      p[i] = keep;
      const double numeric = (up - down) / 2e-3;
      INFO(key << "[" << i << "]");
      CHECK(m.params.at(key).grad()[i] == doctest::Approx(numeric).epsilon(0.02).scale(0.01));
    }
  }
}

TEST_CASE("model files round-trip") {
  const ModelGraph m = [] {
    ModelGraph g = mini_inception_teacher(11);
    freeze(g, {"b1_b1x1"});
    return g;
  }();
  const auto dir = std::filesystem::temp_directory_path() / "deepobf_io_test";
  std::filesystem::create_directories(dir);
  save(m, dir / "a.dobf");
  const ModelGraph loaded = load(dir / "a.dobf");
  save(loaded, dir / "b.dobf");
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(bytes(dir / "a.dobf") == bytes(dir / "b.dobf"));
  CHECK(loaded.blocks == m.blocks);
  CHECK(loaded.frozen == m.frozen);
  CHECK(loaded.params == m.params);
  const TensorF x = random_input(m, 2, 3);
  CHECK(forward(loaded, x) == forward(m, x));
  CHECK(model_hash(loaded) == model_hash(m));
  CHECK(parse_structure(structure_text(m)).blocks == m.blocks);
  CHECK(read_structure_section(dir / "a.dobf") == structure_text(m));

  const auto full = serialize(m);
  auto kind_of = [](std::vector<std::uint8_t> b) {
    try {
      deserialize(b);
    } catch (const ModelFileError& e) {
      return e.kind();
    }
    FAIL("expected a ModelFileError");
    return ModelFileError::Kind::io;
  };
  CHECK(kind_of({full.begin(), full.begin() + static_cast<long>(full.size() / 2)}) ==
        ModelFileError::Kind::truncated);
  CHECK(kind_of({full.begin(), full.begin() + 6}) == ModelFileError::Kind::truncated);
  auto corrupt = full;
  corrupt[corrupt.size() - 10] ^= 0x40;
  CHECK(kind_of(corrupt) == ModelFileError::Kind::checksum);
  auto magic = full;
  magic[0] = 'X';
  CHECK(kind_of(magic) == ModelFileError::Kind::bad_magic);
  auto version = full;
  version[4] = 9;
  CHECK(kind_of(version) == ModelFileError::Kind::version_mismatch);
  CHECK_THROWS_AS(load(dir / "missing.dobf"), ModelFileError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("crc32 and fnv reference values") {
  const std::string s = "123456789";
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  CHECK(crc32(bytes) == 0xCBF43926u);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}
