#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "deepcap/errors.hpp"
#include "deepcap/model.hpp"
#include "oracles.hpp"

using namespace deepcap;
namespace fs = std::filesystem;

namespace {

std::vector<double> to_double(std::span<const float> p) { return {p.begin(), p.end()}; }

std::size_t caps_weights(int im, int id, int om, int od, int k = 3) {
  return static_cast<std::size_t>(im) * id * om * od * k * k;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "deepcap_model_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(ModelConfig, PresetsValidateAndRoundTripText) {
  for (const auto& name : preset_names()) {
    const ModelConfig c = preset_config(name);
    EXPECT_EQ(ModelConfig::from_text(c.to_text()), c) << name;
  }
  EXPECT_THROW(preset_config("nope"), ConfigError);
}

TEST(ModelConfig, InconsistentChainNamesStage) {
  ModelConfig c = preset_config("deepcap-tiny");
  c.up.pop_back();
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("head"), std::string::npos) << e.what();
  }
  ModelConfig even = preset_config("deepcap-tiny");
  even.kernel = 4;
  EXPECT_THROW(even.validate(), ConfigError);
}

TEST(Model, TinyParameterCountMatchesManualTally) {
  const ModelConfig c = preset_config("deepcap-tiny");
  std::size_t tally = 0;
  tally += 3 * 4 * 5 * 5 + 4;                                // hidden conv
  tally += 4 * 8 + 8;                                        // 1x1 expansion to 2 maps x 4 dims
  tally += caps_weights(2, 4, 2, 4) * 2;                     // down feature + downsample
  tally += caps_weights(2, 4, 2, 4);                         // up0 upsample
  tally += caps_weights(4, 4, 2, 4);                         // up0 conv after skip concat
  tally += caps_weights(2, 4, 2, 2) + caps_weights(2, 2, 2, 2);  // two plain upsamples
  tally += caps_weights(2, 2, 2, 2) + caps_weights(2, 2, 2, 1);  // head
  EXPECT_EQ(Model::build(c, 1).param_count(), tally);
}

TEST(Model, DefaultBudgetAndChannelDelta) {
  ModelConfig c = preset_config("deepcap-default");
  const std::size_t n3 = NetworkPlan::build(c).param_count;
  EXPECT_GE(n3, 4'500'000u);
  EXPECT_LE(n3, 5'500'000u);
  c.input_channels = 1;
  const std::size_t n1 = NetworkPlan::build(c).param_count;
  c.input_channels = 2;
  const std::size_t n2 = NetworkPlan::build(c).param_count;
  const std::size_t per_channel = static_cast<std::size_t>(c.primary_kernel) * c.primary_kernel * c.primary_hidden;
  EXPECT_EQ(n2 - n1, per_channel);
  EXPECT_EQ(n3 - n1, 2 * per_channel);
  EXPECT_EQ(per_channel, 800u);
}

TEST(Model, InitIsDeterministicAndSeedDependent) {
  const ModelConfig c = preset_config("deepcap-tiny");
  const Model a = Model::build(c, 5), b = Model::build(c, 5), d = Model::build(c, 6);
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  EXPECT_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), d.parameters().begin()));
  EXPECT_EQ(a.param_count(), d.param_count());
}

TEST(Model, TinyForwardMatchesStraightLineComposition) {
  const ModelConfig c = preset_config("deepcap-tiny");
  const Model m = Model::build(c, 3);
  const NetworkPlan& plan = m.plan();
  const auto params = to_double(m.parameters());
  std::span<const double> ps(params);
  oracle::rng().seed(77);
  const auto x = oracle::random_grid<double>(3, 32, 32, 0, 1);

  auto slot = [&](const std::string& name) {
    for (std::size_t i = 0; i < plan.slots.size(); ++i)
      if (plan.slots[i].name == name) return ps.subspan(plan.slots[i].offset, plan.slots[i].count);
    throw std::runtime_error("missing slot " + name);
  };
  Grid2D<double> hidden =
      conv2d(x, KernelRef<double>{4, 3, 5, slot("primary.hidden.weight"), slot("primary.hidden.bias")}, 4, 2);
  for (auto& v : hidden.values) v = std::max(v, 0.0);
  const auto prim =
      primary_capsules(hidden, KernelRef<double>{8, 4, 1, slot("primary.weight"), slot("primary.bias")}, 1, 0, 2, 4);
  auto conv = [&](const CapsuleGrid<double>& in, const char* name, CapsuleConvShape s) {
    return conv_capsule(in, CapsuleConvRef<double>{s, slot(name)}, 3);
  };
  auto up = [&](const CapsuleGrid<double>& in, const char* name, CapsuleConvShape s) {
    return upsample_capsule(in, CapsuleConvRef<double>{s, slot(name)}, UpsampleMode::Transposed, 3);
  };
  const auto f0 = conv(prim, "down0.feature.weight", {3, 1, 1, 2, 4, 2, 4});
  const auto d0 = conv(f0, "down0.downsample.weight", {3, 2, 1, 2, 4, 2, 4});
  const auto u0 = up(d0, "up0.upsample.weight", {3, 2, 1, 2, 4, 2, 4});
  const auto c0 = conv(concat_maps(u0, f0), "up0.conv0.weight", {3, 1, 1, 4, 4, 2, 4});
  const auto u1 = up(c0, "up1.upsample.weight", {3, 2, 1, 2, 4, 2, 2});
  const auto u2 = up(u1, "up2.upsample.weight", {3, 2, 1, 2, 2, 2, 2});
  const auto h0 = conv(u2, "head0.weight", {3, 1, 1, 2, 2, 2, 2});
  const auto h1 = conv(h0, "head1.weight", {3, 1, 1, 2, 2, 2, 1});
  ASSERT_EQ(h1.height, 32);
  Grid2D<double> logits(2, 32, 32);
  logits.values = h1.values;
  const auto blurred = depthwise_conv2d(logits, gaussian_kernel2d<double>(3, 2.0).ref(), 1);

  const auto got = network_forward<double>(plan, ps, x);
  ASSERT_EQ(got.channels, 2);
  const std::size_t n = 32 * 32;
  for (std::size_t p = 0; p < n; ++p) {
    const double pair[2] = {blurred.values[p], blurred.values[n + p]};
    const auto s = softmax_axis<double>(pair);
    EXPECT_NEAR(got.values[p], s[0], 1e-14);
    EXPECT_NEAR(got.values[n + p], s[1], 1e-14);
  }
}

TEST(Model, NetworkBackwardMatchesFiniteDifferences) {
  const ModelConfig c = preset_config("deepcap-tiny");
  const Model m = Model::build(c, 4);
  const NetworkPlan& plan = m.plan();
  const auto base = to_double(m.parameters());
  oracle::rng().seed(8);
  const auto x = oracle::random_grid<double>(3, 32, 32, 0, 1);
  const auto probe = oracle::random_grid<double>(2, 32, 32);
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < base.size(); i += 53) coords.push_back(i);
  std::vector<double> point;
  for (auto i : coords) point.push_back(base[i]);
  auto f = [&](std::span<const double> sub, std::span<double> g) {
    std::vector<double> p = base;
    for (std::size_t j = 0; j < coords.size(); ++j) p[coords[j]] = sub[j];
    ForwardCache<double> cache;
    const auto out = network_forward<double>(plan, p, x, &cache);
    double v = 0;
    for (std::size_t i = 0; i < out.size(); ++i) v += out.values[i] * probe.values[i];
    if (!g.empty()) {
      std::vector<double> full(p.size(), 0.0);
      network_backward<double>(plan, p, x, cache, probe, full);
      for (std::size_t j = 0; j < coords.size(); ++j) g[j] = full[coords[j]];
    }
    return v;
  };
  EXPECT_LT(grad_check(f, point, 1e-5).max_rel_error, 1e-4);
}

TEST(Model, SoftmaxHeadAndPredict) {
  const Model m = Model::build(preset_config("deepcap-tiny"), 9);
  oracle::rng().seed(10);
  for (int t = 0; t < 10; ++t) {
    const auto x = oracle::random_grid<float>(3, 32, 32, 0, 1);
    const auto probs = m.forward(x);
    const Mask mask = m.predict(x);
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      const float a = probs.values[p], b = probs.values[1024 + p];
      EXPECT_NEAR(double(a) + b, 1.0, 1e-6);
      EXPECT_GT(a, 0.0f);
      EXPECT_LT(a, 1.0f);
      EXPECT_EQ(mask.values[p], b > a ? 1 : 0);
    }
  }
  EXPECT_THROW(m.forward(Grid2D<float>(1, 32, 32)), DimensionError);
}

TEST(Model, TieGoesToBackground) {
  Grid2D<double> probs(2, 1, 2, 0.5);
  probs(0, 0, 1) = 0.4;
  probs(1, 0, 1) = 0.6;
  const Mask m = argmax_mask(probs);
  EXPECT_EQ(m(0, 0), 0);
  EXPECT_EQ(m(0, 1), 1);
}

TEST(Model, DisablingBlurChangesProbabilities) {
  ModelConfig c = preset_config("deepcap-tiny");
  const Model with = Model::build(c, 2);
  c.blur_enabled = false;
  const Model without = Model::from_parameters(c, {with.parameters().begin(), with.parameters().end()});
  oracle::rng().seed(12);
  const auto x = oracle::random_grid<float>(3, 32, 32, 0, 1);
  EXPECT_NE(with.forward(x).values, without.forward(x).values);
  for (auto v : without.predict(x).values) EXPECT_LE(v, 1);
}

TEST(Model, DefaultShapes) {
  const Model m = Model::build(preset_config("deepcap-default"), 1);
  oracle::rng().seed(13);
  const auto x = oracle::random_grid<float>(3, 256, 256, 0, 1);
  const auto caps = m.primary(x);
  EXPECT_EQ(caps.maps, 4);
  EXPECT_EQ(caps.height, 64);
  EXPECT_EQ(caps.width, 64);
  EXPECT_EQ(caps.dim, 16);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig c = preset_config("deepcap-tiny");
    c.input_variant = "ALL";
    const Model m = Model::build(c, seed);
    const auto path = temp_file("rt_" + std::to_string(seed) + ".dcap").string();
    save_checkpoint(m, path);
    const Model back = load_checkpoint(path);
    EXPECT_EQ(back.config(), m.config());
    ASSERT_EQ(back.param_count(), m.param_count());
    EXPECT_EQ(std::memcmp(back.parameters().data(), m.parameters().data(), 4 * m.param_count()), 0);
    EXPECT_EQ(disk_size(path), expected_checkpoint_size(c));
    EXPECT_EQ(disk_size(path), 16 + c.to_text().size() + 4 * m.param_count());
  }
}

namespace {

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointError::Kind load_error(const std::string& path) {
  try {
    load_checkpoint(path);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint unexpectedly loaded";
  return CheckpointError::Kind::NotACheckpoint;
}

}  // namespace

TEST(Checkpoint, RejectsDamagedFiles) {
  const Model m = Model::build(preset_config("deepcap-tiny"), 1);
  const auto path = temp_file("good.dcap").string();
  save_checkpoint(m, path);
  const auto good = slurp(path);
  const auto bad = temp_file("bad.dcap").string();

  auto flipped = good;
  flipped[good.size() - 100] ^= 0x10;
  spit(bad, flipped);
  EXPECT_EQ(load_error(bad), CheckpointError::Kind::CorruptPayload);

  spit(bad, std::vector<char>(good.begin(), good.end() - 37));
  EXPECT_EQ(load_error(bad), CheckpointError::Kind::CorruptPayload);

  auto magic = good;
  magic[0] = 'X';
  spit(bad, magic);
  EXPECT_EQ(load_error(bad), CheckpointError::Kind::NotACheckpoint);

  auto version = good;
  version[4] = 9;
  spit(bad, version);
  EXPECT_EQ(load_error(bad), CheckpointError::Kind::UnsupportedVersion);
}
