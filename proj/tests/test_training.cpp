#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "deepcap/csv.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/synth.hpp"
#include "deepcap/training.hpp"
#include "oracles.hpp"

using namespace deepcap;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec(std::uint64_t seed, int frames) {
  PhantomSpec s;
  s.seed = seed;
  s.n_frames = frames;
  s.side = 48;
  s.base_radius = 10;
  s.radius_amplitude = 2;
  s.center_drift = 2;
  s.wall_thickness = 5;
  return s;
}

const Dataset& small_dataset() {
  static const Dataset ds = [] {
    const fs::path dir = fs::temp_directory_path() / "deepcap_training_tests" / "data";
    fs::remove_all(dir);
    render_manifest(generate_dataset(small_spec(1, 12), 4), dir.string());
    return Dataset::load((dir / "manifest.tsv").string());
  }();
  return ds;
}

TrainOptions tiny_options() {
  TrainOptions o;
  o.batch_size = 3;
  o.epochs = 2;
  o.seed = 5;
  o.augment_options.crop = 32;
  o.double_precision = true;
  return o;
}

}  // namespace

TEST(Schedule, ShapeOfOneCycle) {
  ScheduleSpec s;
  s.total_steps = 300;
  const long we = warmup_end_step(s);
  EXPECT_EQ(we, 29);
  EXPECT_EQ(one_cycle_lr(we, s), 1e-3);
  EXPECT_DOUBLE_EQ(one_cycle_lr(0, s), 1e-3 / 25);
  EXPECT_NEAR(one_cycle_lr(299, s), 1e-3 / 1e4, 1e-18);
  int peaks = 0;
  double prev = one_cycle_lr(0, s), max_jump = 0;
  for (long t = 1; t < 300; ++t) {
    const double lr = one_cycle_lr(t, s);
    max_jump = std::max(max_jump, std::abs(lr - prev));
    if (t < 299 && lr >= prev && lr > one_cycle_lr(t + 1, s)) ++peaks;
    if (t <= we) EXPECT_GE(lr, prev);
    else EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_EQ(peaks, 1);
  EXPECT_LT(max_jump, 1e-4);
  EXPECT_THROW(one_cycle_lr(300, s), ParameterError);
}

TEST(Adam, MatchesScalarReference) {
  oracle::rng().seed(3);
  for (int seq = 0; seq < 100; ++seq) {
    double p = oracle::uniform(-1, 1), ref = p, m = 0, v = 0;
    AdamState st(1);
    for (int t = 1; t <= 20; ++t) {
      const double g = oracle::uniform(-2, 2), lr = oracle::uniform(1e-4, 1e-2);
      std::vector<double> pv{p}, gv{g};
      adam_step<double>(pv, gv, st, lr);
      p = pv[0];
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      ref = ref - lr * mh / (std::sqrt(vh) + 1e-8);
      ASSERT_NEAR(p, ref, 1e-12);
    }
  }
}

TEST(Adam, NonFiniteGradientLeavesStateUntouched) {
  std::vector<double> p{1.0, 2.0}, g{0.5, NAN};
  AdamState st(2);
  EXPECT_THROW(adam_step<double>(p, g, st, 0.1), NumericError);
  EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(st.step, 0);
}

TEST(Clip, GlobalNorm) {
  std::vector<double> g{3, 4};
  EXPECT_EQ(clip_global_norm<double>(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  std::vector<double> small{0.1};
  clip_global_norm<double>(small, 1.0);
  EXPECT_EQ(small[0], 0.1);
}

TEST(Split, RatiosWithinTenPoints) {
  oracle::rng().seed(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = oracle::uniform_int(10, 40);
    std::vector<std::size_t> sizes(n);
    for (auto& s : sizes) s = oracle::uniform_int(50, 150);
    const Split sp = split_dataset(sizes, SplitSpec{0.7, 0.2, 0.1, static_cast<std::uint64_t>(trial)});
    double total = 0, parts[3] = {0, 0, 0};
    for (auto s : sizes) total += s;
    const std::vector<std::size_t>* sets[3] = {&sp.train, &sp.val, &sp.test};
    std::vector<int> seen(n, 0);
    for (int k = 0; k < 3; ++k) {
      EXPECT_FALSE(sets[k]->empty());
      for (auto p : *sets[k]) {
        parts[k] += sizes[p];
        ++seen[p];
      }
    }
    for (int c : seen) EXPECT_EQ(c, 1);
    EXPECT_NEAR(parts[0] / total, 0.7, 0.1);
    EXPECT_NEAR(parts[1] / total, 0.2, 0.1);
    EXPECT_NEAR(parts[2] / total, 0.1, 0.1);
  }
}

TEST(Split, DeterministicAndNeedsThreePullbacks) {
  const std::vector<std::size_t> sizes{5, 9, 3, 7, 4};
  const Split a = split_dataset(sizes, {0.7, 0.2, 0.1, 9}), b = split_dataset(sizes, {0.7, 0.2, 0.1, 9});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_THROW(split_dataset({4, 4}, {}), DataError);
  const Split three = split_dataset({1, 1, 1}, {});
  EXPECT_EQ(three.train.size() + three.val.size() + three.test.size(), 3u);
}

TEST(Train, PatienceStopsAfterExactlyPatienceEpochs) {
  const Dataset& ds = small_dataset();
  const Split sp = split_dataset(ds.pullback_sizes(), {});
  TrainOptions o = tiny_options();
  o.double_precision = false;
  o.epochs = 10;
  o.patience = 3;
  o.val_loss_hook = [](int, double) { return 0.5; };
  const auto r = train(Model::build(preset_config("deepcap-tiny"), 1), ds, sp, o);
  EXPECT_EQ(r.report.epochs.size(), 4u);
  EXPECT_EQ(r.report.best_epoch, 1);
  EXPECT_EQ(r.report.stop_reason, "early_stopping");
}

TEST(Train, NeverStopsBeforePatienceAfterBest) {
  const Dataset& ds = small_dataset();
  const Split sp = split_dataset(ds.pullback_sizes(), {});
  TrainOptions o = tiny_options();
  o.double_precision = false;
  o.epochs = 8;
  o.patience = 2;
  const std::vector<double> losses{0.9, 0.8, 0.85, 0.7, 0.75, 0.74, 0.72, 0.71};
  o.val_loss_hook = [&](int e, double) { return losses[e - 1]; };
  const auto r = train(Model::build(preset_config("deepcap-tiny"), 1), ds, sp, o);
  EXPECT_EQ(r.report.best_epoch, 4);
  EXPECT_EQ(r.report.epochs.size(), 6u);
}

TEST(Train, DeterministicAtDoublePrecision) {
  const Dataset& ds = small_dataset();
  const Split sp = split_dataset(ds.pullback_sizes(), {});
  const Model init = Model::build(preset_config("deepcap-tiny"), 2);
  const auto a = train(init, ds, sp, tiny_options());
  const auto b = train(init, ds, sp, tiny_options());
  ASSERT_EQ(a.report.epochs.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.report.epochs[i].train_loss, b.report.epochs[i].train_loss);
    EXPECT_EQ(a.report.epochs[i].val_loss, b.report.epochs[i].val_loss);
  }
  EXPECT_TRUE(std::equal(a.model.parameters().begin(), a.model.parameters().end(), b.model.parameters().begin()));
  const fs::path dir = fs::temp_directory_path() / "deepcap_training_tests";
  write_train_report_csv(a.report, (dir / "a.csv").string());
  const auto rows = read_csv((dir / "a.csv").string());
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"epoch", "train_loss", "val_loss", "val_sds", "lr"}));
}

TEST(Train, VariantMustMatchChannels) {
  const Dataset& ds = small_dataset();
  TrainOptions o = tiny_options();
  o.variant = InputVariant::IM;
  EXPECT_THROW(train(Model::build(preset_config("deepcap-tiny"), 1), ds, split_dataset(ds.pullback_sizes(), {}), o),
               ConfigError);
}

TEST(Evaluate, OracleAndBackgroundPredictors) {
  const Dataset& ds = small_dataset();
  const auto frames = ds.frames_of({0, 1, 2, 3});
  const auto oracle_eval = evaluate(ds, frames, [](const Sample& s) { return s.mask; }, 20.0);
  EXPECT_EQ(oracle_eval.rows.size(), frames.size());
  EXPECT_NEAR(oracle_eval.sds.min, 1.0, 1e-9);
  EXPECT_EQ(oracle_eval.hausdorff_px.max, 0.0);
  const auto bg = evaluate(ds, frames, [](const Sample& s) { return Mask(s.mask.height, s.mask.width); }, 20.0);
  EXPECT_EQ(bg.sensitivity.max, 0.0);
  EXPECT_EQ(bg.specificity.min, 1.0);

  std::vector<double> sds;
  for (const auto& r : bg.rows) sds.push_back(r.metrics.sds);
  const auto s = summarize(sds);
  EXPECT_EQ(s.mean, bg.sds.mean);
  EXPECT_EQ(s.median, bg.sds.median);
  const std::string block = format_evaluation(oracle_eval);
  EXPECT_NE(block.find("median"), std::string::npos);

  const fs::path dir = fs::temp_directory_path() / "deepcap_training_tests";
  write_eval_csv(oracle_eval, (dir / "eval.csv").string());
  const auto rows = read_csv((dir / "eval.csv").string());
  EXPECT_EQ(rows[0], (std::vector<std::string>{"pullback_id", "frame_index", "sds", "sensitivity", "specificity",
                                               "hausdorff_px", "area_px", "area_mm2"}));
  EXPECT_EQ(rows.size(), frames.size() + 1);
}

TEST(Evaluate, ModelPredictorCropsTruth) {
  const Dataset& ds = small_dataset();
  const Model m = Model::build(preset_config("deepcap-tiny"), 3);
  const auto e = evaluate(ds, ds.frames_of({0}), model_predictor(m, InputVariant::ALL), 20.0);
  for (const auto& r : e.rows) {
    EXPECT_GE(r.metrics.sds, 0.0);
    EXPECT_LE(r.metrics.area_px, 32 * 32);
  }
}
