#include <gtest/gtest.h>

#include <cmath>

#include "checks.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/metrics.hpp"
#include "oracles.hpp"

using namespace deepcap;

TEST(MetricOracles, RandomPairsMatchBruteForce) {
  const auto r = checks::metric_oracles(50, 21);
  EXPECT_EQ(r.dice_mismatches, 0);
  EXPECT_EQ(r.hausdorff_mismatches, 0);
  EXPECT_EQ(r.sens_spec_mismatches, 0);
  EXPECT_EQ(r.identical, 0.0);
  EXPECT_EQ(r.single_pixels, 5.0);
  EXPECT_EQ(r.shifted_square, 3.0);
}

TEST(SoftDice, WorkedValues) {
  std::vector<double> y(100, 0.0), p(100, 0.5);
  for (int i = 0; i < 50; ++i) y[i] = 1;
  EXPECT_DOUBLE_EQ(soft_dice<double>(p, y), (50 + kDiceEps) / (100 + kDiceEps));
  EXPECT_NEAR(soft_dice<double>(y, y), 1.0, 1e-6);
  std::vector<double> q(100, 0.0);
  for (int i = 50; i < 100; ++i) q[i] = 1;
  EXPECT_DOUBLE_EQ(soft_dice<double>(q, y), kDiceEps / (100 + kDiceEps));
}

TEST(Bce, WorkedValues) {
  std::vector<double> y(10, 0.0), half(10, 0.5);
  for (int i = 0; i < 5; ++i) y[i] = 1;
  EXPECT_NEAR(bce<double>(half, y), std::log(2.0), 1e-15);
  EXPECT_LE(bce<double>(y, y), 1e-6);
  std::vector<double> ones(4, 1.0), zeros(4, 0.0);
  EXPECT_NEAR(bce<double>(zeros, ones), -std::log(1e-7), 1e-9);
}

TEST(CombinedLoss, ComposesBceAndDice) {
  std::vector<double> y(100, 0.0), half(100, 0.5);
  for (int i = 0; i < 50; ++i) y[i] = 1;
  EXPECT_NEAR(combined_loss<double>(half, y, 0.05), std::log(2.0) + 0.05 * 0.5, 1e-8);
  EXPECT_EQ(combined_loss<double>(half, y, 0.0), bce<double>(half, y));
  EXPECT_LE(combined_loss<double>(y, y, 0.05), 1e-6);
}

TEST(CombinedLoss, GradientAtRandomInteriorPoints) {
  oracle::rng().seed(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(30), y(30);
    for (auto& v : p) v = oracle::uniform(0.02, 0.98);
    for (auto& v : y) v = oracle::uniform(0, 1) < 0.4 ? 1 : 0;
    auto f = [&](std::span<const double> x, std::span<double> g) {
      if (!g.empty()) return combined_loss_grad<double>(x, y, 0.05, g);
      return combined_loss<double>(x, y, 0.05);
    };
    EXPECT_LT(grad_check(f, p, 1e-6).max_rel_error, 1e-6);
  }
}

TEST(SensSpec, HandCountedConfusion) {
  // 4x4 grid with TP=6, FN=2, TN=5, FP=3.
  Mask pred(4, 4), truth(4, 4);
  int k = 0;
  auto set = [&](int n, bool p, bool t) {
    for (int i = 0; i < n; ++i, ++k) {
      pred.values[k] = p;
      truth.values[k] = t;
    }
  };
  set(6, true, true);
  set(2, false, true);
  set(5, false, false);
  set(3, true, false);
  const auto ss = sensitivity_specificity(pred, truth);
  EXPECT_EQ(ss.sensitivity, 0.75);
  EXPECT_EQ(ss.specificity, 0.625);
  const auto c = confusion(pred, truth);
  EXPECT_EQ(c.tp, 6);
  EXPECT_EQ(c.fn, 2);
  EXPECT_EQ(c.tn, 5);
  EXPECT_EQ(c.fp, 3);
  Mask inv = truth;
  for (auto& v : inv.values) v = !v;
  const auto zero = sensitivity_specificity(inv, truth);
  EXPECT_EQ(zero.sensitivity, 0.0);
  EXPECT_EQ(zero.specificity, 0.0);
}

TEST(SensSpec, EmptyClassConvention) {
  Mask none(3, 3), all(3, 3, 1);
  EXPECT_EQ(sensitivity_specificity(none, none).sensitivity, 1.0);
  EXPECT_EQ(sensitivity_specificity(all, all).specificity, 1.0);
}

TEST(Hausdorff, SymmetryAndDilation) {
  oracle::rng().seed(41);
  for (int t = 0; t < 20; ++t) {
    const Mask a = oracle::random_mask(20, 20, 0.3);
    Mask b = oracle::random_mask(20, 20, 0.3);
    EXPECT_EQ(hausdorff(a, b), hausdorff(b, a));
  }
  Mask disk(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) disk(y, x) = (y - 15.5) * (y - 15.5) + (x - 15.5) * (x - 15.5) < 80;
  Mask dil = disk;
  for (int y = 1; y < 31; ++y)
    for (int x = 1; x < 31; ++x)
      if (disk(y - 1, x) || disk(y + 1, x) || disk(y, x - 1) || disk(y, x + 1)) dil(y, x) = 1;
  EXPECT_LE(hausdorff(disk, dil), std::sqrt(2.0));
  EXPECT_THROW(hausdorff(Mask(4, 4), Mask(4, 4, 1)), DataError);
}

TEST(LumenArea, UnitArithmetic) {
  Mask m(20, 20);
  for (int i = 0; i < 100; ++i) m.values[i] = 1;
  const auto a = lumen_area(m, 50.0);
  EXPECT_EQ(a.pixels, 100);
  EXPECT_DOUBLE_EQ(a.mm2, 0.25);
  EXPECT_EQ(lumen_area(Mask(5, 5), 10).mm2, 0.0);
  EXPECT_DOUBLE_EQ(lumen_area(Mask(256, 256, 1), 20).mm2, 65536 * 0.02 * 0.02);
}

TEST(ComputeMetrics, EmptyMaskFallbacks) {
  const auto both = compute_metrics(Mask(8, 8), Mask(8, 8), 10);
  EXPECT_EQ(both.hausdorff_px, 0.0);
  Mask one(6, 8);
  one(2, 2) = 1;
  EXPECT_DOUBLE_EQ(compute_metrics(Mask(6, 8), one, 10).hausdorff_px, 10.0);
}

TEST(Summary, StatsAndFormat) {
  const auto s = summarize({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(1.25));
  EXPECT_EQ(s.min, 1);
  EXPECT_EQ(s.max, 4);
  EXPECT_EQ(format_summary(summarize({0.5, 0.5})), "0.5000 ± 0.0000 | median 0.5000 | min-max 0.5000-0.5000");
}
