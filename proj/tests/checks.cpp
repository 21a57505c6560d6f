#include "checks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "deepcap/capsules.hpp"
#include "deepcap/metrics.hpp"
#include "oracles.hpp"

namespace checks {

using deepcap::CapsuleConvParams;
using deepcap::CapsuleConvShape;
using deepcap::CapsuleGrid;
using deepcap::Grid2D;
using deepcap::KernelStack;
using deepcap::Mask;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

CapsuleGrid<double> capsules_from(std::span<const double> x, int m, int h, int w, int d) {
  CapsuleGrid<double> g(m, h, w, d);
  std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(g.size()), g.values.begin());
  return g;
}

}  // namespace

KernelOracleResult kernel_oracles(int instances, unsigned seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  KernelOracleResult r;
  r.instances = instances;
  for (int n = 0; n < instances; ++n) {
    const int k = 2 * pick(0, 2) + 1;
    const int stride = pick(1, 2);
    const int pad = pick(0, k / 2);
    const int h = pick(std::max(1, k - 2 * pad), 8);
    const int w = pick(std::max(1, k - 2 * pad), 8);
    const int cin = pick(1, 3), cout = pick(1, 3);

    KernelStack<double> ks(cout, cin, k, true);
    ks.weights = random_vector(ks.weights.size(), rng);
    ks.bias = random_vector(ks.bias.size(), rng);
    Grid2D<double> x(cin, h, w);
    x.values = random_vector(x.size(), rng);

    const Grid2D<double> got = deepcap::conv2d(x, ks.ref(), stride, pad);
    const Grid2D<double> want = oracle::conv2d(x, ks, stride, pad);
    if (!got.same_shape(want) || got.values != want.values) ++r.conv_mismatches;

    Grid2D<double> y(cout, got.height, got.width);
    y.values = random_vector(y.size(), rng);
    KernelStack<double> tk = ks;
    tk.bias = random_vector(static_cast<std::size_t>(cin), rng);
    const Grid2D<double> gt = deepcap::conv2d_transpose(y, tk.ref(), stride, pad, std::pair{h, w});
    const Grid2D<double> wt = oracle::conv2d_transpose(y, tk, stride, pad, h, w);
    if (!gt.same_shape(wt) || gt.values != wt.values) ++r.transpose_mismatches;

    KernelStack<double> nb = ks;
    nb.bias.clear();
    const double lhs = dot(deepcap::conv2d(x, nb.ref(), stride, pad).values, y.values);
    const double rhs = dot(x.values, deepcap::conv2d_transpose(y, nb.ref(), stride, pad, std::pair{h, w}).values);
    const double gap = std::abs(lhs - rhs) / std::max(1.0, std::max(std::abs(lhs), std::abs(rhs)));
    r.worst_adjoint_gap = std::max(r.worst_adjoint_gap, gap);
  }
  return r;
}

std::vector<NamedGrad> gradient_suite(unsigned seed) {
  std::mt19937_64 rng(seed);
  std::vector<NamedGrad> out;

  {
    const int cin = 2, h = 8, w = 8, k = 3, stride = 2, pad = 1, maps = 2, dim = 3;
    const int oh = deepcap::conv_output_side(h, k, stride, pad);
    const std::size_t nx = static_cast<std::size_t>(cin) * h * w;
    const std::size_t nw = static_cast<std::size_t>(maps) * dim * cin * k * k;
    const std::size_t nb = static_cast<std::size_t>(maps) * dim;
    const auto probe = random_vector(static_cast<std::size_t>(maps) * oh * oh * dim, rng);
    std::vector<double> point = random_vector(nx, rng);
    const auto wv = random_vector(nw + nb, rng, -0.4, 0.4);
    point.insert(point.end(), wv.begin(), wv.end());
    auto f = [&](std::span<const double> x, std::span<double> grad) {
      Grid2D<double> in(cin, h, w);
      std::copy_n(x.begin(), nx, in.values.begin());
      const deepcap::KernelRef<double> kr{maps * dim, cin, k, x.subspan(nx, nw), x.subspan(nx + nw, nb)};
      const CapsuleGrid<double> caps = deepcap::primary_capsules(in, kr, stride, pad, maps, dim);
      double val = 0;
      for (std::size_t i = 0; i < caps.size(); ++i) val += probe[i] * caps.values[i];
      if (!grad.empty()) {
        CapsuleGrid<double> g(maps, oh, oh, dim);
        g.values = probe;
        std::fill(grad.begin(), grad.end(), 0.0);
        const Grid2D<double> gi = deepcap::primary_capsules_backward(in, kr, stride, pad, maps, dim, g,
                                                                     grad.subspan(nx, nw), grad.subspan(nx + nw, nb));
        std::copy(gi.values.begin(), gi.values.end(), grad.begin());
      }
      return val;
    };
    out.push_back({"primary_capsules", deepcap::grad_check(f, point)});
  }

  auto capsule_case = [&](const std::string& name, CapsuleConvShape s, int h, int w, int kind) {
    // kind 0 = conv_capsule, 1 = transposed upsample, 2 = bilinear upsample
    const std::size_t nx = static_cast<std::size_t>(s.in_maps) * h * w * s.in_dim;
    const std::size_t nw = s.weight_count();
    CapsuleGrid<double> in0(s.in_maps, h, w, s.in_dim);
    CapsuleConvParams<double> p0(s);
    std::vector<double> point = random_vector(nx, rng, -0.6, 0.6);
    const auto wv = random_vector(nw, rng, -0.6, 0.6);
    point.insert(point.end(), wv.begin(), wv.end());
    auto run = [&](const CapsuleGrid<double>& in, const deepcap::CapsuleConvRef<double>& pr) {
      if (kind == 0) return deepcap::conv_capsule(in, pr, 3);
      return deepcap::upsample_capsule(
          in, pr, kind == 1 ? deepcap::UpsampleMode::Transposed : deepcap::UpsampleMode::Bilinear, 3);
    };
    const CapsuleGrid<double> shape_probe = run(in0, p0.ref());
    const auto probe = random_vector(shape_probe.size(), rng);
    auto f = [&, nx, nw](std::span<const double> x, std::span<double> grad) {
      const CapsuleGrid<double> in = capsules_from(x, s.in_maps, h, w, s.in_dim);
      const deepcap::CapsuleConvRef<double> pr{s, x.subspan(nx, nw)};
      const CapsuleGrid<double> o = run(in, pr);
      double val = 0;
      for (std::size_t i = 0; i < o.size(); ++i) val += probe[i] * o.values[i];
      if (!grad.empty()) {
        CapsuleGrid<double> g = o;
        g.values = probe;
        std::fill(grad.begin(), grad.end(), 0.0);
        const CapsuleGrid<double> gi =
            kind == 0 ? deepcap::conv_capsule_backward(in, pr, 3, g, grad.subspan(nx, nw))
                      : deepcap::upsample_capsule_backward(
                            in, pr, kind == 1 ? deepcap::UpsampleMode::Transposed : deepcap::UpsampleMode::Bilinear,
                            3, g, grad.subspan(nx, nw));
        std::copy(gi.values.begin(), gi.values.end(), grad.begin());
      }
      return val;
    };
    out.push_back({name, deepcap::grad_check(f, point)});
  };
  capsule_case("conv_capsule stride 1", CapsuleConvShape{3, 1, 1, 2, 3, 2, 3}, 4, 4, 0);
  capsule_case("conv_capsule stride 2", CapsuleConvShape{3, 2, 1, 2, 3, 3, 2}, 5, 5, 0);
  capsule_case("upsample transposed", CapsuleConvShape{3, 2, 1, 2, 3, 2, 2}, 3, 3, 1);
  capsule_case("upsample bilinear", CapsuleConvShape{3, 2, 1, 2, 3, 2, 2}, 3, 3, 2);

  {
    const int h = 6, w = 6;
    const KernelStack<double> blur = deepcap::gaussian_kernel2d<double>(3, 2.0);
    const auto probe = random_vector(2 * h * w, rng);
    const std::vector<double> point = random_vector(2 * h * w, rng, -2, 2);
    auto f = [&](std::span<const double> x, std::span<double> grad) {
      Grid2D<double> logits(2, h, w);
      std::copy(x.begin(), x.end(), logits.values.begin());
      const Grid2D<double> b = deepcap::depthwise_conv2d(logits, blur.ref(), 1);
      Grid2D<double> probs(2, h, w), gprobs(2, h, w);
      for (int p = 0; p < h * w; ++p) {
        const double pair[2] = {b.values[p], b.values[h * w + p]};
        const auto s = deepcap::softmax_axis<double>(pair);
        probs.values[p] = s[0];
        probs.values[h * w + p] = s[1];
      }
      double val = 0;
      for (std::size_t i = 0; i < probs.size(); ++i) val += probe[i] * probs.values[i];
      if (!grad.empty()) {
        Grid2D<double> gb(2, h, w);
        for (int p = 0; p < h * w; ++p) {
          const double pr[2] = {probs.values[p], probs.values[h * w + p]};
          const double gp[2] = {probe[p], probe[h * w + p]};
          const auto g = deepcap::softmax_axis_backward<double>(pr, gp);
          gb.values[p] = g[0];
          gb.values[h * w + p] = g[1];
        }
        const Grid2D<double> gl = deepcap::depthwise_conv2d_backward(gb, blur.ref(), 1);
        std::copy(gl.values.begin(), gl.values.end(), grad.begin());
      }
      return val;
    };
    out.push_back({"blur + softmax head", deepcap::grad_check(f, point)});
  }

  {
    const std::size_t n = 64;
    const std::vector<double> point = random_vector(n, rng, 0.05, 0.95);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = (rng() & 1) ? 1.0 : 0.0;
    auto f = [&](std::span<const double> x, std::span<double> grad) {
      if (!grad.empty()) return deepcap::combined_loss_grad<double>(x, y, deepcap::kDefaultLambda, grad);
      return deepcap::combined_loss<double>(x, y, deepcap::kDefaultLambda);
    };
    out.push_back({"combined_loss", deepcap::grad_check(f, point)});
  }
  return out;
}

RoutingOracleResult routing_oracles(int windows, unsigned seed) {
  RoutingOracleResult r;
  {
    const std::vector<double> u = {0.3, -1.2, 0.7};
    const auto res = deepcap::route<double>(u, 1, 1, 3, 3);
    const auto want = deepcap::squash<double>(u);
    r.single_child = res.capsules == want && res.state.weights == std::vector<double>{1.0};
  }
  {
    // child-major, parent, dim: child 0 predicts u for both parents, child 1 predicts -u.
    const std::vector<double> u = {0.4, -0.8, 1.1, 0.4, -0.8, 1.1, -0.4, 0.8, -1.1, -0.4, 0.8, -1.1};
    deepcap::RoutingTrace<double> trace;
    const auto res = deepcap::route<double>(u, 2, 2, 3, 3, &trace);
    bool ok = std::all_of(res.capsules.begin(), res.capsules.end(), [](double v) { return v == 0.0; });
    for (const auto& c : trace.weights) ok = ok && std::all_of(c.begin(), c.end(), [](double v) { return v == 0.5; });
    r.opposing_pair = ok && trace.weights.size() == 3;
  }
  {
    const std::vector<double> uh = {0.5, 0.5, 0.5, 0.5};
    std::vector<double> u;
    for (int i = 0; i < 4; ++i) u.insert(u.end(), uh.begin(), uh.end());
    deepcap::RoutingTrace<double> trace;
    const auto res = deepcap::route<double>(u, 2, 2, 4, 3, &trace);
    bool ok = std::all_of(res.capsules.begin(), res.capsules.end(), [](double v) { return v == 0.25; });
    for (const auto& c : trace.weights) ok = ok && std::all_of(c.begin(), c.end(), [](double v) { return v == 0.5; });
    r.agreeing_pair = ok && trace.weights.size() == 3 && res.capsules.size() == 8;
  }
  std::mt19937_64 rng(seed);
  r.windows = windows;
  for (int wdx = 0; wdx < windows; ++wdx) {
    const int n = std::uniform_int_distribution<int>(1, 36)(rng);
    const int p = std::uniform_int_distribution<int>(1, 8)(rng);
    const int d = std::uniform_int_distribution<int>(1, 16)(rng);
    const auto u = random_vector(static_cast<std::size_t>(n) * p * d, rng, -2, 2);
    deepcap::RoutingTrace<double> trace;
    deepcap::route<double>(u, n, p, d, 3, &trace);
    for (const auto& c : trace.weights)
      for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < p; ++j) s += c[static_cast<std::size_t>(i) * p + j];
        r.worst_weight_sum_gap = std::max(r.worst_weight_sum_gap, std::abs(s - 1.0));
      }
  }
  return r;
}

SquashResult squash_law(int vectors, unsigned seed) {
  std::mt19937_64 rng(seed);
  SquashResult r;
  r.vectors = vectors;
  for (int i = 0; i < vectors; ++i) {
    const int d = std::uniform_int_distribution<int>(1, 32)(rng);
    const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-3, 3)(rng));
    auto p = random_vector(static_cast<std::size_t>(d), rng, -scale, scale);
    const auto v = deepcap::squash<double>(p);
    const double np = std::sqrt(dot(p, p)), nv = std::sqrt(dot(v, v));
    if (!(nv < 1.0)) ++r.norm_violations;
    if (np > 1e-6) r.worst_direction_gap = std::max(r.worst_direction_gap, 1.0 - dot(p, v) / (np * nv));
  }
  const std::vector<double> unit = {0.5, -0.5, 0.5, -0.5};
  const auto half = deepcap::squash<double>(unit);
  r.unit_gives_half = half == std::vector<double>{0.25, -0.25, 0.25, -0.25};
  const auto nine = deepcap::squash<double>(std::vector<double>{3, 0, 0, 0});
  r.three_gives_nine_tenths = nine == std::vector<double>{0.9, 0, 0, 0};
  return r;
}

MetricOracleResult metric_oracles(int pairs, unsigned seed) {
  oracle::rng().seed(seed);
  MetricOracleResult r;
  r.pairs = pairs;
  for (int i = 0; i < pairs; ++i) {
    const Mask a = oracle::random_mask(16, 16, oracle::uniform(0.2, 0.8));
    Mask b = oracle::random_mask(16, 16, oracle::uniform(0.2, 0.8));
    if (std::none_of(b.values.begin(), b.values.end(), [](auto v) { return v != 0; })) b(3, 3) = 1;
    long tp = 0, fp = 0, fn = 0, tn = 0, sa = 0, sb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const bool pa = a.values[k], pb = b.values[k];
      tp += pa && pb;
      fp += pa && !pb;
      fn += !pa && pb;
      tn += !pa && !pb;
      sa += pa;
      sb += pb;
    }
    const double dice = (2.0 * tp + deepcap::kDiceEps) / (double(sa + sb) + deepcap::kDiceEps);
    if (deepcap::soft_dice(a, b) != dice) ++r.dice_mismatches;
    const auto ss = deepcap::sensitivity_specificity(a, b);
    const double sens = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
    const double spec = tn + fp == 0 ? 1.0 : double(tn) / double(tn + fp);
    if (ss.sensitivity != sens || ss.specificity != spec) ++r.sens_spec_mismatches;
    if (deepcap::hausdorff(a, b) != oracle::hausdorff(a, b)) ++r.hausdorff_mismatches;
  }
  Mask sq(16, 16);
  for (int y = 2; y < 8; ++y)
    for (int x = 2; x < 8; ++x) sq(y, x) = 1;
  r.identical = deepcap::hausdorff(sq, sq);
  Mask p1(16, 16), p2(16, 16);
  p1(4, 4) = 1;
  p2(7, 8) = 1;
  r.single_pixels = deepcap::hausdorff(p1, p2);
  Mask shifted(16, 16);
  for (int y = 5; y < 11; ++y)
    for (int x = 2; x < 8; ++x) shifted(y, x) = 1;
  r.shifted_square = deepcap::hausdorff(sq, shifted);
  return r;
}

}  // namespace checks
