#include "deepcap/capsules.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>

#include "deepcap/parallel.hpp"

namespace deepcap {

UpsampleMode parse_upsample_mode(std::string_view text) {
  if (text == "transposed") return UpsampleMode::Transposed;
  if (text == "bilinear") return UpsampleMode::Bilinear;
  throw ParameterError("unknown upsample mode '" + std::string(text) + "' (expected transposed|bilinear)");
}

std::string to_string(UpsampleMode mode) { return mode == UpsampleMode::Transposed ? "transposed" : "bilinear"; }

void CapsuleConvShape::validate() const {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("capsule layer: kernel side must be odd and positive");
  if (stride < 1) throw ConfigError("capsule layer: stride must be >= 1");
  if (padding < 0) throw ConfigError("capsule layer: padding must be >= 0");
  if (in_maps < 1 || in_dim < 1 || out_maps < 1 || out_dim < 1) {
    throw ConfigError("capsule layer: map counts and dimensions must be positive");
  }
}

namespace {

constexpr double kSquashGuard = 1e-12;

template <typename T>
void squash_raw(const T* p, T* out, int n) {
  T n2{0};
  for (int i = 0; i < n; ++i) n2 += p[i] * p[i];
  const T norm = std::sqrt(n2);
  if (norm < static_cast<T>(kSquashGuard)) {
    std::fill(out, out + n, T{0});
    return;
  }
  const T factor = n2 / (1 + n2);
  for (int i = 0; i < n; ++i) out[i] = factor * (p[i] / norm);
}

template <typename T>
void squash_backward_raw(const T* p, const T* gv, T* gp, int n) {
  T n2{0};
  T pg{0};
  for (int i = 0; i < n; ++i) {
    n2 += p[i] * p[i];
    pg += p[i] * gv[i];
  }
  const T norm = std::sqrt(n2);
  const T denom = 1 + n2;
  const T g = norm / denom;
  if (norm < static_cast<T>(kSquashGuard)) {
    for (int i = 0; i < n; ++i) gp[i] = g * gv[i];
    return;
  }
  // v = g(|p|) p with g(r) = r / (1 + r^2); dv/dp = g I + g'(r)/r p p^T.
  const T gprime_over_r = (1 - n2) / (denom * denom * norm);
  for (int i = 0; i < n; ++i) gp[i] = g * gv[i] + gprime_over_r * pg * p[i];
}

// Capsule vectors inside the routing core are zero-padded to a lane multiple
// so every inner loop has a fixed width. Zero tails leave norms, dot products
// and weighted sums unchanged. The padded width is a template parameter for
// the common sizes (0 selects the runtime-width fallback).
inline int lane_padded(int d) { return d <= 4 ? 4 : (d + 7) / 8 * 8; }

template <int DP>
inline constexpr int kLanes = DP == 4 ? 4 : 8;

template <int L, typename T>
struct LaneVector {
  typedef T type __attribute__((vector_size(L * sizeof(T))));
};

template <int L, typename T>
inline typename LaneVector<L, T>::type load_lanes(const T* p) {
  typename LaneVector<L, T>::type v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <int L, typename T>
inline void axpy_lanes(T a, const T* x, T* y, int len) {
  using V = typename LaneVector<L, T>::type;
  for (int q = 0; q < len; q += L) {
    V yv = load_lanes<L>(y + q);
    yv += a * load_lanes<L>(x + q);
    std::memcpy(y + q, &yv, sizeof yv);
  }
}

template <int L, typename T>
inline T dot_lanes(const T* a, const T* b, int len) {
  using V = typename LaneVector<L, T>::type;
  V acc = {};
  for (int q = 0; q < len; q += L) acc += load_lanes<L>(a + q) * load_lanes<L>(b + q);
  T lanes[L];
  std::memcpy(lanes, &acc, sizeof acc);
  for (int w = L / 2; w >= 1; w /= 2) {
    for (int r = 0; r < w; ++r) lanes[r] += lanes[r + w];
  }
  return lanes[0];
}

template <int L, typename T>
void squash_lanes(const T* p, T* out, int len) {
  const T n2 = dot_lanes<L>(p, p, len);
  const T norm = std::sqrt(n2);
  if (norm < static_cast<T>(kSquashGuard)) {
    std::fill(out, out + len, T{0});
    return;
  }
  const T scale = n2 / (1 + n2) / norm;
  for (int i = 0; i < len; ++i) out[i] = scale * p[i];
}

template <int L, typename T>
void squash_backward_lanes(const T* p, const T* gv, T* gp, int len) {
  const T n2 = dot_lanes<L>(p, p, len);
  const T pg = dot_lanes<L>(p, gv, len);
  const T norm = std::sqrt(n2);
  const T denom = 1 + n2;
  const T g = norm / denom;
  if (norm < static_cast<T>(kSquashGuard)) {
    for (int i = 0; i < len; ++i) gp[i] = g * gv[i];
    return;
  }
  const T k = (1 - n2) / (denom * denom * norm) * pg;
  for (int i = 0; i < len; ++i) gp[i] = g * gv[i] + k * p[i];
}

template <typename F>
decltype(auto) with_padded_dim(int dp, F&& f) {
  switch (dp) {
    case 4: return f(std::integral_constant<int, 4>{});
    case 8: return f(std::integral_constant<int, 8>{});
    case 16: return f(std::integral_constant<int, 16>{});
    case 24: return f(std::integral_constant<int, 24>{});
    case 32: return f(std::integral_constant<int, 32>{});
    case 48: return f(std::integral_constant<int, 48>{});
    default: return f(std::integral_constant<int, 0>{});
  }
}

template <typename F>
decltype(auto) with_parent_count(int parents, F&& f) {
  switch (parents) {
    case 1: return f(std::integral_constant<int, 1>{});
    case 2: return f(std::integral_constant<int, 2>{});
    case 4: return f(std::integral_constant<int, 4>{});
    case 8: return f(std::integral_constant<int, 8>{});
    default: return f(std::integral_constant<int, 0>{});
  }
}

// Runs f(DP, NP) with compile-time padded width and parent count where available.
template <typename F>
decltype(auto) with_routing_shape(int dp, int parents, F&& f) {
  return with_padded_dim(dp, [&](auto d) { return with_parent_count(parents, [&](auto p) { return f(d, p); }); });
}

// Scratch storage reused across cells of one layer call.
template <typename T>
struct RoutingScratch {
  std::vector<T> logits;   // [n][P]
  std::vector<T> weights;  // [iters][n][P]
  std::vector<T> pre;      // [iters][P][dp]
  std::vector<T> caps;     // [iters][P][dp]

  void reserve(int n, int parents, int dp, int iters) {
    const std::size_t np = static_cast<std::size_t>(n) * parents;
    const std::size_t pd = static_cast<std::size_t>(parents) * dp;
    if (logits.size() < np) logits.resize(np);
    if (weights.size() < np * iters) weights.resize(np * iters);
    if (pre.size() < pd * iters) pre.resize(pd * iters);
    if (caps.size() < pd * iters) caps.resize(pd * iters);
  }
};

// Routing loop over lane-padded predictions [n][P][dp]. Keeps every
// iteration's coupling weights, pre-activations and capsules in the scratch
// and writes the final capsules ([P][dp]) to out.
template <typename T, int DP, int NP>
void route_core(const T* pred, int n, int parents_rt, int dp_rt, int iters, RoutingScratch<T>& s, T* out) {
  constexpr int L = kLanes<DP>;
  const int parents = NP > 0 ? NP : parents_rt;
  const int dp = DP > 0 ? DP : dp_rt;
  s.reserve(n, parents, dp, iters);
  const std::size_t np = static_cast<std::size_t>(n) * parents;
  const std::size_t pd = static_cast<std::size_t>(parents) * dp;
  T* logits = s.logits.data();
  std::fill(logits, logits + np, T{0});

  for (int t = 0; t < iters; ++t) {
    T* c = s.weights.data() + t * np;
    T* pre = s.pre.data() + t * pd;
    T* v = s.caps.data() + t * pd;

    if (t == 0) {
      std::fill(c, c + np, T{1} / static_cast<T>(parents));
    } else if (parents == 1) {
      std::fill(c, c + np, T{1});
    } else {
      for (int i = 0; i < n; ++i) {
        const T* b = logits + static_cast<std::size_t>(i) * parents;
        T* ci = c + static_cast<std::size_t>(i) * parents;
        T peak = b[0];
        for (int j = 1; j < parents; ++j) peak = std::max(peak, b[j]);
        T total{0};
        for (int j = 0; j < parents; ++j) {
          ci[j] = std::exp(b[j] - peak);
          total += ci[j];
        }
        const T inv = T{1} / total;
        for (int j = 0; j < parents; ++j) ci[j] *= inv;
      }
    }

    std::fill(pre, pre + pd, T{0});
    for (int i = 0; i < n; ++i) {
      const T* ui = pred + static_cast<std::size_t>(i) * pd;
      const T* ci = c + static_cast<std::size_t>(i) * parents;
      for (int j = 0; j < parents; ++j) axpy_lanes<L>(ci[j], ui + j * dp, pre + j * dp, dp);
    }
    for (int j = 0; j < parents; ++j) squash_lanes<L>(pre + j * dp, v + j * dp, dp);

    // Agreement update b += u_hat . v.
    for (int i = 0; i < n; ++i) {
      const T* ui = pred + static_cast<std::size_t>(i) * pd;
      T* b = logits + static_cast<std::size_t>(i) * parents;
      for (int j = 0; j < parents; ++j) b[j] += dot_lanes<L>(ui + j * dp, v + j * dp, dp);
    }
  }
  std::copy(s.caps.data() + (iters - 1) * pd, s.caps.data() + iters * pd, out);
}

// Backward through an already executed route_core (the scratch must hold its
// trace). Writes dL/dpred into grad_pred.
template <typename T, int DP, int NP>
void route_backward_core(const T* pred, int n, int parents_rt, int dp_rt, int iters, const RoutingScratch<T>& s,
                         const T* grad_out, T* grad_pred, std::vector<T>& work) {
  constexpr int L = kLanes<DP>;
  const int parents = NP > 0 ? NP : parents_rt;
  const int dp = DP > 0 ? DP : dp_rt;
  const std::size_t np = static_cast<std::size_t>(n) * parents;
  const std::size_t pd = static_cast<std::size_t>(parents) * dp;
  if (work.size() < np * 2 + pd * 2) work.resize(np * 2 + pd * 2);
  T* db = work.data();  // dL/d b^{t+1}
  T* dc = db + np;
  T* dv = dc + np;
  T* ds = dv + pd;
  std::fill(db, db + np, T{0});
  std::fill(grad_pred, grad_pred + n * pd, T{0});

  for (int t = iters - 1; t >= 0; --t) {
    const T* c = s.weights.data() + t * np;
    const T* pre = s.pre.data() + t * pd;
    const T* v = s.caps.data() + t * pd;

    if (t == iters - 1) {
      std::copy(grad_out, grad_out + pd, dv);
    } else {
      // b^{t+1} = b^t + u_hat . v^t
      std::fill(dv, dv + pd, T{0});
      for (int i = 0; i < n; ++i) {
        const T* ui = pred + static_cast<std::size_t>(i) * pd;
        T* gi = grad_pred + static_cast<std::size_t>(i) * pd;
        const T* dbi = db + static_cast<std::size_t>(i) * parents;
        for (int j = 0; j < parents; ++j) {
          axpy_lanes<L>(dbi[j], ui + j * dp, dv + j * dp, dp);
          axpy_lanes<L>(dbi[j], v + j * dp, gi + j * dp, dp);
        }
      }
    }

    for (int j = 0; j < parents; ++j) squash_backward_lanes<L>(pre + j * dp, dv + j * dp, ds + j * dp, dp);

    // c^0 is constant, so the coupling gradient stops at t = 1.
    for (int i = 0; i < n; ++i) {
      const T* ui = pred + static_cast<std::size_t>(i) * pd;
      T* gi = grad_pred + static_cast<std::size_t>(i) * pd;
      const T* ci = c + static_cast<std::size_t>(i) * parents;
      for (int j = 0; j < parents; ++j) axpy_lanes<L>(ci[j], ds + j * dp, gi + j * dp, dp);
      if (t == 0 || parents == 1) continue;
      T* dci = dc + static_cast<std::size_t>(i) * parents;
      T weighted{0};
      for (int j = 0; j < parents; ++j) {
        dci[j] = dot_lanes<L>(ds + j * dp, ui + j * dp, dp);
        weighted += ci[j] * dci[j];
      }
      T* dbi = db + static_cast<std::size_t>(i) * parents;
      for (int j = 0; j < parents; ++j) dbi[j] += ci[j] * (dci[j] - weighted);
    }
  }
}

template <typename T>
std::vector<T> pad_vectors(std::span<const T> src, std::size_t count, int dim, int dp) {
  std::vector<T> out(count * dp, T{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(i * dim), src.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim),
              out.begin() + static_cast<std::ptrdiff_t>(i * dp));
  }
  return out;
}

template <typename T>
std::vector<T> unpad_vectors(std::span<const T> src, std::size_t count, int dim, int dp) {
  std::vector<T> out(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(i * dp), src.begin() + static_cast<std::ptrdiff_t>(i * dp + dim),
              out.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return out;
}

// Transformation weights repacked as [in_map][ky][kx][in_dim][out_map][dp].
template <typename T>
struct PaddedWeights {
  int dp = 0;
  std::size_t pdp = 0;    // out_maps * dp
  std::size_t block = 0;  // in_dim * pdp, one (in_map, ky, kx) tap
  std::vector<T> values;

  PaddedWeights(const CapsuleConvShape& sh, std::span<const T> w) {
    dp = lane_padded(sh.out_dim);
    pdp = static_cast<std::size_t>(sh.out_maps) * dp;
    block = static_cast<std::size_t>(sh.in_dim) * pdp;
    const std::size_t rows = static_cast<std::size_t>(sh.in_maps) * sh.kernel * sh.kernel * sh.in_dim * sh.out_maps;
    values.assign(rows * dp, T{0});
    if (w.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(w.begin() + static_cast<std::ptrdiff_t>(r * sh.out_dim),
                w.begin() + static_cast<std::ptrdiff_t>((r + 1) * sh.out_dim),
                values.begin() + static_cast<std::ptrdiff_t>(r * dp));
    }
  }

  void unpack_add(const CapsuleConvShape& sh, std::span<T> w) const {
    const std::size_t rows = values.size() / static_cast<std::size_t>(dp);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int d = 0; d < sh.out_dim; ++d) w[r * sh.out_dim + d] += values[r * dp + d];
    }
  }
};

// One child of an output cell: its capsule and the index of its weight tap.
template <typename T>
struct Child {
  const T* capsule;
  std::size_t tap;
  std::size_t capsule_offset;
};

template <typename T>
int gather_conv_children(const CapsuleGrid<T>& in, const CapsuleConvShape& sh, int oy, int ox, Child<T>* out) {
  int n = 0;
  for (int i = 0; i < sh.in_maps; ++i) {
    for (int ky = 0; ky < sh.kernel; ++ky) {
      const int iy = oy * sh.stride - sh.padding + ky;
      if (iy < 0 || iy >= in.height) continue;
      for (int kx = 0; kx < sh.kernel; ++kx) {
        const int ix = ox * sh.stride - sh.padding + kx;
        if (ix < 0 || ix >= in.width) continue;
        const std::size_t off = in.offset(i, iy, ix);
        out[n++] = {in.values.data() + off, (static_cast<std::size_t>(i) * sh.kernel + ky) * sh.kernel + kx, off};
      }
    }
  }
  return n;
}

// Children of output (oy, ox) under the transposed stencil: input cell (iy, ix)
// with kernel tap (ky, kx) lands on oy = iy * stride - padding + ky.
template <typename T>
int gather_transposed_children(const CapsuleGrid<T>& in, const CapsuleConvShape& sh, int oy, int ox,
                               Child<T>* out) {
  int n = 0;
  for (int i = 0; i < sh.in_maps; ++i) {
    for (int ky = 0; ky < sh.kernel; ++ky) {
      const int ty = oy + sh.padding - ky;
      if (ty < 0 || ty % sh.stride != 0) continue;
      const int iy = ty / sh.stride;
      if (iy >= in.height) continue;
      for (int kx = 0; kx < sh.kernel; ++kx) {
        const int tx = ox + sh.padding - kx;
        if (tx < 0 || tx % sh.stride != 0) continue;
        const int ix = tx / sh.stride;
        if (ix >= in.width) continue;
        const std::size_t off = in.offset(i, iy, ix);
        out[n++] = {in.values.data() + off, (static_cast<std::size_t>(i) * sh.kernel + ky) * sh.kernel + kx, off};
      }
    }
  }
  return n;
}

template <typename T, int DP, int NP>
void predict(const Child<T>* children, int n, const PaddedWeights<T>& w, int in_dim, int parents_rt, T* pred) {
  constexpr int L = kLanes<DP>;
  const int parents = NP > 0 ? NP : parents_rt;
  const int dp = DP > 0 ? DP : w.dp;
  std::fill(pred, pred + static_cast<std::size_t>(n) * w.pdp, T{0});
  for (int c = 0; c < n; ++c) {
    T* out = pred + static_cast<std::size_t>(c) * w.pdp;
    const T* u = children[c].capsule;
    const T* wc = w.values.data() + children[c].tap * w.block;
    for (int d = 0; d < in_dim; ++d) {
      const T* wd = wc + static_cast<std::size_t>(d) * w.pdp;
      for (int j = 0; j < parents; ++j) axpy_lanes<L>(u[d], wd + j * dp, out + j * dp, dp);
    }
  }
}

template <typename T, bool Transposed, int DP, int NP>
void routed_layer_forward_impl(const CapsuleGrid<T>& in, const CapsuleConvShape& sh, const PaddedWeights<T>& w,
                               int iterations, CapsuleGrid<T>& out) {
  const int max_children = sh.in_maps * sh.kernel * sh.kernel;
  parallel_for(0, static_cast<std::size_t>(out.height), [&](std::size_t row) {
    const int oy = static_cast<int>(row);
    std::vector<Child<T>> children(max_children);
    std::vector<T> pred(static_cast<std::size_t>(max_children) * w.pdp);
    std::vector<T> v(w.pdp);
    RoutingScratch<T> scratch;
    for (int ox = 0; ox < out.width; ++ox) {
      const int n = Transposed ? gather_transposed_children(in, sh, oy, ox, children.data())
                               : gather_conv_children(in, sh, oy, ox, children.data());
      if (n == 0) {
        std::fill(v.begin(), v.end(), T{0});
      } else {
        predict<T, DP, NP>(children.data(), n, w, sh.in_dim, sh.out_maps, pred.data());
        route_core<T, DP, NP>(pred.data(), n, sh.out_maps, w.dp, iterations, scratch, v.data());
      }
      for (int j = 0; j < sh.out_maps; ++j) {
        const auto src = v.begin() + static_cast<std::ptrdiff_t>(j) * w.dp;
        std::copy(src, src + sh.out_dim, out.capsule(j, oy, ox).begin());
      }
    }
  });
}

template <typename T, bool Transposed>
CapsuleGrid<T> routed_layer_forward(const CapsuleGrid<T>& in, CapsuleConvRef<T> params, int iterations, int out_h,
                                    int out_w) {
  const PaddedWeights<T> w(params.shape, params.weights);
  CapsuleGrid<T> out(params.shape.out_maps, out_h, out_w, params.shape.out_dim);
  with_routing_shape(w.dp, params.shape.out_maps, [&](auto dp, auto np) {
    routed_layer_forward_impl<T, Transposed, decltype(dp)::value, decltype(np)::value>(in, params.shape, w,
                                                                                        iterations, out);
  });
  return out;
}

template <typename T, bool Transposed, int DP, int NP>
void routed_layer_backward_impl(const CapsuleGrid<T>& in, const CapsuleConvShape& sh, const PaddedWeights<T>& w,
                                int iterations, const CapsuleGrid<T>& grad_out, CapsuleGrid<T>& grad_in,
                                PaddedWeights<T>* gw) {
  constexpr int L = kLanes<DP>;
  const int max_children = sh.in_maps * sh.kernel * sh.kernel;
  std::vector<Child<T>> children(max_children);
  std::vector<T> pred(static_cast<std::size_t>(max_children) * w.pdp);
  std::vector<T> gpred(static_cast<std::size_t>(max_children) * w.pdp);
  std::vector<T> v(w.pdp), gv(w.pdp, T{0}), work;
  RoutingScratch<T> scratch;
  const int pdp = static_cast<int>(w.pdp);

  for (int oy = 0; oy < grad_out.height; ++oy) {
    for (int ox = 0; ox < grad_out.width; ++ox) {
      bool any = false;
      for (int j = 0; j < sh.out_maps; ++j) {
        auto g = grad_out.capsule(j, oy, ox);
        std::copy(g.begin(), g.end(), gv.begin() + static_cast<std::ptrdiff_t>(j) * w.dp);
        for (T x : g) any = any || x != T{0};
      }
      if (!any) continue;
      const int n = Transposed ? gather_transposed_children(in, sh, oy, ox, children.data())
                               : gather_conv_children(in, sh, oy, ox, children.data());
      if (n == 0) continue;
      predict<T, DP, NP>(children.data(), n, w, sh.in_dim, sh.out_maps, pred.data());
      route_core<T, DP, NP>(pred.data(), n, sh.out_maps, w.dp, iterations, scratch, v.data());
      route_backward_core<T, DP, NP>(pred.data(), n, sh.out_maps, w.dp, iterations, scratch, gv.data(), gpred.data(),
                                 work);

      for (int c = 0; c < n; ++c) {
        const T* gp = gpred.data() + static_cast<std::size_t>(c) * w.pdp;
        const T* u = children[c].capsule;
        const T* wc = w.values.data() + children[c].tap * w.block;
        T* gu = grad_in.values.data() + children[c].capsule_offset;
        for (int d = 0; d < sh.in_dim; ++d) gu[d] += dot_lanes<L>(wc + static_cast<std::size_t>(d) * w.pdp, gp, pdp);
        if (gw) {
          T* gwc = gw->values.data() + children[c].tap * w.block;
          for (int d = 0; d < sh.in_dim; ++d) axpy_lanes<L>(u[d], gp, gwc + static_cast<std::size_t>(d) * w.pdp, pdp);
        }
      }
    }
  }
}

template <typename T, bool Transposed>
CapsuleGrid<T> routed_layer_backward(const CapsuleGrid<T>& in, CapsuleConvRef<T> params, int iterations,
                                     const CapsuleGrid<T>& grad_out, std::span<T> grad_weights) {
  const CapsuleConvShape& sh = params.shape;
  const bool want_w = !grad_weights.empty();
  if (want_w && grad_weights.size() != sh.weight_count()) {
    throw DimensionError("capsule backward: grad_weights size mismatch");
  }
  const PaddedWeights<T> w(sh, params.weights);
  PaddedWeights<T> gw(sh, {});
  CapsuleGrid<T> grad_in(in.maps, in.height, in.width, in.dim);
  with_routing_shape(w.dp, sh.out_maps, [&](auto dp, auto np) {
    routed_layer_backward_impl<T, Transposed, decltype(dp)::value, decltype(np)::value>(
        in, sh, w, iterations, grad_out, grad_in, want_w ? &gw : nullptr);
  });
  if (want_w) gw.unpack_add(sh, grad_weights);
  return grad_in;
}

template <typename T>
void check_layer_input(const CapsuleGrid<T>& in, CapsuleConvRef<T> params, int iterations, const char* what) {
  params.shape.validate();
  if (iterations < 1) throw ParameterError(std::string(what) + ": routing iterations must be >= 1");
  if (in.maps != params.shape.in_maps || in.dim != params.shape.in_dim) {
    throw ConfigError(std::string(what) + ": input grid is (" + std::to_string(in.maps) + " maps, dim " +
                      std::to_string(in.dim) + "), layer expects (" + std::to_string(params.shape.in_maps) +
                      ", " + std::to_string(params.shape.in_dim) + ")");
  }
  if (params.weights.size() != params.shape.weight_count()) {
    throw ConfigError(std::string(what) + ": weight count mismatch");
  }
}

template <typename T>
std::pair<int, int> conv_capsule_output(const CapsuleGrid<T>& in, const CapsuleConvShape& sh) {
  if (sh.kernel > in.height + 2 * sh.padding || sh.kernel > in.width + 2 * sh.padding) {
    throw DimensionError("conv_capsule: kernel larger than padded grid");
  }
  return {conv_output_side(in.height, sh.kernel, sh.stride, sh.padding),
          conv_output_side(in.width, sh.kernel, sh.stride, sh.padding)};
}

CapsuleConvShape bilinear_conv_shape(const CapsuleConvShape& sh) {
  CapsuleConvShape s = sh;
  s.stride = 1;
  s.padding = sh.kernel / 2;
  return s;
}

}  // namespace

template <std::floating_point T>
void squash(std::span<const T> p, std::span<T> out) {
  if (out.size() != p.size()) throw DimensionError("squash: output size mismatch");
  squash_raw(p.data(), out.data(), static_cast<int>(p.size()));
}

template <std::floating_point T>
std::vector<T> squash(std::span<const T> p) {
  std::vector<T> out(p.size());
  squash_raw(p.data(), out.data(), static_cast<int>(p.size()));
  return out;
}

template <std::floating_point T>
void squash_backward(std::span<const T> p, std::span<const T> grad_v, std::span<T> grad_p) {
  if (grad_v.size() != p.size() || grad_p.size() != p.size()) throw DimensionError("squash_backward: size mismatch");
  squash_backward_raw(p.data(), grad_v.data(), grad_p.data(), static_cast<int>(p.size()));
}

template <std::floating_point T>
RoutingResult<T> route(std::span<const T> predictions, int children, int parents, int dim, int iterations,
                       RoutingTrace<T>* trace) {
  if (iterations < 1) throw ParameterError("route: iterations must be >= 1");
  if (children < 1 || parents < 1 || dim < 1) throw ParameterError("route: sizes must be positive");
  const std::size_t np = static_cast<std::size_t>(children) * parents;
  const std::size_t pd = static_cast<std::size_t>(parents) * dim;
  if (predictions.size() != np * dim) throw DimensionError("route: prediction count mismatch");
  if (!all_finite(predictions)) throw NumericError("route: non-finite prediction");

  const int dp = lane_padded(dim);
  const std::size_t pdp = static_cast<std::size_t>(parents) * dp;
  const std::vector<T> padded = pad_vectors<T>(predictions, np, dim, dp);
  RoutingScratch<T> scratch;
  std::vector<T> v(pdp);
  with_padded_dim(dp, [&](auto w) {
    route_core<T, decltype(w)::value, 0>(padded.data(), children, parents, dp, iterations, scratch, v.data());
  });

  RoutingResult<T> result;
  result.capsules = unpad_vectors<T>(v, parents, dim, dp);
  result.state.children = children;
  result.state.parents = parents;
  result.state.iterations = iterations;
  result.state.logits.assign(scratch.logits.begin(), scratch.logits.begin() + static_cast<std::ptrdiff_t>(np));
  result.state.weights.assign(scratch.weights.begin() + static_cast<std::ptrdiff_t>((iterations - 1) * np),
                              scratch.weights.begin() + static_cast<std::ptrdiff_t>(iterations * np));
  if (trace) {
    trace->weights.clear();
    trace->preactivation.clear();
    trace->capsules.clear();
    for (int t = 0; t < iterations; ++t) {
      const auto w0 = scratch.weights.begin() + static_cast<std::ptrdiff_t>(t * np);
      trace->weights.emplace_back(w0, w0 + static_cast<std::ptrdiff_t>(np));
      trace->preactivation.push_back(
          unpad_vectors<T>(std::span<const T>(scratch.pre).subspan(t * pdp, pdp), parents, dim, dp));
      trace->capsules.push_back(
          unpad_vectors<T>(std::span<const T>(scratch.caps).subspan(t * pdp, pdp), parents, dim, dp));
    }
  }
  (void)pd;
  return result;
}

template <std::floating_point T>
std::vector<T> route_backward(std::span<const T> predictions, int children, int parents, int dim, int iterations,
                              std::span<const T> grad_capsules) {
  if (iterations < 1) throw ParameterError("route_backward: iterations must be >= 1");
  const std::size_t np = static_cast<std::size_t>(children) * parents;
  if (predictions.size() != np * dim) throw DimensionError("route_backward: prediction count mismatch");
  if (grad_capsules.size() != static_cast<std::size_t>(parents) * dim) {
    throw DimensionError("route_backward: gradient size mismatch");
  }
  const int dp = lane_padded(dim);
  const std::vector<T> padded = pad_vectors<T>(predictions, np, dim, dp);
  const std::vector<T> grad_out = pad_vectors<T>(grad_capsules, static_cast<std::size_t>(parents), dim, dp);
  RoutingScratch<T> scratch;
  std::vector<T> v(static_cast<std::size_t>(parents) * dp), work, grad(padded.size());
  with_padded_dim(dp, [&](auto w) {
    constexpr int DP = decltype(w)::value;
    route_core<T, DP, 0>(padded.data(), children, parents, dp, iterations, scratch, v.data());
    route_backward_core<T, DP, 0>(padded.data(), children, parents, dp, iterations, scratch, grad_out.data(), grad.data(),
                               work);
  });
  return unpad_vectors<T>(grad, np, dim, dp);
}

template <std::floating_point T>
CapsuleGrid<T> primary_capsules(const Grid2D<T>& input, KernelRef<T> params, int stride, int padding, int maps,
                                int dim) {
  if (maps < 1 || dim < 1 || params.out_channels != maps * dim) {
    throw ConfigError("primary_capsules: kernel produces " + std::to_string(params.out_channels) +
                      " channels, need maps*dim = " + std::to_string(maps * dim));
  }
  const Grid2D<T> conv = conv2d(input, params, stride, padding);
  CapsuleGrid<T> out(maps, conv.height, conv.width, dim);
  std::vector<T> p(dim);
  for (int m = 0; m < maps; ++m) {
    for (int y = 0; y < conv.height; ++y) {
      for (int x = 0; x < conv.width; ++x) {
        for (int d = 0; d < dim; ++d) p[d] = conv(m * dim + d, y, x);
        squash_raw(p.data(), out.values.data() + out.offset(m, y, x), dim);
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> primary_capsules_backward(const Grid2D<T>& input, KernelRef<T> params, int stride, int padding, int maps,
                                    int dim, const CapsuleGrid<T>& grad_output, std::span<T> grad_weights,
                                    std::span<T> grad_bias) {
  const Grid2D<T> conv = conv2d(input, params, stride, padding);
  if (grad_output.maps != maps || grad_output.dim != dim || grad_output.height != conv.height ||
      grad_output.width != conv.width) {
    throw DimensionError("primary_capsules_backward: gradient shape mismatch");
  }
  Grid2D<T> grad_conv(conv.channels, conv.height, conv.width);
  std::vector<T> p(dim), gp(dim);
  for (int m = 0; m < maps; ++m) {
    for (int y = 0; y < conv.height; ++y) {
      for (int x = 0; x < conv.width; ++x) {
        for (int d = 0; d < dim; ++d) p[d] = conv(m * dim + d, y, x);
        squash_backward_raw(p.data(), grad_output.values.data() + grad_output.offset(m, y, x), gp.data(), dim);
        for (int d = 0; d < dim; ++d) grad_conv(m * dim + d, y, x) = gp[d];
      }
    }
  }
  return conv2d_backward(input, params, stride, padding, grad_conv, grad_weights, grad_bias);
}

template <std::floating_point T>
CapsuleGrid<T> conv_capsule(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, int iterations) {
  check_layer_input(input, params, iterations, "conv_capsule");
  if (!all_finite<T>(input.values)) throw NumericError("conv_capsule: non-finite input");
  const auto [oh, ow] = conv_capsule_output(input, params.shape);
  return routed_layer_forward<T, false>(input, params, iterations, oh, ow);
}

template <std::floating_point T>
CapsuleGrid<T> conv_capsule_backward(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, int iterations,
                                     const CapsuleGrid<T>& grad_output, std::span<T> grad_weights) {
  check_layer_input(input, params, iterations, "conv_capsule_backward");
  const auto [oh, ow] = conv_capsule_output(input, params.shape);
  if (grad_output.height != oh || grad_output.width != ow || grad_output.maps != params.shape.out_maps ||
      grad_output.dim != params.shape.out_dim) {
    throw DimensionError("conv_capsule_backward: gradient shape mismatch");
  }
  return routed_layer_backward<T, false>(input, params, iterations, grad_output, grad_weights);
}

template <std::floating_point T>
CapsuleGrid<T> upsample_capsule(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, UpsampleMode mode,
                                int iterations) {
  check_layer_input(input, params, iterations, "upsample_capsule");
  if (!all_finite<T>(input.values)) throw NumericError("upsample_capsule: non-finite input");
  const int factor = params.shape.stride;
  const int oh = input.height * factor;
  const int ow = input.width * factor;
  switch (mode) {
    case UpsampleMode::Transposed:
      return routed_layer_forward<T, true>(input, params, iterations, oh, ow);
    case UpsampleMode::Bilinear: {
      const CapsuleGrid<T> resized = resize_capsules_bilinear(input, oh, ow);
      const CapsuleConvRef<T> conv{bilinear_conv_shape(params.shape), params.weights};
      return routed_layer_forward<T, false>(resized, conv, iterations, oh, ow);
    }
  }
  throw ParameterError("upsample_capsule: unknown mode");
}

template <std::floating_point T>
CapsuleGrid<T> upsample_capsule_backward(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, UpsampleMode mode,
                                         int iterations, const CapsuleGrid<T>& grad_output,
                                         std::span<T> grad_weights) {
  check_layer_input(input, params, iterations, "upsample_capsule_backward");
  const int factor = params.shape.stride;
  if (grad_output.height != input.height * factor || grad_output.width != input.width * factor ||
      grad_output.maps != params.shape.out_maps || grad_output.dim != params.shape.out_dim) {
    throw DimensionError("upsample_capsule_backward: gradient shape mismatch");
  }
  switch (mode) {
    case UpsampleMode::Transposed:
      return routed_layer_backward<T, true>(input, params, iterations, grad_output, grad_weights);
    case UpsampleMode::Bilinear: {
      const CapsuleGrid<T> resized = resize_capsules_bilinear(input, grad_output.height, grad_output.width);
      const CapsuleConvRef<T> conv{bilinear_conv_shape(params.shape), params.weights};
      const CapsuleGrid<T> g = routed_layer_backward<T, false>(resized, conv, iterations, grad_output, grad_weights);
      return resize_capsules_bilinear_backward(g, input.height, input.width);
    }
  }
  throw ParameterError("upsample_capsule_backward: unknown mode");
}

template <std::floating_point T>
CapsuleGrid<T> resize_capsules_bilinear(const CapsuleGrid<T>& input, int out_h, int out_w) {
  CapsuleGrid<T> out(input.maps, out_h, out_w, input.dim);
  const int D = input.dim;
  for (int m = 0; m < input.maps; ++m) {
    for (int y = 0; y < out_h; ++y) {
      const LerpTap ty = corner_aligned_tap(y, out_h, input.height);
      const T fy = static_cast<T>(ty.frac);
      for (int x = 0; x < out_w; ++x) {
        const LerpTap tx = corner_aligned_tap(x, out_w, input.width);
        const T fx = static_cast<T>(tx.frac);
        const T* a = input.values.data() + input.offset(m, ty.lo, tx.lo);
        const T* b = input.values.data() + input.offset(m, ty.lo, tx.hi);
        const T* c = input.values.data() + input.offset(m, ty.hi, tx.lo);
        const T* e = input.values.data() + input.offset(m, ty.hi, tx.hi);
        T* o = out.values.data() + out.offset(m, y, x);
        for (int d = 0; d < D; ++d) {
          const T top = a[d] * (1 - fx) + b[d] * fx;
          const T bot = c[d] * (1 - fx) + e[d] * fx;
          o[d] = top * (1 - fy) + bot * fy;
        }
      }
    }
  }
  return out;
}

template <std::floating_point T>
CapsuleGrid<T> resize_capsules_bilinear_backward(const CapsuleGrid<T>& grad_output, int in_h, int in_w) {
  CapsuleGrid<T> grad_in(grad_output.maps, in_h, in_w, grad_output.dim);
  const int D = grad_output.dim;
  for (int m = 0; m < grad_output.maps; ++m) {
    for (int y = 0; y < grad_output.height; ++y) {
      const LerpTap ty = corner_aligned_tap(y, grad_output.height, in_h);
      const T fy = static_cast<T>(ty.frac);
      for (int x = 0; x < grad_output.width; ++x) {
        const LerpTap tx = corner_aligned_tap(x, grad_output.width, in_w);
        const T fx = static_cast<T>(tx.frac);
        const T* g = grad_output.values.data() + grad_output.offset(m, y, x);
        T* a = grad_in.values.data() + grad_in.offset(m, ty.lo, tx.lo);
        T* b = grad_in.values.data() + grad_in.offset(m, ty.lo, tx.hi);
        T* c = grad_in.values.data() + grad_in.offset(m, ty.hi, tx.lo);
        T* e = grad_in.values.data() + grad_in.offset(m, ty.hi, tx.hi);
        for (int d = 0; d < D; ++d) {
          a[d] += g[d] * (1 - fy) * (1 - fx);
          b[d] += g[d] * (1 - fy) * fx;
          c[d] += g[d] * fy * (1 - fx);
          e[d] += g[d] * fy * fx;
        }
      }
    }
  }
  return grad_in;
}

template <std::floating_point T>
CapsuleGrid<T> concat_maps(const CapsuleGrid<T>& first, const CapsuleGrid<T>& second) {
  if (first.height != second.height || first.width != second.width || first.dim != second.dim) {
    throw DimensionError("concat_maps: grids differ in height, width or capsule dimension");
  }
  CapsuleGrid<T> out(first.maps + second.maps, first.height, first.width, first.dim);
  std::copy(first.values.begin(), first.values.end(), out.values.begin());
  std::copy(second.values.begin(), second.values.end(),
            out.values.begin() + static_cast<std::ptrdiff_t>(first.values.size()));
  return out;
}

template <std::floating_point T>
std::pair<CapsuleGrid<T>, CapsuleGrid<T>> split_maps(const CapsuleGrid<T>& grid, int first_maps) {
  if (first_maps < 1 || first_maps >= grid.maps) throw DimensionError("split_maps: invalid split point");
  CapsuleGrid<T> a(first_maps, grid.height, grid.width, grid.dim);
  CapsuleGrid<T> b(grid.maps - first_maps, grid.height, grid.width, grid.dim);
  std::copy(grid.values.begin(), grid.values.begin() + static_cast<std::ptrdiff_t>(a.values.size()),
            a.values.begin());
  std::copy(grid.values.begin() + static_cast<std::ptrdiff_t>(a.values.size()), grid.values.end(),
            b.values.begin());
  return {std::move(a), std::move(b)};
}

#define DEEPCAP_INSTANTIATE(T)                                                                                  \
  template void squash(std::span<const T>, std::span<T>);                                                       \
  template std::vector<T> squash(std::span<const T>);                                                           \
  template void squash_backward(std::span<const T>, std::span<const T>, std::span<T>);                          \
  template RoutingResult<T> route(std::span<const T>, int, int, int, int, RoutingTrace<T>*);                    \
  template std::vector<T> route_backward(std::span<const T>, int, int, int, int, std::span<const T>);           \
  template CapsuleGrid<T> primary_capsules(const Grid2D<T>&, KernelRef<T>, int, int, int, int);                 \
  template Grid2D<T> primary_capsules_backward(const Grid2D<T>&, KernelRef<T>, int, int, int, int,              \
                                               const CapsuleGrid<T>&, std::span<T>, std::span<T>);              \
  template CapsuleGrid<T> conv_capsule(const CapsuleGrid<T>&, CapsuleConvRef<T>, int);                          \
  template CapsuleGrid<T> conv_capsule_backward(const CapsuleGrid<T>&, CapsuleConvRef<T>, int,                  \
                                                const CapsuleGrid<T>&, std::span<T>);                           \
  template CapsuleGrid<T> upsample_capsule(const CapsuleGrid<T>&, CapsuleConvRef<T>, UpsampleMode, int);        \
  template CapsuleGrid<T> upsample_capsule_backward(const CapsuleGrid<T>&, CapsuleConvRef<T>, UpsampleMode, int, \
                                                    const CapsuleGrid<T>&, std::span<T>);                       \
  template CapsuleGrid<T> resize_capsules_bilinear(const CapsuleGrid<T>&, int, int);                            \
  template CapsuleGrid<T> resize_capsules_bilinear_backward(const CapsuleGrid<T>&, int, int);                   \
  template CapsuleGrid<T> concat_maps(const CapsuleGrid<T>&, const CapsuleGrid<T>&);                            \
  template std::pair<CapsuleGrid<T>, CapsuleGrid<T>> split_maps(const CapsuleGrid<T>&, int);

DEEPCAP_INSTANTIATE(float)
DEEPCAP_INSTANTIATE(double)
#undef DEEPCAP_INSTANTIATE

}  // namespace deepcap
