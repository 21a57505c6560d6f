#include "deepcap/model.hpp"

#include <cmath>

#include "deepcap/errors.hpp"
#include "deepcap/random.hpp"

namespace deepcap {

namespace {

std::size_t add_slot(NetworkPlan& plan, std::string name, std::size_t count) {
  plan.slots.push_back({std::move(name), plan.param_count, count});
  plan.param_count += count;
  return plan.slots.size() - 1;
}

template <typename T>
void accumulate(CapsuleGrid<T>& dst, CapsuleGrid<T>&& src) {
  if (dst.values.empty()) {
    dst = std::move(src);
    return;
  }
  if (!dst.same_shape(src)) throw DimensionError("network_backward: gradient shape mismatch");
  for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] += src.values[i];
}

template <typename T>
KernelRef<T> kernel_ref(const NetworkPlan& plan, std::span<const T> params, int w_slot, int b_slot, int out_c,
                        int in_c, int k) {
  return {out_c, in_c, k, plan.slice(params, static_cast<std::size_t>(w_slot)),
          plan.slice(params, static_cast<std::size_t>(b_slot))};
}

template <typename T>
KernelStack<T> blur_kernel(const ModelConfig& cfg) {
  return gaussian_kernel2d<T>(cfg.blur_kernel, static_cast<T>(cfg.blur_sigma));
}

// Uniform init whose variance keeps the routed pre-activation norm near 1 at
// the start of training: with coupling 1/P over N children of norm ~0.5,
// |s|^2 ~ N * D' * var(W) * 0.25 / P^2.
double capsule_init_bound(const CapsuleOp& op) {
  const CapsuleConvShape& s = op.shape;
  double children = static_cast<double>(s.in_maps) * s.kernel * s.kernel;
  if (op.kind == OpKind::Upsample) children /= static_cast<double>(s.stride) * s.stride;
  const double var = static_cast<double>(s.out_maps) * s.out_maps / (children * s.out_dim * 0.25);
  return std::sqrt(3.0 * var);
}

template <typename T>
void check_input(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input) {
  const ModelConfig& c = plan.config;
  if (input.channels != c.input_channels || input.height != c.input_side || input.width != c.input_side) {
    throw DimensionError("forward: expected input " + std::to_string(c.input_channels) + "x" +
                         std::to_string(c.input_side) + "x" + std::to_string(c.input_side) + ", got " +
                         std::to_string(input.channels) + "x" + std::to_string(input.height) + "x" +
                         std::to_string(input.width));
  }
  if (params.size() != plan.param_count) throw DimensionError("forward: parameter count mismatch");
}

}  // namespace

NetworkPlan NetworkPlan::build(const ModelConfig& config) {
  config.validate();
  NetworkPlan plan;
  plan.config = config;
  const int k0 = config.primary_kernel;
  const int md = config.primary.maps * config.primary.dim;
  if (config.primary_hidden > 0) {
    const int hid = config.primary_hidden;
    plan.primary_hidden_w = static_cast<int>(
        add_slot(plan, "primary.hidden.weight", static_cast<std::size_t>(hid) * config.input_channels * k0 * k0));
    plan.primary_hidden_b = static_cast<int>(add_slot(plan, "primary.hidden.bias", hid));
    plan.primary_w = static_cast<int>(add_slot(plan, "primary.weight", static_cast<std::size_t>(md) * hid));
  } else {
    plan.primary_w = static_cast<int>(
        add_slot(plan, "primary.weight", static_cast<std::size_t>(md) * config.input_channels * k0 * k0));
  }
  plan.primary_b = static_cast<int>(add_slot(plan, "primary.bias", md));

  const int k = config.kernel;
  auto conv_op = [&](OpKind kind, const std::string& name, CapsuleWidth from, CapsuleWidth to, int stride) {
    CapsuleOp op;
    op.kind = kind;
    op.name = name;
    op.shape = {k, stride, k / 2, from.maps, from.dim, to.maps, to.dim};
    op.slot = add_slot(plan, name + ".weight", op.shape.weight_count());
    plan.ops.push_back(op);
  };

  CapsuleWidth cur = config.primary;
  int value_index = 0;
  std::vector<int> feature_value(config.down.size());
  for (std::size_t i = 0; i < config.down.size(); ++i) {
    const std::string stage = "down" + std::to_string(i);
    conv_op(OpKind::Conv, stage + ".feature", cur, config.down[i], 1);
    feature_value[i] = ++value_index;
    conv_op(OpKind::Conv, stage + ".downsample", config.down[i], config.down[i], 2);
    ++value_index;
    cur = config.down[i];
  }
  for (std::size_t i = 0; i < config.up.size(); ++i) {
    const UpStage& u = config.up[i];
    const std::string stage = "up" + std::to_string(i);
    conv_op(OpKind::Upsample, stage + ".upsample", cur, u.width, 2);
    ++value_index;
    cur = u.width;
    if (u.skip >= 0) {
      CapsuleOp op;
      op.kind = OpKind::Concat;
      op.name = stage + ".skip";
      op.source = feature_value[u.skip];
      plan.ops.push_back(op);
      ++value_index;
      cur.maps += config.down[u.skip].maps;
    }
    for (int j = 0; j < u.convs; ++j) {
      conv_op(OpKind::Conv, stage + ".conv" + std::to_string(j), cur, u.width, 1);
      ++value_index;
      cur = u.width;
    }
  }
  for (std::size_t i = 0; i < config.head.size(); ++i) {
    conv_op(OpKind::Conv, "head" + std::to_string(i), cur, config.head[i], 1);
    cur = config.head[i];
  }
  return plan;
}

template <std::floating_point T>
CapsuleGrid<T> network_primary(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input) {
  check_input(plan, params, input);
  const ModelConfig& c = plan.config;
  const int md = c.primary.maps * c.primary.dim;
  const int pad = c.primary_kernel / 2;
  if (c.primary_hidden > 0) {
    Grid2D<T> hidden = conv2d(input,
                              kernel_ref(plan, params, plan.primary_hidden_w, plan.primary_hidden_b,
                                         c.primary_hidden, c.input_channels, c.primary_kernel),
                              c.primary_stride, pad);
    for (T& v : hidden.values) v = std::max(v, T{0});
    return primary_capsules(hidden, kernel_ref(plan, params, plan.primary_w, plan.primary_b, md, c.primary_hidden, 1),
                            1, 0, c.primary.maps, c.primary.dim);
  }
  return primary_capsules(
      input, kernel_ref(plan, params, plan.primary_w, plan.primary_b, md, c.input_channels, c.primary_kernel),
      c.primary_stride, pad, c.primary.maps, c.primary.dim);
}

template <std::floating_point T>
Grid2D<T> network_forward(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input,
                          ForwardCache<T>* cache) {
  const ModelConfig& c = plan.config;
  ForwardCache<T> local;
  ForwardCache<T>& fc = cache ? *cache : local;
  fc.values.clear();

  if (!all_finite<T>(input.values)) throw NumericError("forward: non-finite input");
  if (c.primary_hidden > 0) {
    // Keep the hidden activations for the backward pass.
    check_input(plan, params, input);
    const int md = c.primary.maps * c.primary.dim;
    fc.hidden_pre = conv2d(input,
                           kernel_ref(plan, params, plan.primary_hidden_w, plan.primary_hidden_b, c.primary_hidden,
                                      c.input_channels, c.primary_kernel),
                           c.primary_stride, c.primary_kernel / 2);
    fc.hidden = fc.hidden_pre;
    for (T& v : fc.hidden.values) v = std::max(v, T{0});
    fc.values.push_back(primary_capsules(
        fc.hidden, kernel_ref(plan, params, plan.primary_w, plan.primary_b, md, c.primary_hidden, 1), 1, 0,
        c.primary.maps, c.primary.dim));
  } else {
    fc.values.push_back(network_primary(plan, params, input));
  }

  for (const CapsuleOp& op : plan.ops) {
    const CapsuleGrid<T>& x = fc.values.back();
    switch (op.kind) {
      case OpKind::Conv:
        fc.values.push_back(conv_capsule(x, CapsuleConvRef<T>{op.shape, plan.slice(params, op.slot)},
                                         c.routing_iterations));
        break;
      case OpKind::Upsample:
        fc.values.push_back(upsample_capsule(x, CapsuleConvRef<T>{op.shape, plan.slice(params, op.slot)},
                                             c.upsample, c.routing_iterations));
        break;
      case OpKind::Concat:
        fc.values.push_back(concat_maps(x, fc.values[static_cast<std::size_t>(op.source)]));
        break;
    }
  }

  const CapsuleGrid<T>& out = fc.values.back();
  fc.logits = Grid2D<T>(2, out.height, out.width);
  fc.logits.values = out.values;
  fc.blurred = c.blur_enabled ? depthwise_conv2d(fc.logits, blur_kernel<T>(c).ref(), c.blur_kernel / 2) : fc.logits;

  Grid2D<T> probs(2, out.height, out.width);
  const std::size_t n = probs.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    const T a = fc.blurred.values[i];
    const T b = fc.blurred.values[n + i];
    const T m = std::max(a, b);
    const T ea = std::exp(a - m);
    const T eb = std::exp(b - m);
    probs.values[i] = ea / (ea + eb);
    probs.values[n + i] = eb / (ea + eb);
  }
  if (cache) fc.probs = probs;
  return probs;
}

template <std::floating_point T>
void network_backward(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input,
                      const ForwardCache<T>& cache, const Grid2D<T>& grad_probs, std::span<T> grad_params) {
  const ModelConfig& c = plan.config;
  if (grad_params.size() != plan.param_count) throw DimensionError("network_backward: gradient size mismatch");
  if (!grad_probs.same_shape(cache.probs)) throw DimensionError("network_backward: grad_probs shape mismatch");

  Grid2D<T> grad_blurred(2, cache.probs.height, cache.probs.width);
  const std::size_t n = grad_blurred.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    const T pa = cache.probs.values[i];
    const T pb = cache.probs.values[n + i];
    const T ga = grad_probs.values[i];
    const T gb = grad_probs.values[n + i];
    const T dot = pa * ga + pb * gb;
    grad_blurred.values[i] = pa * (ga - dot);
    grad_blurred.values[n + i] = pb * (gb - dot);
  }
  const Grid2D<T> grad_logits =
      c.blur_enabled ? depthwise_conv2d_backward(grad_blurred, blur_kernel<T>(c).ref(), c.blur_kernel / 2)
                     : grad_blurred;

  std::vector<CapsuleGrid<T>> grads(cache.values.size());
  {
    const CapsuleGrid<T>& out = cache.values.back();
    CapsuleGrid<T> g(out.maps, out.height, out.width, out.dim);
    g.values = grad_logits.values;
    grads.back() = std::move(g);
  }
  for (std::size_t i = plan.ops.size(); i-- > 0;) {
    const CapsuleOp& op = plan.ops[i];
    CapsuleGrid<T>& g = grads[i + 1];
    if (g.values.empty()) continue;
    const CapsuleGrid<T>& x = cache.values[i];
    switch (op.kind) {
      case OpKind::Conv:
        accumulate(grads[i], conv_capsule_backward(x, CapsuleConvRef<T>{op.shape, plan.slice(params, op.slot)},
                                                   c.routing_iterations, g, plan.slice(grad_params, op.slot)));
        break;
      case OpKind::Upsample:
        accumulate(grads[i],
                   upsample_capsule_backward(x, CapsuleConvRef<T>{op.shape, plan.slice(params, op.slot)}, c.upsample,
                                             c.routing_iterations, g, plan.slice(grad_params, op.slot)));
        break;
      case OpKind::Concat: {
        auto [first, second] = split_maps(g, x.maps);
        accumulate(grads[i], std::move(first));
        accumulate(grads[static_cast<std::size_t>(op.source)], std::move(second));
        break;
      }
    }
    g = CapsuleGrid<T>{};
  }

  const int md = c.primary.maps * c.primary.dim;
  const int pad = c.primary_kernel / 2;
  if (c.primary_hidden > 0) {
    Grid2D<T> grad_hidden = primary_capsules_backward(
        cache.hidden, kernel_ref(plan, params, plan.primary_w, plan.primary_b, md, c.primary_hidden, 1), 1, 0,
        c.primary.maps, c.primary.dim, grads[0], plan.slice(grad_params, static_cast<std::size_t>(plan.primary_w)),
        plan.slice(grad_params, static_cast<std::size_t>(plan.primary_b)));
    for (std::size_t i = 0; i < grad_hidden.values.size(); ++i) {
      if (cache.hidden_pre.values[i] <= T{0}) grad_hidden.values[i] = T{0};
    }
    conv2d_backward(input,
                    kernel_ref(plan, params, plan.primary_hidden_w, plan.primary_hidden_b, c.primary_hidden,
                               c.input_channels, c.primary_kernel),
                    c.primary_stride, pad, grad_hidden,
                    plan.slice(grad_params, static_cast<std::size_t>(plan.primary_hidden_w)),
                    plan.slice(grad_params, static_cast<std::size_t>(plan.primary_hidden_b)));
  } else {
    primary_capsules_backward(
        input, kernel_ref(plan, params, plan.primary_w, plan.primary_b, md, c.input_channels, c.primary_kernel),
        c.primary_stride, pad, c.primary.maps, c.primary.dim, grads[0],
        plan.slice(grad_params, static_cast<std::size_t>(plan.primary_w)),
        plan.slice(grad_params, static_cast<std::size_t>(plan.primary_b)));
  }
}

template <std::floating_point T>
Mask argmax_mask(const Grid2D<T>& probs) {
  if (probs.channels != 2) throw DimensionError("argmax_mask: expected 2 channels");
  Mask mask(probs.height, probs.width);
  const std::size_t n = probs.plane_size();
  for (std::size_t i = 0; i < n; ++i) mask.values[i] = probs.values[n + i] > probs.values[i] ? 1 : 0;
  return mask;
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.plan_ = NetworkPlan::build(config);
  m.params_.assign(m.plan_.param_count, 0.0f);
  Rng rng(seed);
  const NetworkPlan& plan = m.plan_;

  auto fill = [&](std::size_t slot, double bound) {
    const ParamSlot& s = plan.slots[slot];
    for (std::size_t i = 0; i < s.count; ++i) m.params_[s.offset + i] = static_cast<float>(uniform(rng, -bound, bound));
  };
  const ModelConfig& c = config;
  const int k0 = c.primary_kernel;
  if (c.primary_hidden > 0) {
    fill(static_cast<std::size_t>(plan.primary_hidden_w), std::sqrt(6.0 / (c.input_channels * k0 * k0)));
    fill(static_cast<std::size_t>(plan.primary_w), std::sqrt(6.0 / c.primary_hidden));
  } else {
    fill(static_cast<std::size_t>(plan.primary_w), std::sqrt(6.0 / (c.input_channels * k0 * k0)));
  }
  for (const CapsuleOp& op : plan.ops) {
    if (op.kind != OpKind::Concat) fill(op.slot, capsule_init_bound(op));
  }
  return m;
}

Model Model::from_parameters(const ModelConfig& config, std::vector<float> params) {
  Model m;
  m.plan_ = NetworkPlan::build(config);
  if (params.size() != m.plan_.param_count) {
    throw DimensionError("Model: config needs " + std::to_string(m.plan_.param_count) + " parameters, got " +
                         std::to_string(params.size()));
  }
  m.params_ = std::move(params);
  return m;
}

Grid2D<float> Model::forward(const Grid2D<float>& input) const {
  return network_forward<float>(plan_, params_, input);
}

Mask Model::predict(const Grid2D<float>& input) const { return argmax_mask(forward(input)); }

CapsuleGrid<float> Model::primary(const Grid2D<float>& input) const {
  return network_primary<float>(plan_, params_, input);
}

#define DEEPCAP_INSTANTIATE(T)                                                                                  \
  template Grid2D<T> network_forward(const NetworkPlan&, std::span<const T>, const Grid2D<T>&, ForwardCache<T>*); \
  template void network_backward(const NetworkPlan&, std::span<const T>, const Grid2D<T>&, const ForwardCache<T>&, \
                                 const Grid2D<T>&, std::span<T>);                                               \
  template CapsuleGrid<T> network_primary(const NetworkPlan&, std::span<const T>, const Grid2D<T>&);            \
  template Mask argmax_mask(const Grid2D<T>&);

DEEPCAP_INSTANTIATE(float)
DEEPCAP_INSTANTIATE(double)
#undef DEEPCAP_INSTANTIATE

}  // namespace deepcap
