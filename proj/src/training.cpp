#include "deepcap/training.hpp"

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "deepcap/csv.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/parallel.hpp"
#include "deepcap/random.hpp"

namespace deepcap {

Split split_dataset(const std::vector<std::size_t>& sizes, const SplitSpec& spec) {
  if (sizes.size() < 3) {
    throw DataError("split_dataset: need at least 3 pullbacks for nonempty train/val/test subsets, got " +
                    std::to_string(sizes.size()));
  }
  const double ratios[3] = {spec.train, spec.val, spec.test};
  for (double r : ratios) {
    if (!(r > 0)) throw ParameterError("split_dataset: ratios must be positive");
  }
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw ParameterError("split_dataset: ratios must sum to 1");
  }
  std::vector<std::size_t> order(sizes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(hash_combine(mix64(spec.seed), 0x73706c6974ULL));
  shuffle(order, rng);

  double total = 0;
  for (std::size_t s : sizes) total += static_cast<double>(s);
  double counts[3] = {0, 0, 0};
  std::vector<std::size_t> members[3];
  for (std::size_t p : order) {
    int best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < 3; ++s) {
      const double deficit = ratios[s] * total - counts[s];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    members[best].push_back(p);
    counts[best] += static_cast<double>(sizes[p]);
  }
  for (int s = 0; s < 3; ++s) {
    if (!members[s].empty()) continue;
    int donor = 0;
    for (int d = 1; d < 3; ++d) {
      if (members[d].size() > members[donor].size()) donor = d;
    }
    auto smallest = std::min_element(members[donor].begin(), members[donor].end(),
                                     [&](std::size_t a, std::size_t b) { return sizes[a] < sizes[b]; });
    members[s].push_back(*smallest);
    members[donor].erase(smallest);
  }
  for (auto& m : members) std::sort(m.begin(), m.end());
  return Split{members[0], members[1], members[2]};
}

Subset parse_subset(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "train") return Subset::Train;
  if (t == "val") return Subset::Val;
  if (t == "test") return Subset::Test;
  if (t == "all") return Subset::All;
  throw ParameterError("unknown subset '" + text + "' (expected train, val, test or all)");
}

std::string to_string(Subset s) {
  switch (s) {
    case Subset::Train: return "train";
    case Subset::Val: return "val";
    case Subset::Test: return "test";
    case Subset::All: return "all";
  }
  return "?";
}

std::vector<std::size_t> subset_pullbacks(const Split& split, Subset s, std::size_t pullback_count) {
  switch (s) {
    case Subset::Train: return split.train;
    case Subset::Val: return split.val;
    case Subset::Test: return split.test;
    case Subset::All: break;
  }
  std::vector<std::size_t> all(pullback_count);
  for (std::size_t i = 0; i < pullback_count; ++i) all[i] = i;
  return all;
}

long warmup_end_step(const ScheduleSpec& spec) {
  const auto w = static_cast<long>(std::floor(spec.warmup_fraction * static_cast<double>(spec.total_steps))) - 1;
  return std::clamp(w, 0L, std::max(0L, spec.total_steps - 1));
}

double one_cycle_lr(long step, const ScheduleSpec& spec) {
  if (spec.total_steps <= 0) throw ParameterError("one_cycle_lr: total_steps must be positive");
  if (!(spec.peak_lr > 0)) throw ParameterError("one_cycle_lr: peak_lr must be positive");
  if (!(spec.warmup_fraction > 0 && spec.warmup_fraction < 1)) {
    throw ParameterError("one_cycle_lr: warmup_fraction must lie in (0, 1)");
  }
  if (step < 0 || step >= spec.total_steps) {
    throw ParameterError("one_cycle_lr: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(spec.total_steps) + ")");
  }
  const double hi = spec.peak_lr;
  const double lo = spec.peak_lr / spec.start_div;
  const double fin = spec.peak_lr / spec.final_div;
  const long warm_end = warmup_end_step(spec);
  if (step <= warm_end) {
    if (warm_end == 0) return hi;
    const double w = (1.0 - std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(warm_end))) / 2.0;
    return hi * w + lo * (1.0 - w);
  }
  const double pct =
      static_cast<double>(step - warm_end) / static_cast<double>(spec.total_steps - 1 - warm_end);
  const double w = (1.0 + std::cos(std::numbers::pi * pct)) / 2.0;
  return hi * w + fin * (1.0 - w);
}

template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i) + "; step skipped");
    }
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

template <std::floating_point T>
double clip_global_norm(std::span<T> grads, double max_norm) {
  double sq = 0;
  for (T g : grads) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double scale = max_norm / norm;
    for (T& g : grads) g = static_cast<T>(static_cast<double>(g) * scale);
  }
  return norm;
}

namespace {

template <std::floating_point T>
std::vector<T> mask_values(const Mask& m) {
  std::vector<T> y(m.values.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = m.values[i] ? T{1} : T{0};
  return y;
}

template <std::floating_point T>
struct ValResult {
  double loss = 0;
  double sds = 0;
};

template <std::floating_point T>
ValResult<T> validate(const NetworkPlan& plan, std::span<const T> params, const Dataset& data,
                      const std::vector<Dataset::FrameRef>& refs, const TrainOptions& opt) {
  std::vector<double> losses(refs.size()), scores(refs.size());
  parallel_for(0, refs.size(), [&](std::size_t i) {
    const CroppedSample cs = center_sample(data.sample(refs[i]), plan.config.input_side);
    const Grid2D<T> x = grid_cast<T>(assemble_input(cs, opt.variant));
    const Grid2D<T> probs = network_forward<T>(plan, params, x);
    const std::vector<T> y = mask_values<T>(cs.mask);
    losses[i] = combined_loss<T>(probs.plane(1), y, opt.lambda);
    scores[i] = soft_dice(argmax_mask(probs), cs.mask);
  });
  ValResult<T> r;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    r.loss += losses[i];
    r.sds += scores[i];
  }
  r.loss /= static_cast<double>(refs.size());
  r.sds /= static_cast<double>(refs.size());
  return r;
}

template <std::floating_point T>
TrainResult train_impl(const Model& initial, const Dataset& data, const Split& split, const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const NetworkPlan& plan = initial.plan();
  if (plan.config.input_channels != channel_count(opt.variant)) {
    throw ConfigError("train: variant " + to_string(opt.variant) + " needs " +
                      std::to_string(channel_count(opt.variant)) + " input channels but the model has " +
                      std::to_string(plan.config.input_channels));
  }
  if (opt.batch_size <= 0) throw ParameterError("train: batch size must be positive");
  if (opt.epochs <= 0) throw ParameterError("train: epochs must be positive");
  if (opt.patience <= 0) throw ParameterError("train: patience must be positive");
  if (opt.augment && opt.augment_options.crop != plan.config.input_side) {
    throw ConfigError("train: augmentation crop " + std::to_string(opt.augment_options.crop) +
                      " differs from the model input side " + std::to_string(plan.config.input_side));
  }
  const std::vector<Dataset::FrameRef> train_refs = data.frames_of(split.train);
  const std::vector<Dataset::FrameRef> val_refs = data.frames_of(split.val);
  if (train_refs.empty()) throw DataError("train: the training subset is empty");
  if (val_refs.empty()) throw DataError("train: the validation subset is empty");

  std::vector<T> params(initial.parameters().begin(), initial.parameters().end());
  std::vector<T> best_params = params;
  std::vector<T> grads(params.size());
  AdamState adam(params.size());

  const std::size_t n = train_refs.size();
  const auto batch = static_cast<std::size_t>(opt.batch_size);
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  ScheduleSpec sched;
  sched.peak_lr = opt.peak_lr;
  sched.total_steps = steps_per_epoch * opt.epochs;
  sched.warmup_fraction = opt.warmup_fraction;

  TrainReport report;
  report.seed = opt.seed;
  double best_val = std::numeric_limits<double>::infinity();
  int wait = 0;
  long step = 0;
  bool diverged = false;

  for (int epoch = 0; epoch < opt.epochs && !diverged; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_combine(mix64(opt.seed), static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);

    double loss_sum = 0;
    double lr = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), T{0});
      double batch_loss = 0;
      for (std::size_t k = start; k < end; ++k) {
        const Dataset::FrameRef ref = train_refs[order[k]];
        const Sample s = data.sample(ref);
        const CroppedSample cs =
            opt.augment ? augment(s, augment_seed(opt.seed, s.pullback_id, s.frame_index, epoch), opt.augment_options)
                        : center_sample(s, plan.config.input_side);
        const Grid2D<T> x = grid_cast<T>(assemble_input(cs, opt.variant));
        ForwardCache<T> cache;
        const Grid2D<T> probs = network_forward<T>(plan, params, x, &cache);
        const std::vector<T> y = mask_values<T>(cs.mask);
        Grid2D<T> grad_probs(2, probs.height, probs.width);
        const double loss = combined_loss_grad<T>(probs.plane(1), y, opt.lambda, grad_probs.plane(1));
        for (T& g : grad_probs.values) g = static_cast<T>(static_cast<double>(g) * scale);
        network_backward<T>(plan, params, x, cache, grad_probs, grads);
        batch_loss += loss;
      }
      if (!std::isfinite(batch_loss) || !all_finite<T>(grads)) {
        diverged = true;
        break;
      }
      loss_sum += batch_loss;
      clip_global_norm<T>(grads, opt.clip_norm);
      lr = one_cycle_lr(step, sched);
      adam_step<T>(params, grads, adam, lr);
      ++step;
    }
    if (diverged) break;

    const ValResult<T> val = validate<T>(plan, params, data, val_refs, opt);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_loss = opt.val_loss_hook ? opt.val_loss_hook(epoch + 1, val.loss) : val.loss;
    rec.val_sds = val.sds;
    rec.lr = lr;
    report.epochs.push_back(rec);
    if (!std::isfinite(rec.val_loss)) {
      diverged = true;
      break;
    }
    if (rec.val_loss < best_val - opt.min_delta) {
      best_val = rec.val_loss;
      best_params = params;
      report.best_epoch = rec.epoch;
      wait = 0;
    } else {
      ++wait;
    }
    if (opt.on_epoch) opt.on_epoch(rec);
    if (wait >= opt.patience) {
      report.stop_reason = "early_stopping";
      break;
    }
  }
  if (diverged) {
    report.stop_reason = "diverged";
  } else if (report.stop_reason.empty()) {
    report.stop_reason = "max_epochs";
  }
  report.best_val_loss = best_val;
  report.steps = step;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<float> out(best_params.begin(), best_params.end());
  return TrainResult{Model::from_parameters(plan.config, std::move(out)), std::move(report)};
}

}  // namespace

TrainResult train(const Model& initial, const Dataset& data, const Split& split, const TrainOptions& options) {
  if (options.double_precision) return train_impl<double>(initial, data, split, options);
  return train_impl<float>(initial, data, split, options);
}

void write_train_report_csv(const TrainReport& report, const std::string& path) {
  CsvWriter csv(path, {"epoch", "train_loss", "val_loss", "val_sds", "lr"});
  for (const EpochRecord& e : report.epochs) {
    csv.row({std::to_string(e.epoch), format_double(e.train_loss), format_double(e.val_loss),
             format_double(e.val_sds), format_double(e.lr)});
  }
  csv.close();
}

Predictor model_predictor(const Model& model, InputVariant variant) {
  if (model.config().input_channels != channel_count(variant)) {
    throw ConfigError("variant " + to_string(variant) + " needs " + std::to_string(channel_count(variant)) +
                      " input channels but the model has " + std::to_string(model.config().input_channels));
  }
  return [&model, variant](const Sample& s) {
    const CroppedSample cs = center_sample(s, model.config().input_side);
    return model.predict(assemble_input(cs, variant));
  };
}

Evaluation summarize_rows(std::vector<EvalRow> rows) {
  Evaluation e;
  std::vector<double> sds, sens, spec, hd, apx, amm;
  for (const EvalRow& r : rows) {
    sds.push_back(r.metrics.sds);
    sens.push_back(r.metrics.sensitivity);
    spec.push_back(r.metrics.specificity);
    hd.push_back(r.metrics.hausdorff_px);
    apx.push_back(static_cast<double>(r.metrics.area_px));
    amm.push_back(r.metrics.area_mm2);
  }
  e.rows = std::move(rows);
  e.sds = summarize(sds);
  e.sensitivity = summarize(sens);
  e.specificity = summarize(spec);
  e.hausdorff_px = summarize(hd);
  e.area_px = summarize(apx);
  e.area_mm2 = summarize(amm);
  return e;
}

Evaluation evaluate(const Dataset& data, const std::vector<Dataset::FrameRef>& frames, const Predictor& predict,
                    double pixel_spacing_um) {
  if (frames.empty()) throw DataError("evaluate: the subset is empty");
  std::vector<EvalRow> rows(frames.size());
  parallel_for(0, frames.size(), [&](std::size_t i) {
    const Sample s = data.sample(frames[i]);
    const Mask pred = predict(s);
    const Mask truth = (pred.height == s.mask.height && pred.width == s.mask.width)
                           ? s.mask
                           : center_crop(s.mask, pred.height);
    if (!pred.same_shape(truth)) throw DimensionError("evaluate: prediction is not square or exceeds the frame");
    rows[i] = EvalRow{s.pullback_id, s.frame_index, compute_metrics(pred, truth, pixel_spacing_um)};
  });
  return summarize_rows(std::move(rows));
}

void write_eval_csv(const Evaluation& eval, const std::string& path) {
  CsvWriter csv(path, {"pullback_id", "frame_index", "sds", "sensitivity", "specificity", "hausdorff_px", "area_px",
                       "area_mm2"});
  for (const EvalRow& r : eval.rows) {
    csv.row({r.pullback_id, std::to_string(r.frame_index), format_double(r.metrics.sds),
             format_double(r.metrics.sensitivity), format_double(r.metrics.specificity),
             format_double(r.metrics.hausdorff_px), std::to_string(r.metrics.area_px),
             format_double(r.metrics.area_mm2)});
  }
  csv.close();
}

std::string format_evaluation(const Evaluation& eval) {
  std::ostringstream out;
  out << "images: " << eval.rows.size() << "\n";
  out << "sds:          " << format_summary(eval.sds) << "\n";
  out << "sensitivity:  " << format_summary(eval.sensitivity) << "\n";
  out << "specificity:  " << format_summary(eval.specificity) << "\n";
  out << "hausdorff_px: " << format_summary(eval.hausdorff_px, 3) << "\n";
  out << "area_px:      " << format_summary(eval.area_px, 1) << "\n";
  out << "area_mm2:     " << format_summary(eval.area_mm2) << "\n";
  return out.str();
}

template void adam_step(std::span<float>, std::span<const float>, AdamState&, double);
template void adam_step(std::span<double>, std::span<const double>, AdamState&, double);
template double clip_global_norm(std::span<float>, double);
template double clip_global_norm(std::span<double>, double);

}  // namespace deepcap
