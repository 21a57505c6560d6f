#pragma once

// Pullback-level splitting, the one-cycle schedule, Adam, the training loop
// with early stopping, and per-image evaluation.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deepcap/dataset.hpp"
#include "deepcap/metrics.hpp"
#include "deepcap/model.hpp"
#include "deepcap/preprocess.hpp"

namespace deepcap {

struct SplitSpec {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> train;  // pullback indices, ascending
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Pullbacks are visited in a seeded random order and each goes to the subset
// furthest below its target image count. Needs at least 3 pullbacks; every
// subset ends up nonempty.
Split split_dataset(const std::vector<std::size_t>& pullback_sizes, const SplitSpec& spec);

enum class Subset { Train, Val, Test, All };
Subset parse_subset(const std::string& text);
std::string to_string(Subset s);
std::vector<std::size_t> subset_pullbacks(const Split& split, Subset s, std::size_t pullback_count);

struct ScheduleSpec {
  double peak_lr = 1e-3;
  long total_steps = 1;
  double warmup_fraction = 0.1;
  double start_div = 25.0;
  double final_div = 1e4;
};

// Last step of the warmup ramp, where the rate equals peak_lr.
long warmup_end_step(const ScheduleSpec& spec);
double one_cycle_lr(long step, const ScheduleSpec& spec);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Throws NumericError, leaving params and state untouched, if any gradient
// is not finite.
template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr);

// Scales grads in place so their global L2 norm is at most max_norm and
// returns the norm before scaling.
template <std::floating_point T>
double clip_global_norm(std::span<T> grads, double max_norm);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_sds = 0.0;
  double lr = 0.0;
};

struct TrainOptions {
  InputVariant variant = InputVariant::ALL;
  int batch_size = 24;
  double lambda = kDefaultLambda;
  int epochs = 30;
  std::uint64_t seed = 0;
  int patience = 10;
  double min_delta = 1e-4;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.1;
  double clip_norm = 5.0;
  bool augment = true;
  AugmentOptions augment_options;
  bool double_precision = false;
  std::function<void(const EpochRecord&)> on_epoch;
  // Lets callers replace the measured validation loss (used to exercise
  // early stopping).
  std::function<double(int epoch, double measured)> val_loss_hook;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  long steps = 0;
};

struct TrainResult {
  Model model;
  TrainReport report;
};

// The returned model holds the parameters of the best validation epoch.
TrainResult train(const Model& initial, const Dataset& data, const Split& split, const TrainOptions& options);

void write_train_report_csv(const TrainReport& report, const std::string& path);

struct EvalRow {
  std::string pullback_id;
  int frame_index = 0;
  MetricsRecord metrics;
};

struct Evaluation {
  std::vector<EvalRow> rows;
  SummaryStats sds;
  SummaryStats sensitivity;
  SummaryStats specificity;
  SummaryStats hausdorff_px;
  SummaryStats area_px;
  SummaryStats area_mm2;
};

// Returns a predicted mask for a sample. When the prediction is smaller than
// the stored mask, the truth is center-cropped to match.
using Predictor = std::function<Mask(const Sample&)>;

Predictor model_predictor(const Model& model, InputVariant variant);

Evaluation evaluate(const Dataset& data, const std::vector<Dataset::FrameRef>& frames, const Predictor& predict,
                    double pixel_spacing_um);
Evaluation summarize_rows(std::vector<EvalRow> rows);

void write_eval_csv(const Evaluation& eval, const std::string& path);
// Human-readable block with one "metric: mean ± std | median | min-max" line per metric.
std::string format_evaluation(const Evaluation& eval);

}  // namespace deepcap
