#include "deepcap/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <sstream>

#include "deepcap/csv.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/parallel.hpp"
#include "deepcap/random.hpp"

namespace deepcap {

namespace {

std::uint64_t hash_outputs(const std::vector<Grid2D<float>>& outputs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Grid2D<float>& g : outputs) {
    for (float v : g.values) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace

BenchReport bench_inference(const Model& model, const BenchOptions& opt) {
  if (opt.batch_size <= 0) throw ParameterError("bench: batch size must be positive");
  if (opt.repetitions < 5) throw ParameterError("bench: at least 5 timed repetitions are required");
  if (opt.warmup < 0) throw ParameterError("bench: warmup count must be non-negative");
  if (opt.threads <= 0) throw ParameterError("bench: thread count must be positive");
  set_num_threads(opt.threads);

  const ModelConfig& cfg = model.config();
  Rng rng(hash_combine(mix64(opt.seed), 0x62656e6368ULL));
  std::vector<Grid2D<float>> inputs;
  for (int b = 0; b < opt.batch_size; ++b) {
    Grid2D<float> x(cfg.input_channels, cfg.input_side, cfg.input_side);
    for (float& v : x.values) v = static_cast<float>(uniform01(rng));
    inputs.push_back(std::move(x));
  }
  std::vector<Grid2D<float>> outputs(inputs.size());

  BenchReport r;
  r.batch_size = opt.batch_size;
  r.repetitions = opt.repetitions;
  r.warmup_reps = opt.warmup;
  r.threads = opt.threads;
  r.input_side = cfg.input_side;
  r.input_channels = cfg.input_channels;
  r.param_count = model.param_count();

  bool have_hash = false;
  for (int rep = 0; rep < opt.warmup + opt.repetitions; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(0, inputs.size(), [&](std::size_t i) { outputs[i] = model.forward(inputs[i]); });
    const auto t1 = std::chrono::steady_clock::now();
    const std::uint64_t h = hash_outputs(outputs);
    if (have_hash && h != r.output_hash) r.outputs_identical = false;
    r.output_hash = h;
    have_hash = true;
    if (rep >= opt.warmup) r.batch_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }

  double sum = 0;
  for (double ms : r.batch_ms) sum += ms;
  r.mean_batch_ms = sum / static_cast<double>(r.batch_ms.size());
  r.ms_per_image = r.mean_batch_ms / r.batch_size;
  std::vector<double> sorted = r.batch_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  r.median_ms_per_image = median / r.batch_size;
  r.min_ms_per_image = sorted.front() / r.batch_size;
  return r;
}

void write_bench_csv(const BenchReport& r, const std::string& path) {
  CsvWriter csv(path, {"rep", "batch_size", "threads", "precision", "input_side", "batch_ms", "ms_per_image"});
  for (std::size_t i = 0; i < r.batch_ms.size(); ++i) {
    csv.row({std::to_string(i + 1), std::to_string(r.batch_size), std::to_string(r.threads), r.precision,
             std::to_string(r.input_side), format_double(r.batch_ms[i]),
             format_double(r.batch_ms[i] / r.batch_size)});
  }
  csv.close();
}

std::string format_bench(const BenchReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(3);
  out << "input: " << r.input_channels << "x" << r.input_side << "x" << r.input_side << ", parameters "
      << r.param_count << "\n";
  out << "batch " << r.batch_size << ", " << r.repetitions << " timed reps after " << r.warmup_reps
      << " warmup, threads " << r.threads << ", " << r.precision << "\n";
  out << "mean batch time: " << r.mean_batch_ms << " ms\n";
  out << "ms/image: mean " << r.ms_per_image << " | median " << r.median_ms_per_image << " | min "
      << r.min_ms_per_image << "\n";
  out << "outputs identical across reps: " << (r.outputs_identical ? "yes" : "no") << "\n";
  return out.str();
}

}  // namespace deepcap
