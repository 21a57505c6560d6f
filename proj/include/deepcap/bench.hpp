#pragma once

// Inference latency: warmup batches, then timed batches on fixed random
// inputs; ms/image is the batch wall time divided by the batch size.

#include <cstdint>
#include <string>
#include <vector>

#include "deepcap/model.hpp"

namespace deepcap {

struct BenchOptions {
  int batch_size = 48;
  int repetitions = 5;
  int warmup = 1;
  int threads = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  int batch_size = 0;
  int repetitions = 0;
  int warmup_reps = 0;
  int threads = 1;
  std::string precision = "float32";
  int input_side = 0;
  int input_channels = 0;
  std::size_t param_count = 0;
  std::vector<double> batch_ms;  // timed repetitions only
  double mean_batch_ms = 0.0;
  double ms_per_image = 0.0;  // mean_batch_ms / batch_size
  double median_ms_per_image = 0.0;
  double min_ms_per_image = 0.0;
  std::uint64_t output_hash = 0;
  bool outputs_identical = true;  // every repetition produced the same outputs
};

// Repetitions must be at least 5. Preprocessing and I/O are outside the
// timed region. Sets the global worker count to options.threads.
BenchReport bench_inference(const Model& model, const BenchOptions& options);

void write_bench_csv(const BenchReport& report, const std::string& path);
std::string format_bench(const BenchReport& report);

}  // namespace deepcap
