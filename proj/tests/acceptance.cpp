// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "checks.hpp"
#include "deepcap/bench.hpp"
#include "deepcap/csv.hpp"
#include "deepcap/dataset.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/model.hpp"
#include "deepcap/parallel.hpp"
#include "deepcap/random.hpp"
#include "deepcap/synth.hpp"
#include "deepcap/training.hpp"

namespace fs = std::filesystem;
using namespace deepcap;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_work;
std::string g_cli = DEEPCAP_CLI_PATH;

int shell(const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = "'" + g_cli + "'";
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " > '" + log.string() + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome c1() {
  const auto t0 = Clock::now();
  const auto r = checks::kernel_oracles(100, 2024);
  const double s = seconds_since(t0);
  Outcome o;
  o.pass = r.conv_mismatches == 0 && r.transpose_mismatches == 0 && r.worst_adjoint_gap <= 1e-10 && s < 60;
  o.detail = fmt("%d instances, conv mismatches %d, transpose mismatches %d, adjoint gap %.2e, %.2fs", r.instances,
                 r.conv_mismatches, r.transpose_mismatches, r.worst_adjoint_gap, s);
  return o;
}

Outcome c2() {
  const auto t0 = Clock::now();
  const auto suite = checks::gradient_suite(2024);
  const double s = seconds_since(t0);
  Outcome o;
  o.pass = s < 300;
  std::string parts;
  for (const auto& g : suite) {
    o.pass = o.pass && g.report.max_rel_error < 1e-4;
    parts += fmt("%s %.1e; ", g.name.c_str(), g.report.max_rel_error);
  }
  o.detail = parts + fmt("%.2fs", s);
  return o;
}

Outcome c3() {
  const auto r = checks::routing_oracles(1000, 2024);
  Outcome o;
  o.pass = r.single_child && r.opposing_pair && r.agreeing_pair && r.worst_weight_sum_gap <= 1e-10;
  o.detail = fmt("single child %s, opposing pair %s, agreeing pair %s, weight-sum gap %.1e over %d windows",
                 r.single_child ? "exact" : "MISMATCH", r.opposing_pair ? "exact" : "MISMATCH",
                 r.agreeing_pair ? "exact" : "MISMATCH", r.worst_weight_sum_gap, r.windows);
  return o;
}

Outcome c4() {
  const auto r = checks::squash_law(100000, 2024);
  Outcome o;
  o.pass = r.norm_violations == 0 && r.worst_direction_gap < 1e-12 && r.unit_gives_half && r.three_gives_nine_tenths;
  o.detail = fmt("%d vectors, norm>=1: %d, max 1-cos %.1e, |p|=1 -> 0.5 %s, |p|=3 -> 0.9 %s", r.vectors,
                 r.norm_violations, r.worst_direction_gap, r.unit_gives_half ? "exact" : "no",
                 r.three_gives_nine_tenths ? "exact" : "no");
  return o;
}

Outcome c5() {
  const auto r = checks::metric_oracles(50, 2024);
  Outcome o;
  o.pass = r.dice_mismatches == 0 && r.hausdorff_mismatches == 0 && r.sens_spec_mismatches == 0 &&
           r.identical == 0.0 && r.single_pixels == 5.0 && r.shifted_square == 3.0;
  o.detail = fmt("%d pairs: dice %d, hausdorff %d, sens/spec %d mismatches; worked examples %g %g %g", r.pairs,
                 r.dice_mismatches, r.hausdorff_mismatches, r.sens_spec_mismatches, r.identical, r.single_pixels,
                 r.shifted_square);
  return o;
}

Outcome c6() {
  const Model m = Model::build(preset_config("deepcap-default"), 1);
  Rng rng(6);
  Grid2D<float> x(3, 256, 256);
  for (float& v : x.values) v = static_cast<float>(uniform01(rng));
  const auto caps = m.primary(x);
  const auto probs = m.forward(x);
  double worst = 0;
  const std::size_t n = probs.plane_size();
  if (probs.channels == 2)
    for (std::size_t i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(double(probs.values[i]) + probs.values[n + i] - 1.0));
  Outcome o;
  o.pass = probs.channels == 2 && probs.height == 256 && probs.width == 256 && worst <= 1e-6 && caps.maps == 4 &&
           caps.height == 64 && caps.width == 64 && caps.dim == 16;
  o.detail = fmt("output %dx%dx%d, max |sum-1| %.1e, primary (%d, %d, %d, %d)", probs.channels, probs.height,
                 probs.width, worst, caps.maps, caps.height, caps.width, caps.dim);
  return o;
}

Outcome c7() {
  ModelConfig c = preset_config("deepcap-default");
  auto count = [&](InputVariant v) {
    ModelConfig k = c;
    k.input_channels = channel_count(v);
    return NetworkPlan::build(k).param_count;
  };
  const std::size_t im = count(InputVariant::IM), g2 = count(InputVariant::G2D), adm = count(InputVariant::ADM),
                    all = count(InputVariant::ALL);
  Outcome o;
  o.pass = all >= 4'500'000 && all <= 5'500'000 && g2 - im == adm - im && g2 > im;
  o.detail = fmt("ALL %zu params; IM %zu, 2DG +%zu, ADM +%zu, ALL +%zu", all, im, g2 - im, adm - im, all - im);
  return o;
}

double mean_sds(const Evaluation& e) { return e.sds.mean; }

Outcome c8() {
  set_num_threads(1);
  const fs::path dir = g_work / "overfit";
  fs::remove_all(dir);
  fs::create_directories(dir);
  if (shell({"synth", "--seed", "7", "--frames", "64", "--out", (dir / "data").string()}, dir / "synth.log") != 0)
    return {false, "synth failed"};
  const Dataset data = Dataset::load((dir / "data" / "manifest.tsv").string());
  SplitSpec ss;
  ss.seed = 1;
  const Split split = split_dataset(data.pullback_sizes(), ss);

  ModelConfig cfg = preset_config("deepcap-small");
  cfg.input_channels = 3;
  cfg.input_variant = "ALL";
  cfg.upsample = UpsampleMode::Transposed;
  const Model init = Model::build(cfg, 1);
  TrainOptions opt;
  opt.variant = InputVariant::ALL;
  opt.batch_size = 8;
  opt.epochs = 30;
  opt.seed = 1;
  opt.augment_options.crop = cfg.input_side;
  opt.on_epoch = [](const EpochRecord& e) {
    std::cerr << fmt("  overfit epoch %2d  train_loss %.5f  val_loss %.5f  val_sds %.4f\n", e.epoch, e.train_loss,
                     e.val_loss, e.val_sds);
  };
  const auto t0 = Clock::now();
  const TrainResult res = train(init, data, split, opt);
  const double train_s = seconds_since(t0);
  write_train_report_csv(res.report, (dir / "train_report.csv").string());

  const Predictor pred = model_predictor(res.model, InputVariant::ALL);
  const Evaluation tr = evaluate(data, data.frames_of(split.train), pred, 20.0);
  std::vector<std::size_t> held = split.val;
  held.insert(held.end(), split.test.begin(), split.test.end());
  const Evaluation ho = evaluate(data, data.frames_of(held), pred, 20.0);
  const double total_s = seconds_since(t0);

  const auto& ep = res.report.epochs;
  bool monotone = ep.size() >= 5;
  double prev_ma = 0;
  for (std::size_t i = 4; i < ep.size(); ++i) {
    double ma = 0;
    for (std::size_t k = i - 4; k <= i; ++k) ma += ep[k].train_loss / 5;
    if (i > 4 && !(ma < prev_ma)) monotone = false;
    prev_ma = ma;
  }
  Outcome o;
  o.pass = ep.size() == 30 && mean_sds(tr) >= 0.95 && mean_sds(ho) >= 0.90 && total_s < 1800 && monotone;
  o.detail = fmt("%zu params, %zu epochs (%s), train SDS %.4f, held-out SDS %.4f, loss MA5 %s, %.0fs (training %.0fs)",
                 init.param_count(), ep.size(), res.report.stop_reason.c_str(), mean_sds(tr), mean_sds(ho),
                 monotone ? "monotone" : "NOT monotone", total_s, train_s);
  return o;
}

fs::path small_manifest() {
  const fs::path dir = g_work / "small_data";
  if (!fs::exists(dir / "manifest.tsv")) {
    shell({"synth", "--seed", "11", "--frames", "16", "--pullbacks", "4", "--out", dir.string()},
          g_work / "synth.log");
  }
  return dir / "manifest.tsv";
}

bool has_summary_block(const std::string& text) {
  for (const char* key : {"sds:", "sensitivity:", "specificity:", "hausdorff_px:", "area_mm2:"}) {
    const auto at = text.find(key);
    if (at == std::string::npos) return false;
    const auto line = text.substr(at, text.find('\n', at) - at);
    if (line.find("±") == std::string::npos || line.find("median") == std::string::npos ||
        line.find("min-max") == std::string::npos)
      return false;
  }
  return true;
}

Outcome c9() {
  const fs::path manifest = small_manifest();
  int ok = 0, total = 0;
  std::string failures;
  for (const char* variant : {"IM", "2DG", "ADM", "ALL"})
    for (const char* mode : {"transposed", "bilinear"}) {
      ++total;
      const fs::path out = g_work / "ablation" / (std::string(variant) + "_" + mode);
      const fs::path log = g_work / "ablation" / (std::string(variant) + "_" + mode + ".log");
      fs::create_directories(out);
      const int rc = shell({"train", "--manifest", manifest.string(), "--seed", "4", "--out", out.string(),
                            "--config", "deepcap-small", "--variant", variant, "--upsample", mode, "--epochs", "1",
                            "--batch", "4"},
                           log);
      if (rc == 0 && has_summary_block(slurp(log))) ++ok;
      else failures += fmt(" %s/%s(rc=%d)", variant, mode, rc);
    }
  Outcome o;
  o.pass = ok == total;
  o.detail = fmt("%d/%d variant x upsample runs printed a summary block", ok, total) + failures;
  return o;
}

std::vector<std::vector<double>> report_values(const fs::path& csv) {
  std::vector<std::vector<double>> rows;
  const auto table = read_csv(csv.string());
  for (std::size_t i = 1; i < table.size(); ++i) {
    std::vector<double> r;
    for (const auto& f : table[i]) r.push_back(std::stod(f));
    rows.push_back(r);
  }
  return rows;
}

Outcome c10() {
  const fs::path manifest = small_manifest();
  auto run = [&](const std::string& name, const char* precision) {
    const fs::path out = g_work / "determinism" / name;
    fs::create_directories(out);
    const int rc = shell({"train", "--manifest", manifest.string(), "--seed", "5", "--out", out.string(), "--config",
                          "deepcap-small", "--epochs", "2", "--batch", "4", "--precision", precision},
                         g_work / "determinism" / (name + ".log"));
    return rc == 0 ? out / "train_report.csv" : fs::path();
  };
  const fs::path a64 = run("a64", "64"), b64 = run("b64", "64");
  const fs::path a32 = run("a32", "32"), b32 = run("b32", "32");
  Outcome o;
  if (a64.empty() || b64.empty() || a32.empty() || b32.empty()) {
    o.detail = "a training run failed";
    return o;
  }
  const bool bitwise = slurp(a64) == slurp(b64);
  const auto x = report_values(a32), y = report_values(b32);
  double worst = x.size() == y.size() && !x.empty() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j)
      worst = std::max(worst, std::abs(x[i][j] - y[i][j]) / std::max(std::abs(x[i][j]), 1e-30));
  o.pass = bitwise && worst <= 1e-5;
  o.detail = fmt("64-bit reports %s, 32-bit max relative difference %.1e", bitwise ? "bitwise identical" : "DIFFER",
                 worst);
  return o;
}

Outcome c11() {
  auto run = [](int side) {
    ModelConfig cfg = preset_config("deepcap-default");
    cfg.input_side = side;
    cfg.validate();
    BenchOptions opt;
    opt.batch_size = 48;
    opt.repetitions = 5;
    opt.warmup = 1;
    opt.threads = 1;
    opt.seed = 11;
    return bench_inference(Model::build(cfg, 11), opt);
  };
  const BenchReport big = run(256), small = run(128);
  write_bench_csv(big, (g_work / "bench_256.csv").string());
  write_bench_csv(small, (g_work / "bench_128.csv").string());
  const double ratio = big.ms_per_image / small.ms_per_image;
  const bool definition = std::abs(big.ms_per_image * 48 - big.mean_batch_ms) <= 1e-9 * big.mean_batch_ms;
  Outcome o;
  o.pass = ratio >= 2 && ratio <= 8 && definition && big.outputs_identical && small.outputs_identical &&
           big.threads == 1;
  o.detail = fmt("batch 48, 1 thread: 256^2 %.1f ms/image, 128^2 %.1f ms/image, ratio %.2f, outputs stable %s",
                 big.ms_per_image, small.ms_per_image, ratio,
                 big.outputs_identical && small.outputs_identical ? "yes" : "no");
  return o;
}

Outcome c12() {
  ModelConfig cfg = preset_config("deepcap-default");
  cfg.input_variant = "ALL";
  const Model m = Model::build(cfg, 12);
  const fs::path path = g_work / "default.dcap";
  save_checkpoint(m, path.string());
  const Model back = load_checkpoint(path.string());
  const bool exact = back.param_count() == m.param_count() && back.config() == m.config() &&
                     std::memcmp(back.parameters().data(), m.parameters().data(), 4 * m.param_count()) == 0;
  const std::string bytes = slurp(path);
  auto rejected = [&](const std::string& content, CheckpointError::Kind want) {
    const fs::path bad = g_work / "damaged.dcap";
    std::ofstream(bad, std::ios::binary).write(content.data(), static_cast<std::streamsize>(content.size()));
    try {
      load_checkpoint(bad.string());
    } catch (const CheckpointError& e) {
      return e.kind() == want;
    }
    return false;
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  const bool corrupt = rejected(flipped, CheckpointError::Kind::CorruptPayload);
  const bool truncated = rejected(bytes.substr(0, bytes.size() - 1000), CheckpointError::Kind::CorruptPayload);
  const std::uintmax_t size = disk_size(path.string());
  const std::uintmax_t expect = 16 + cfg.to_text().size() + 4 * m.param_count();
  Outcome o;
  o.pass = exact && corrupt && truncated && size == expect;
  o.detail = fmt("round trip %s, flipped byte %s, truncation %s, size %ju bytes (%.1f MB) = 16 + %zu header + 4 x %zu",
                 exact ? "bit-exact" : "DIFFERS", corrupt ? "rejected" : "ACCEPTED",
                 truncated ? "rejected" : "ACCEPTED", size, size / 1e6, cfg.to_text().size(), m.param_count());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = (fs::temp_directory_path() / "deepcap_acceptance").string();
  std::vector<int> only;
  app.add_option("--workdir", work, "scratch directory");
  app.add_option("--only", only, "run just these criteria")->delimiter(',');
  app.add_option("--cli", g_cli, "path to the deepcap executable");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"numeric kernel oracles", c1},  {"gradient suite", c2},      {"routing oracles", c3},
      {"squash law", c4},              {"metric oracles", c5},      {"shape contract", c6},
      {"parameter budget", c7},        {"overfit run", c8},         {"ablation harness", c9},
      {"determinism", c10},            {"benchmark methodology", c11}, {"checkpoint", c12}};
  std::ofstream report(g_work / "acceptance_report.txt", std::ios::trunc);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + "  " + std::to_string(id) + ". " +
                             criteria[i].first + ": " + o.detail;
    std::cout << line << std::endl;
    report << line << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
