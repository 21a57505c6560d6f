#include "deepcap/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "deepcap/bench.hpp"
#include "deepcap/csv.hpp"
#include "deepcap/dataset.hpp"
#include "deepcap/errors.hpp"
#include "deepcap/image_io.hpp"
#include "deepcap/model.hpp"
#include "deepcap/parallel.hpp"
#include "deepcap/synth.hpp"
#include "deepcap/training.hpp"

namespace deepcap {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kVariants{"IM", "2DG", "ADM", "ALL"};
const std::vector<std::string> kSubsets{"train", "val", "test", "all"};

ModelConfig resolve_config(const std::string& spec) {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), spec) != names.end()) return preset_config(spec);
  if (fs::exists(spec)) return load_config_file(spec);
  throw UsageError("--config: '" + spec + "' is neither a preset nor an existing file");
}

void ensure_dir(const std::string& dir) {
  try {
    fs::create_directories(dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create '" + dir + "': " + e.what());
  }
}

InputVariant checkpoint_variant(const Model& model, const std::optional<std::string>& flag) {
  const ModelConfig& cfg = model.config();
  if (flag) {
    const InputVariant v = parse_input_variant(*flag);
    if (channel_count(v) != cfg.input_channels) {
      throw UsageError("--variant " + *flag + " needs " + std::to_string(channel_count(v)) +
                       " input channels but the checkpoint has " + std::to_string(cfg.input_channels));
    }
    return v;
  }
  if (!cfg.input_variant.empty()) return parse_input_variant(cfg.input_variant);
  if (cfg.input_channels == 1) return InputVariant::IM;
  if (cfg.input_channels == 3) return InputVariant::ALL;
  throw UsageError("the checkpoint does not record its input variant; pass --variant 2DG or --variant ADM");
}

void write_split(const std::string& path, const Dataset& data, const Split& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  auto emit = [&](const std::vector<std::size_t>& ids, const char* name) {
    for (std::size_t p : ids) out << data.pullbacks()[p].id << '\t' << name << '\n';
  };
  emit(split.train, "train");
  emit(split.val, "val");
  emit(split.test, "test");
}

Split read_split(const std::string& path, const Dataset& data) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file '" + path + "'");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.pullbacks().size(); ++i) index[data.pullbacks()[i].id] = i;
  Split split;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(line_no) + ": expected id<TAB>subset");
    const std::string id = line.substr(0, tab);
    const std::string subset = line.substr(tab + 1);
    const auto it = index.find(id);
    if (it == index.end()) continue;
    if (subset == "train") split.train.push_back(it->second);
    else if (subset == "val") split.val.push_back(it->second);
    else if (subset == "test") split.test.push_back(it->second);
    else throw DataError(path + ":" + std::to_string(line_no) + ": unknown subset '" + subset + "'");
  }
  return split;
}

std::vector<Dataset::FrameRef> select_frames(const Dataset& data, const std::string& subset,
                                             const std::optional<std::uint64_t>& seed,
                                             const std::optional<std::string>& split_file) {
  const Subset s = parse_subset(subset);
  if (s == Subset::All) return data.frames_of(subset_pullbacks({}, s, data.pullbacks().size()));
  Split split;
  if (split_file) {
    split = read_split(*split_file, data);
  } else if (seed) {
    SplitSpec spec;
    spec.seed = *seed;
    split = split_dataset(data.pullback_sizes(), spec);
  } else {
    throw UsageError("--subset " + subset + " needs --seed (the training seed) or --split");
  }
  const auto frames = data.frames_of(subset_pullbacks(split, s, data.pullbacks().size()));
  if (frames.empty()) throw DataError("subset '" + subset + "' is empty");
  return frames;
}

struct SynthArgs {
  std::uint64_t seed = 0;
  int frames = 64;
  int pullbacks = 8;
  std::string out;
  std::string format = "png";
  PhantomSpec spec;
};

struct TrainArgs {
  std::string manifest;
  std::uint64_t seed = 0;
  std::string out;
  std::string variant = "ALL";
  std::optional<std::string> upsample;
  int epochs = 30;
  int batch = 24;
  double lr = 1e-3;
  double lambda = kDefaultLambda;
  int patience = 10;
  double warmup_fraction = 0.1;
  std::string config = "deepcap-default";
  int precision = 32;
  int threads = 1;
  bool no_augment = false;
  std::optional<std::string> init;
  double pixel_spacing = 20.0;
};

struct InferArgs {
  std::string ckpt;
  std::string manifest;
  std::string out;
  std::string subset = "all";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> split;
  std::optional<std::string> variant;
  std::string format = "png";
  int threads = 1;
};

struct EvalArgs {
  std::optional<std::string> ckpt;
  std::optional<std::string> predictions;
  std::string manifest;
  std::string subset = "all";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> split;
  std::optional<std::string> variant;
  std::optional<std::string> csv;
  double pixel_spacing = 20.0;
  int threads = 1;
};

struct BenchArgs {
  std::uint64_t seed = 0;
  std::optional<std::string> ckpt;
  std::string config = "deepcap-default";
  std::optional<int> input_side;
  std::optional<int> input_channels;
  int batch = 48;
  int reps = 5;
  int warmup = 1;
  int threads = 1;
  std::optional<std::string> csv;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  PhantomSpec spec = a.spec;
  spec.seed = a.seed;
  spec.n_frames = a.frames;
  const int pullbacks = std::min(a.pullbacks, a.frames);
  const auto data = generate_dataset(spec, pullbacks);
  const auto records = render_manifest(data, a.out, a.format == "pgm" ? ImageFormat::Pgm : ImageFormat::Png);
  out << "wrote " << records.size() << " frames in " << data.size() << " pullbacks to "
      << (fs::path(a.out) / "manifest.tsv").string() << "\n";
  return kExitOk;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  set_num_threads(a.threads);
  const InputVariant variant = parse_input_variant(a.variant);
  const Dataset data = Dataset::load(a.manifest);
  SplitSpec split_spec;
  split_spec.seed = a.seed;
  const Split split = split_dataset(data.pullback_sizes(), split_spec);

  Model initial;
  if (a.init) {
    initial = load_checkpoint(*a.init);
    if (initial.config().input_channels != channel_count(variant)) {
      throw UsageError("--init checkpoint has " + std::to_string(initial.config().input_channels) +
                       " input channels, variant " + a.variant + " needs " + std::to_string(channel_count(variant)));
    }
    if (a.upsample && parse_upsample_mode(*a.upsample) != initial.config().upsample) {
      throw UsageError("--upsample differs from the --init checkpoint");
    }
  } else {
    ModelConfig cfg = resolve_config(a.config);
    cfg.input_channels = channel_count(variant);
    cfg.input_variant = to_string(variant);
    if (a.upsample) cfg.upsample = parse_upsample_mode(*a.upsample);
    cfg.validate();
    initial = Model::build(cfg, a.seed);
  }

  TrainOptions opt;
  opt.variant = variant;
  opt.batch_size = a.batch;
  opt.lambda = a.lambda;
  opt.epochs = a.epochs;
  opt.seed = a.seed;
  opt.patience = a.patience;
  opt.peak_lr = a.lr;
  opt.warmup_fraction = a.warmup_fraction;
  opt.augment = !a.no_augment;
  opt.augment_options.crop = initial.config().input_side;
  opt.double_precision = a.precision == 64;
  opt.on_epoch = [&out](const EpochRecord& e) {
    out << "epoch " << e.epoch << "  train_loss " << format_double(e.train_loss) << "  val_loss "
        << format_double(e.val_loss) << "  val_sds " << format_double(e.val_sds) << "  lr " << format_double(e.lr)
        << std::endl;
  };

  ensure_dir(a.out);
  const TrainResult result = train(initial, data, split, opt);
  const fs::path dir(a.out);
  save_checkpoint(result.model, (dir / "model.dcap").string());
  write_train_report_csv(result.report, (dir / "train_report.csv").string());
  write_split((dir / "split.tsv").string(), data, split);

  const Predictor predict = model_predictor(result.model, variant);
  const Evaluation test = evaluate(data, data.frames_of(split.test), predict, a.pixel_spacing);
  write_eval_csv(test, (dir / "test_eval.csv").string());

  std::ostringstream summary;
  summary << "manifest: " << a.manifest << "\n";
  summary << "seed: " << a.seed << "\n";
  summary << "variant: " << to_string(variant) << "\n";
  summary << "upsample: " << to_string(result.model.config().upsample) << "\n";
  summary << "config: " << result.model.config().name << "\n";
  summary << "parameters: " << result.model.param_count() << "\n";
  summary << "epochs: " << a.epochs << "\n";
  summary << "batch_size: " << a.batch << "\n";
  summary << "peak_lr: " << format_double(a.lr) << "\n";
  summary << "warmup_fraction: " << format_double(a.warmup_fraction) << "\n";
  summary << "lambda: " << format_double(a.lambda) << "\n";
  summary << "patience: " << a.patience << "\n";
  summary << "min_delta: " << format_double(opt.min_delta) << "\n";
  summary << "clip_norm: " << format_double(opt.clip_norm) << "\n";
  summary << "augment: " << (opt.augment ? "on" : "off") << "\n";
  summary << "precision: " << a.precision << "\n";
  summary << "threads: " << a.threads << "\n";
  summary << "init: " << (a.init ? *a.init : std::string("none")) << "\n";
  summary << "split (pullbacks train/val/test): " << split.train.size() << "/" << split.val.size() << "/"
          << split.test.size() << "\n";
  summary << "epochs_run: " << result.report.epochs.size() << "\n";
  summary << "steps: " << result.report.steps << "\n";
  summary << "stop_reason: " << result.report.stop_reason << "\n";
  summary << "best_epoch: " << result.report.best_epoch << "\n";
  summary << "best_val_loss: " << format_double(result.report.best_val_loss) << "\n";
  summary << "wall_seconds: " << format_double(result.report.wall_seconds) << "\n";
  summary << "\ntest subset\n" << format_evaluation(test);
  std::ofstream sf(dir / "run_summary.txt", std::ios::trunc);
  if (!sf) throw IoError("cannot write '" + (dir / "run_summary.txt").string() + "'");
  sf << summary.str();
  out << "\n" << "test subset (" << to_string(variant) << ", " << to_string(result.model.config().upsample) << ")\n"
      << format_evaluation(test);
  return kExitOk;
}

int run_infer(const InferArgs& a, std::ostream& out) {
  set_num_threads(a.threads);
  const Model model = load_checkpoint(a.ckpt);
  const InputVariant variant = checkpoint_variant(model, a.variant);
  const std::vector<FrameRecord> records = read_manifest(a.manifest);
  const Dataset data = Dataset::from_records(records);
  const auto frames = select_frames(data, a.subset, a.seed, a.split);
  const Predictor predict = model_predictor(model, variant);
  ensure_dir(a.out);
  const char* ext = a.format == "pgm" ? "pgm" : "png";
  std::vector<FrameRecord> written(frames.size());
  parallel_for(0, frames.size(), [&](std::size_t i) {
    const Sample s = data.sample(frames[i]);
    const Mask crop = predict(s);
    Mask full(s.mask.height, s.mask.width);
    const int y0 = (full.height - crop.height) / 2;
    const int x0 = (full.width - crop.width) / 2;
    for (int y = 0; y < crop.height; ++y) {
      for (int x = 0; x < crop.width; ++x) full(y0 + y, x0 + x) = crop(y, x);
    }
    const FrameRecord& src = data.record(frames[i]);
    char name[64];
    std::snprintf(name, sizeof name, "pred_%04d.%s", src.frame_index, ext);
    const fs::path rel = fs::path(src.pullback_id) / name;
    ensure_dir((fs::path(a.out) / src.pullback_id).string());
    write_image((fs::path(a.out) / rel).string(), mask_to_image(full));
    written[i] = FrameRecord{src.pullback_id, src.frame_index, fs::absolute(src.image_path).string(), rel.string(),
                             src.frame_spacing_um};
  });
  write_manifest((fs::path(a.out) / "predictions.tsv").string(), written);
  out << "wrote " << written.size() << " masks and " << (fs::path(a.out) / "predictions.tsv").string() << "\n";
  return kExitOk;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  set_num_threads(a.threads);
  if (a.ckpt.has_value() == a.predictions.has_value()) {
    throw UsageError("eval needs exactly one of --ckpt or --predictions");
  }
  const Dataset data = Dataset::load(a.manifest);
  const auto frames = select_frames(data, a.subset, a.seed, a.split);
  Evaluation eval;
  if (a.ckpt) {
    const Model model = load_checkpoint(*a.ckpt);
    const InputVariant variant = checkpoint_variant(model, a.variant);
    eval = evaluate(data, frames, model_predictor(model, variant), a.pixel_spacing);
  } else {
    std::map<std::pair<std::string, int>, std::string> masks;
    for (const FrameRecord& r : read_manifest(*a.predictions)) masks[{r.pullback_id, r.frame_index}] = r.mask_path;
    const Predictor predict = [&masks](const Sample& s) {
      const auto it = masks.find({s.pullback_id, s.frame_index});
      if (it == masks.end()) {
        throw DataError("no prediction for pullback '" + s.pullback_id + "' frame " + std::to_string(s.frame_index));
      }
      return image_to_mask(read_image(it->second));
    };
    eval = evaluate(data, frames, predict, a.pixel_spacing);
  }
  if (a.csv) write_eval_csv(eval, *a.csv);
  out << "subset " << a.subset << "\n" << format_evaluation(eval);
  return kExitOk;
}

int run_bench(const BenchArgs& a, std::ostream& out) {
  Model model;
  if (a.ckpt) {
    if (a.input_side || a.input_channels) throw UsageError("--input-side/--input-channels cannot be combined with --ckpt");
    model = load_checkpoint(*a.ckpt);
  } else {
    ModelConfig cfg = resolve_config(a.config);
    if (a.input_side) cfg.input_side = *a.input_side;
    if (a.input_channels) cfg.input_channels = *a.input_channels;
    cfg.validate();
    model = Model::build(cfg, a.seed);
  }
  BenchOptions opt;
  opt.batch_size = a.batch;
  opt.repetitions = a.reps;
  opt.warmup = a.warmup;
  opt.threads = a.threads;
  opt.seed = a.seed;
  const BenchReport report = bench_inference(model, opt);
  if (a.csv) write_bench_csv(report, *a.csv);
  out << format_bench(report);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"deepcap: capsule-network lumen segmentation"};
  app.name("deepcap");
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "render a synthetic phantom dataset");
  synth->add_option("--seed", sa.seed, "random seed")->required();
  synth->add_option("--frames", sa.frames, "total frame count")->check(CLI::PositiveNumber);
  synth->add_option("--pullbacks", sa.pullbacks, "number of pullbacks")->check(CLI::PositiveNumber);
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--format", sa.format, "image format")->check(CLI::IsMember({"png", "pgm"}));
  synth->add_option("--pixel-spacing", sa.spec.pixel_spacing_um, "pixel spacing in microns");
  synth->add_option("--frame-spacing", sa.spec.frame_spacing_um, "frame spacing in microns");
  synth->add_option("--noise", sa.spec.noise_level, "speckle half-width");
  synth->add_option("--artifact-rate", sa.spec.artifact_rate, "blood/light artifact probability");
  synth->add_option("--stent-rate", sa.spec.stent_rate, "stent probability");
  synth->add_option("--bifurcation-rate", sa.spec.bifurcation_rate, "bifurcation probability");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train a model on a manifest");
  trn->add_option("--manifest", ta.manifest, "dataset manifest")->required();
  trn->add_option("--seed", ta.seed, "random seed (init, split, shuffling, augmentation)")->required();
  trn->add_option("--out", ta.out, "output directory")->required();
  trn->add_option("--variant", ta.variant, "input variant")->check(CLI::IsMember(kVariants));
  trn->add_option("--upsample", ta.upsample, "upsampling mode")->check(CLI::IsMember({"transposed", "bilinear"}));
  trn->add_option("--epochs", ta.epochs, "maximum epochs")->check(CLI::PositiveNumber);
  trn->add_option("--batch", ta.batch, "batch size")->check(CLI::PositiveNumber);
  trn->add_option("--lr", ta.lr, "peak learning rate")->check(CLI::PositiveNumber);
  trn->add_option("--lambda", ta.lambda, "dice term weight")->check(CLI::NonNegativeNumber);
  trn->add_option("--patience", ta.patience, "early stopping patience")->check(CLI::PositiveNumber);
  trn->add_option("--warmup-fraction", ta.warmup_fraction, "fraction of steps in the warmup ramp")
      ->check(CLI::Range(0.0, 1.0));
  trn->add_option("--config", ta.config, "preset name or key = value config file");
  trn->add_option("--precision", ta.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  trn->add_option("--threads", ta.threads, "worker threads")->check(CLI::PositiveNumber);
  trn->add_flag("--no-augment", ta.no_augment, "train on center crops only");
  trn->add_option("--init", ta.init, "start from this checkpoint (the schedule restarts)");
  trn->add_option("--pixel-spacing", ta.pixel_spacing, "pixel spacing in microns")->check(CLI::PositiveNumber);

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "write predicted masks");
  inf->add_option("--ckpt", ia.ckpt, "checkpoint")->required();
  inf->add_option("--manifest", ia.manifest, "dataset manifest")->required();
  inf->add_option("--out", ia.out, "output directory")->required();
  inf->add_option("--subset", ia.subset, "subset")->check(CLI::IsMember(kSubsets));
  inf->add_option("--seed", ia.seed, "training seed used for the split");
  inf->add_option("--split", ia.split, "split.tsv written by train");
  inf->add_option("--variant", ia.variant, "input variant")->check(CLI::IsMember(kVariants));
  inf->add_option("--format", ia.format, "mask format")->check(CLI::IsMember({"png", "pgm"}));
  inf->add_option("--threads", ia.threads, "worker threads")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "per-image metrics and summary");
  evl->add_option("--ckpt", ea.ckpt, "checkpoint");
  evl->add_option("--predictions", ea.predictions, "manifest of predicted masks (from infer)");
  evl->add_option("--manifest", ea.manifest, "ground-truth manifest")->required();
  evl->add_option("--subset", ea.subset, "subset")->check(CLI::IsMember(kSubsets));
  evl->add_option("--seed", ea.seed, "training seed used for the split");
  evl->add_option("--split", ea.split, "split.tsv written by train");
  evl->add_option("--variant", ea.variant, "input variant")->check(CLI::IsMember(kVariants));
  evl->add_option("--csv", ea.csv, "per-image CSV output");
  evl->add_option("--pixel-spacing", ea.pixel_spacing, "pixel spacing in microns")->check(CLI::PositiveNumber);
  evl->add_option("--threads", ea.threads, "worker threads")->check(CLI::PositiveNumber);

  BenchArgs ba;
  auto* bch = app.add_subcommand("bench", "inference latency");
  bch->add_option("--seed", ba.seed, "seed for weights and inputs")->required();
  bch->add_option("--ckpt", ba.ckpt, "checkpoint (default: freshly initialised --config)");
  bch->add_option("--config", ba.config, "preset name or config file");
  bch->add_option("--input-side", ba.input_side, "override the input side")->check(CLI::PositiveNumber);
  bch->add_option("--input-channels", ba.input_channels, "override the input channel count")
      ->check(CLI::Range(1, 3));
  bch->add_option("--batch", ba.batch, "batch size")->check(CLI::PositiveNumber);
  bch->add_option("--reps", ba.reps, "timed repetitions (>= 5)")->check(CLI::Range(5, 1000000));
  bch->add_option("--warmup", ba.warmup, "warmup repetitions")->check(CLI::NonNegativeNumber);
  bch->add_option("--threads", ba.threads, "worker threads")->check(CLI::PositiveNumber);
  bch->add_option("--csv", ba.csv, "per-repetition CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return run_synth(sa, out);
    if (*trn) return run_train(ta, out);
    if (*inf) return run_infer(ia, out);
    if (*evl) return run_eval(ea, out);
    if (*bch) return run_bench(ba, out);
  } catch (const UsageError& e) {
    err << "deepcap: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "deepcap: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace deepcap
