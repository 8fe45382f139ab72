#pragma once

// Command-line front end. Every run writes into its own directory together
// with run.json (argv, effective options, seed, library versions, status).
//
// Exit codes: 0 success, 1 runtime failure, 2 bad flags or invalid config.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bonegan/checkpoint.hpp"
#include "bonegan/datapipe.hpp"
#include "bonegan/diffmorph.hpp"
#include "bonegan/error.hpp"
#include "bonegan/evalsuite.hpp"
#include "bonegan/genmodels.hpp"
#include "bonegan/morphometry.hpp"
#include "bonegan/styletransfer.hpp"
#include "bonegan/training.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

// Compute device from BONEGAN_DEVICE ("cpu", "cuda", "cuda:1"); cpu when unset.
inline torch::Device device_from_env() {
  const char* v = std::getenv("BONEGAN_DEVICE");
  if (!v || !*v) return torch::kCPU;
  try {
    torch::Device d(v);
    if (d.is_cuda() && !torch::cuda::is_available())
      throw ConfigError(std::string("BONEGAN_DEVICE=") + v + " but no CUDA device is available");
    return d;
  } catch (const c10::Error&) {
    throw ConfigError(std::string("BONEGAN_DEVICE has an invalid value '") + v + "'");
  }
}

inline json versions() {
  return {{"bonegan", kVersion},
          {"torch", TORCH_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"compiler", __VERSION__}};
}

inline std::string utc_now(const char* fmt = "%Y-%m-%dT%H:%M:%SZ") {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, fmt);
  return os.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  volcore::detail::write_file_atomic(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + " is not valid JSON: " + e.what());
  }
}

// Per-run output directory plus its reproducibility record.
class Run {
 public:
  Run(std::string command, std::vector<std::string> argv, const std::string& base, const std::string& explicit_dir)
      : command_(std::move(command)), argv_(std::move(argv)) {
    if (!explicit_dir.empty()) {
      dir_ = explicit_dir;
      if (fs::exists(dir_) && !fs::is_empty(dir_)) throw IoError("run directory is not empty: " + dir_.string());
    } else {
      const auto stem = command_ + "-" + utc_now("%Y%m%d-%H%M%S");
      dir_ = fs::path(base) / stem;
      for (int k = 2; fs::exists(dir_); ++k) dir_ = fs::path(base) / (stem + "-" + std::to_string(k));
    }
    fs::create_directories(dir_);
    record_ = {{"command", command_},     {"argv", argv_},         {"started_utc", utc_now()},
               {"versions", versions()},   {"status", "running"}};
    flush();
  }

  const fs::path& dir() const { return dir_; }
  json& record() { return record_; }
  void finish(const std::string& status) {
    record_["status"] = status;
    record_["finished_utc"] = utc_now();
    flush();
  }
  void flush() { write_text(dir_ / "run.json", record_.dump(2) + "\n"); }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  fs::path dir_;
  json record_;
};

// Average-pools a normalized patch by an integer factor (linear, so it
// commutes with denormalization).
inline volcore::NormalizedPatch pool_patch(const volcore::NormalizedPatch& p, std::size_t factor) {
  if (factor <= 1) return p;
  const std::size_t n = p.edge();
  if (n % factor) throw InvalidInput("patch edge not divisible by pooling factor");
  const std::size_t m = n / factor;
  std::vector<float> out(m * m * m, 0.0f);
  const auto v = p.values();
  const float w = 1.0f / static_cast<float>(factor * factor * factor);
  for (std::size_t z = 0; z < n; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        out[((z / factor) * m + y / factor) * m + x / factor] += w * v[(z * n + y) * n + x];
  return volcore::NormalizedPatch(volcore::cube(m), p.voxel_size_um() * static_cast<float>(factor), std::move(out),
                                  p.provenance());
}

inline std::vector<fs::path> svol_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".svol") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Corpus directory (with manifest) or a plain directory of SVOL patches.
inline std::vector<volcore::NormalizedPatch> load_patches(const fs::path& dir, volcore::CalibrationRange& range) {
  if (fs::exists(dir / "manifest.json")) {
    auto c = datapipe::load_corpus(dir);
    range = c.manifest.range;
    return std::move(c.patches);
  }
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<volcore::NormalizedPatch> out;
  for (const auto& f : svol_files(dir)) {
    if (volcore::read_svol_header(f).dtype == volcore::SvolDtype::normalized) {
      auto n = volcore::read_normalized_svol(f);
      range = n.range;
      out.push_back(std::move(n.patch));
    } else {
      out.push_back(volcore::normalize(volcore::read_svol(f), range).patch);
    }
  }
  if (out.empty()) throw InvalidInput("no .svol patches in " + dir.string());
  return out;
}

inline std::vector<genmodels::LatentVector> latents(std::uint64_t seed, int n, int dim) {
  std::mt19937_64 rng(seed);
  std::vector<genmodels::LatentVector> zs;
  for (int i = 0; i < n; ++i) zs.push_back(genmodels::sample_latent(rng, dim));
  return zs;
}

inline std::string indexed(const std::string& stem, std::size_t i, const char* ext = ".svol") {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04zu", i);
  return stem + buf + ext;
}

// ---------------------------------------------------------------------------
// Subcommand option blocks

struct Common {
  std::string out = "runs";
  std::string run_dir;
};

struct PhantomOpts {
  std::string spec;
  int count = 1;
  std::uint64_t seed = 0;
  std::size_t size = 0;
  int plates = -1, rods = -1;
};

struct CorpusOpts {
  std::vector<std::string> inputs;
  std::vector<std::string> masks;
  std::size_t size = 32, stride = 8;
  bool no_augment = false;
  std::vector<double> calibration;
};

struct TrainOpts {
  std::string corpus;
  std::string train_config;
  std::string variant;
  std::string order;
  std::int64_t seed = -1;
  int stages = 0, epochs_train = -1, epochs_blend = -1, first_stage_epochs = -1, batch_size = 0;
  double lr = 0;
  std::size_t max_patches = 0;
};

struct GenerateOpts {
  std::string checkpoint;
  int n = 1;
  std::uint64_t seed = 0;
  bool no_ema = false;
  int stage = -1;
};

struct AnalyzeOpts {
  std::vector<std::string> files;
  double threshold = morphometry::kDefaultThreshold;
};

struct StyleOpts {
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::int64_t target_seed = -1;
  std::vector<std::string> target;  // name=value, unweighted units
  double mu = style::kDefaultMu;
  bool mu_literal = false;
  int starts = 4;
  int max_iter = 500;
  std::string grid;                  // RxC
  std::vector<std::string> axes{"bvtv", "tmd"};
  std::vector<double> steps;         // unweighted units; default half a sample SD
  std::string presets;
  std::string preset;
  std::vector<double> months;
  int calibration_samples = 64;
  int precision = 32;
  bool no_ema = false;
};

struct EvaluateOpts {
  std::vector<std::string> groups;       // label=dir
  std::vector<std::string> checkpoints;  // label=file
  std::size_t samples = 700;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  std::vector<std::string> pca_params;
};

// ---------------------------------------------------------------------------
// Commands

inline void cmd_phantom(const PhantomOpts& o, Run& run, std::ostream& out) {
  datapipe::PhantomSpec base;
  if (!o.spec.empty()) base = datapipe::phantom_spec_from_json(read_json(o.spec));
  if (o.size) base.dims = volcore::cube(o.size);
  if (o.plates >= 0) base.plates = o.plates;
  if (o.rods >= 0) base.rods = o.rods;
  if (o.count < 1) throw ConfigError("--count must be >= 1");
  base.validate();
  json list = json::array();
  for (int i = 0; i < o.count; ++i) {
    auto s = base;
    s.seed = o.seed + static_cast<std::uint64_t>(i);
    const auto v = datapipe::phantom_volume(s);
    const auto name = indexed("phantom", static_cast<std::size_t>(i));
    volcore::write_svol(v, run.dir() / name, s.range);
    const auto p = morphometry::compute_all(v);
    list.push_back({{"file", name}, {"spec", datapipe::to_json(s)}, {"bvtv", p.bvtv}, {"bmd", p.bmd}});
    out << name << " bvtv=" << p.bvtv << " bmd=" << p.bmd << "\n";
  }
  write_text(run.dir() / "phantoms.json", list.dump(1) + "\n");
}

inline void cmd_corpus(const CorpusOpts& o, Run& run, std::ostream& out) {
  if (!o.masks.empty() && o.masks.size() != o.inputs.size())
    throw ConfigError("--mask must be given once per --input");
  volcore::CalibrationRange range;
  if (!o.calibration.empty()) {
    if (o.calibration.size() != 2) throw ConfigError("--calibration takes two values (lo hi)");
    range = {o.calibration[0], o.calibration[1]};
  }
  range.validate();
  datapipe::PatchSpec spec;
  spec.size = o.size;
  spec.stride = o.stride;
  spec.validate();
  std::vector<datapipe::SourceVolume> vols;
  for (std::size_t i = 0; i < o.inputs.size(); ++i) {
    datapipe::SourceVolume sv{fs::path(o.inputs[i]).filename().string(), volcore::read_any_as_density(o.inputs[i]),
                              std::nullopt};
    if (!o.masks.empty()) {
      const auto m = volcore::read_any_as_density(o.masks[i]);
      if (!(m.dims() == sv.volume.dims())) throw InvalidInput("mask dims differ from " + o.inputs[i]);
      std::vector<std::uint8_t> mask(m.size());
      for (std::size_t k = 0; k < m.size(); ++k) mask[k] = m.values()[k] != 0.0f;
      sv.mask = std::move(mask);
    }
    vols.push_back(std::move(sv));
  }
  const auto m = datapipe::build_corpus(vols, spec, !o.no_augment, run.dir() / "corpus", range);
  run.record()["corpus"] = {{"raw_count", m.raw_count}, {"count", m.count()}};
  out << "corpus: " << m.raw_count << " raw patches, " << m.count() << " written to " << (run.dir() / "corpus").string()
      << "\n";
}

inline void cmd_train(const TrainOpts& o, Run& run, std::ostream& out) {
  training::TrainConfig c;
  if (!o.train_config.empty()) c = training::train_config_from_json(read_json(o.train_config));
  try {
    if (!o.variant.empty()) c = c.with_variant(training::parse_variant(o.variant));
    if (!o.order.empty()) c.order = training::parse_order(o.order);
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (o.seed >= 0) c.seed = static_cast<std::uint64_t>(o.seed);
  if (o.stages > 0) c.stages = o.stages;
  if (o.epochs_train >= 0) c.epochs_train_per_stage = o.epochs_train;
  if (o.epochs_blend >= 0) c.epochs_blend_per_stage = o.epochs_blend;
  if (o.first_stage_epochs >= 0) c.first_stage_epochs = o.first_stage_epochs;
  if (o.batch_size > 0) c.batch_size = o.batch_size;
  if (o.lr > 0) c.learning_rate = o.lr;
  c.validate();
  const auto device = device_from_env();
  run.record()["train_config"] = training::to_json(c);
  run.record()["device"] = device.str();
  run.flush();

  volcore::CalibrationRange range;
  auto patches = load_patches(o.corpus, range);
  if (o.max_patches && patches.size() > o.max_patches) {
    std::mt19937_64 rng(c.seed);
    std::shuffle(patches.begin(), patches.end(), rng);
    patches.erase(patches.begin() + static_cast<std::ptrdiff_t>(o.max_patches), patches.end());
  }
  const auto data = training::TrainingData::from_patches(patches, range);
  training::TrainOptions topts;
  topts.checkpoint_dir = run.dir();
  topts.device = device;
  topts.progress = [&](const std::string& s) { out << s << "\n" << std::flush; };
  const auto result = training::train_progressive(data, c, topts);
  {
    std::ofstream log(run.dir() / "metrics.jsonl");
    result.log.write_jsonl(log);
  }
  const auto d = training::diversity(result.final_checkpoint(), data, c.diversity_samples, c.seed, c.collapse_ratio);
  const json dj = {{"generated", d.generated}, {"real", d.real}, {"ratio", d.ratio}, {"collapse", d.collapse}};
  write_text(run.dir() / "diversity.json", dj.dump(2) + "\n");
  run.record()["result"] = {{"seconds", result.seconds}, {"diversity", dj}};
  out << "trained " << training::to_string(c.variant) << " in " << result.seconds << " s; diversity ratio " << d.ratio
      << (d.collapse ? " (mode collapse)" : "") << "\n";
}

inline void cmd_generate(const GenerateOpts& o, Run& run, std::ostream& out) {
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  const auto ck = checkpoint::load(o.checkpoint);
  const auto zs = latents(o.seed, o.n, ck.network.latent_dim);
  json list = json::array();
  for (std::size_t i = 0; i < zs.size(); ++i) {
    const auto p = checkpoint::generate(ck, zs[i], !o.no_ema, o.stage >= 0 ? std::optional<int>(o.stage) : std::nullopt);
    const auto name = indexed("sample", i);
    volcore::write_svol(p, run.dir() / name);
    list.push_back({{"file", name}, {"latent", zs[i].values()}});
  }
  write_text(run.dir() / "samples.json", list.dump(1) + "\n");
  out << "wrote " << zs.size() << " samples (" << ck.stage.resolution() << "^3) to " << run.dir().string() << "\n";
}

inline void cmd_analyze(const AnalyzeOpts& o, Run& run, std::ostream& out) {
  const morphometry::Threshold th{o.threshold};
  th.validate();
  std::ostringstream csv;
  morphometry::write_csv_header(csv, th);
  for (const auto& f : o.files) {
    const auto v = volcore::read_any_as_density(f);
    morphometry::write_csv_row(csv, morphometry::compute_all(v, th), f);
  }
  write_text(run.dir() / "morphometry.csv", csv.str());
  out << csv.str();
}

inline std::pair<int, int> parse_grid(const std::string& g) {
  const auto x = g.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("x");
    std::size_t a = 0, b = 0;
    const int r = std::stoi(g.substr(0, x), &a), c = std::stoi(g.substr(x + 1), &b);
    if (a != x || b != g.size() - x - 1 || r < 1 || c < 1) throw std::invalid_argument("x");
    return {r, c};
  } catch (const std::exception&) {
    throw ConfigError("--grid expects ROWSxCOLS, e.g. 5x5 (got '" + g + "')");
  }
}

inline void write_style_csv_header(std::ostream& os, const std::string& first) {
  os << first;
  for (const char* s : {"target", "achieved"})
    for (const char* n : style::kComponentNames) os << "," << s << "_" << n;
  os << ",style_residual,content_residual,objective";
  for (const char* n : morphometry::ParamVector::kNames) os << ",classic_" << n;
  os << ",status\n";
}

inline void write_style_csv_row(std::ostream& os, const std::string& first, const style::Style4& target,
                                const style::Style4& achieved, const style::OptimizeResult& r,
                                const morphometry::ParamVector& classic, const std::string& status) {
  os.precision(10);
  os << first;
  for (double v : target) os << "," << v;
  for (double v : achieved) os << "," << v;
  os << "," << r.final.style << "," << r.final.content << "," << r.final.value;
  for (const auto& v : classic.as_array()) os << "," << morphometry::format_value(v);
  os << "," << status << "\n";
}

inline void cmd_style(const StyleOpts& o, Run& run, std::ostream& out) {
  const int modes = (!o.grid.empty()) + (!o.preset.empty()) + (o.target_seed >= 0 || !o.target.empty());
  if (modes != 1) throw ConfigError("choose exactly one of --grid, --preset, or a target (--target-seed / --target)");
  if (o.starts < 1 || o.max_iter < 1) throw ConfigError("--starts and --max-iter must be >= 1");
  const double mu = o.mu_literal ? style::kLiteralMu : o.mu;
  if (!(mu >= 0)) throw ConfigError("--mu must be >= 0");

  const auto ck = checkpoint::load(o.checkpoint);
  auto g = checkpoint::load_generator(ck, !o.no_ema);
  style::StyleModel model(g, {}, {}, volcore::kDefaultVoxelSizeUm);
  if (o.precision == 64) model.set_precision(torch::kDouble);
  const auto alphas = model.calibrate_alphas(o.calibration_samples, o.seed + 1);
  style::OptimizeOptions opts;
  opts.starts = o.starts;
  opts.seed = o.seed;
  opts.lbfgs.max_iterations = o.max_iter;
  run.record()["style"] = {{"mu", mu}, {"alphas", alphas}, {"stage", ck.stage.stage}, {"precision", o.precision}};
  run.flush();

  const auto center = latents(o.seed, 1, model.latent_dim())[0];
  const auto zc = style::StyleModel::to_vector(center);
  volcore::write_svol(model.patch(zc), run.dir() / "content.svol");
  const auto base_raw = model.raw_params(zc);
  std::ostringstream csv;

  if (!o.grid.empty()) {
    const auto [rows, cols] = parse_grid(o.grid);
    if (o.axes.size() != 2) throw ConfigError("--axes takes two component names");
    style::GridAxis a{style::component_index(o.axes[0]), 0}, b{style::component_index(o.axes[1]), 0};
    if (!o.steps.empty() && o.steps.size() != 2) throw ConfigError("--steps takes two values");
    a.step = o.steps.empty() ? 0.5 / alphas[a.component] : o.steps[0];
    b.step = o.steps.empty() ? 0.5 / alphas[b.component] : o.steps[1];
    const auto cells = style::parameter_grid(model, center, a, b, rows, cols, mu, opts);
    write_style_csv_header(csv, "cell,row,col");
    int failed = 0;
    for (const auto& c : cells) {
      char name[48];
      std::snprintf(name, sizeof name, "cell_r%02d_c%02d.svol", c.row, c.col);
      std::ostringstream id;
      id << name << "," << c.row << "," << c.col;
      if (c.result) {
        volcore::write_svol(model.patch(style::StyleModel::to_vector(c.result->z)), run.dir() / name);
        write_style_csv_row(csv, id.str(), c.target_raw, c.achieved_raw, *c.result, c.classic, c.status);
      } else {
        csv << id.str() << ",failed: " << c.status << "\n";
      }
      failed += !c.ok;
    }
    write_text(run.dir() / "grid.csv", csv.str());
    out << "grid " << rows << "x" << cols << ": " << cells.size() << " cells, " << failed << " failed\n";
    return;
  }

  style::StyleTarget t;
  t.content = model.volume(zc).clone();
  t.mu = mu;

  if (!o.preset.empty()) {
    if (o.presets.empty()) throw ConfigError("--preset needs --presets FILE");
    if (o.months.empty()) throw ConfigError("--preset needs --months");
    const auto presets = style::presets_from_json(read_json(o.presets));
    const auto& preset = style::find_preset(presets, o.preset);
    if (preset.non_clinical) out << "note: preset '" << preset.name << "' carries placeholder, non-clinical magnitudes\n";
    write_style_csv_header(csv, "months");
    for (std::size_t i = 0; i < o.months.size(); ++i) {
      const auto raw = style::treatment_shift(base_raw, preset, o.months[i]);
      t.w = style::weighted(raw, alphas);
      const auto r = style::optimize_latent(model, t, {center}, opts);
      const auto z = style::StyleModel::to_vector(r.z);
      volcore::write_svol(model.patch(z), run.dir() / indexed("treatment", i));
      std::ostringstream id;
      id << o.months[i];
      write_style_csv_row(csv, id.str(), raw, model.raw_params(z), r, model.classic_params(z),
                          r.success ? "ok" : "failed");
    }
    write_text(run.dir() / "treatment.csv", csv.str());
    out << "treatment '" << preset.name << "': " << o.months.size() << " time points\n";
    return;
  }

  style::Style4 raw = base_raw;
  if (o.target_seed >= 0) raw = model.raw_params(style::StyleModel::to_vector(
                              latents(static_cast<std::uint64_t>(o.target_seed), 1, model.latent_dim())[0]));
  for (const auto& kv : o.target) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--target expects name=value (got '" + kv + "')");
    try {
      raw[static_cast<std::size_t>(style::component_index(kv.substr(0, eq)))] = std::stod(kv.substr(eq + 1));
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    } catch (const std::exception&) {
      throw ConfigError("bad --target value '" + kv + "'");
    }
  }
  t.w = style::weighted(raw, alphas);
  const auto r = style::optimize_latent(model, t, {center}, opts);
  const auto z = style::StyleModel::to_vector(r.z);
  volcore::write_svol(model.patch(z), run.dir() / "result.svol");
  write_style_csv_header(csv, "run");
  write_style_csv_row(csv, "result", raw, model.raw_params(z), r, model.classic_params(z), r.success ? "ok" : "failed");
  write_text(run.dir() / "result.csv", csv.str());
  std::ostringstream trace;
  trace << "start,iteration,objective,style_residual,content_residual,best_so_far\n";
  trace.precision(10);
  for (const auto& rec : r.trace)
    trace << rec.start << "," << rec.iteration << "," << rec.objective << "," << rec.style << "," << rec.content << ","
          << rec.best_so_far << "\n";
  write_text(run.dir() / "trace.csv", trace.str());
  run.record()["style"]["result"] = r.metadata();
  out << "style residual " << r.initial.style << " -> " << r.final.style << (r.success ? "" : " (not converged)")
      << "\n";
  if (!r.success) throw Error("optimization_failed", "latent optimization hit non-finite objective values");
}

inline std::pair<std::string, std::string> split_label(const std::string& s, const char* flag) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
    throw ConfigError(std::string(flag) + " expects label=path (got '" + s + "')");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

inline void cmd_evaluate(const EvaluateOpts& o, Run& run, std::ostream& out) {
  evalsuite::ReportOptions ropts;
  ropts.alpha = o.alpha;
  if (!o.pca_params.empty()) {
    ropts.pca_parameters.clear();
    try {
      for (const auto& p : o.pca_params) ropts.pca_parameters.push_back(morphometry::parameter_index(p));
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
  }
  struct Source {
    std::string label;
    std::vector<volcore::NormalizedPatch> patches;
    volcore::CalibrationRange range;
  };
  std::vector<Source> sources;
  for (const auto& g : o.groups) {
    auto [label, path] = split_label(g, "--group");
    Source s{label, {}, {}};
    s.patches = load_patches(path, s.range);
    sources.push_back(std::move(s));
  }
  std::mt19937_64 rng(o.seed);
  for (const auto& c : o.checkpoints) {
    auto [label, path] = split_label(c, "--checkpoint");
    const auto ck = checkpoint::load(path);
    Source s{label, {}, {}};
    for (const auto& z : latents(rng(), static_cast<int>(o.samples), ck.network.latent_dim))
      s.patches.push_back(checkpoint::generate(ck, z));
    sources.push_back(std::move(s));
  }
  if (sources.empty()) throw ConfigError("evaluate needs at least one --group or --checkpoint");
  // Compare at a common resolution: pool larger patches down to the smallest edge.
  std::size_t edge = std::numeric_limits<std::size_t>::max();
  for (const auto& s : sources) edge = std::min(edge, s.patches.front().edge());

  std::vector<evalsuite::GroupSample> groups;
  json sizes = json::object();
  for (auto& s : sources) {
    std::shuffle(s.patches.begin(), s.patches.end(), rng);
    if (s.patches.size() > o.samples) s.patches.erase(s.patches.begin() + static_cast<std::ptrdiff_t>(o.samples), s.patches.end());
    for (auto& p : s.patches) p = pool_patch(p, p.edge() / edge);
    groups.push_back({s.label, evalsuite::evaluate(s.patches, s.range)});
    sizes[s.label] = s.patches.size();
  }
  const auto report = evalsuite::summary_report(groups, ropts);
  evalsuite::write_report(report, run.dir());
  run.record()["evaluate"] = {{"group_sizes", sizes}, {"resolution", edge}, {"threshold", morphometry::kDefaultThreshold}};
  out << evalsuite::to_markdown(report);
}

// ---------------------------------------------------------------------------
// Dispatch

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Progressive 3D GAN toolkit for trabecular bone micro-structure"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "TOML run config; command-line flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--out", common.out, "Base directory for timestamped run directories")->capture_default_str();
    s->add_option("--run-dir", common.run_dir, "Exact run directory (must be empty or absent)");
    s->allow_config_extras(CLI::config_extras_mode::error);
  };

  PhantomOpts ph;
  auto* s_ph = app.add_subcommand("phantom", "Generate synthetic rod-plate phantoms as SVOL volumes");
  add_common(s_ph);
  s_ph->add_option("--spec", ph.spec, "Phantom spec JSON (unknown keys rejected)")->check(CLI::ExistingFile);
  s_ph->add_option("--count", ph.count, "Number of phantoms")->capture_default_str();
  s_ph->add_option("--seed", ph.seed, "Seed of the first phantom; phantom i uses seed + i")->capture_default_str();
  s_ph->add_option("--size", ph.size, "Cubic box edge in voxels (overrides spec)");
  s_ph->add_option("--plates", ph.plates, "Plate count (overrides spec)");
  s_ph->add_option("--rods", ph.rods, "Rod count (overrides spec)");

  CorpusOpts co;
  auto* s_co = app.add_subcommand("corpus", "Extract, augment and normalize training patches");
  add_common(s_co);
  s_co->add_option("--input", co.inputs, "Source SVOL volume(s)")->required()->check(CLI::ExistingFile);
  s_co->add_option("--mask", co.masks, "Spongiosa mask SVOL per input (nonzero = inside)")->check(CLI::ExistingFile);
  s_co->add_option("--size", co.size, "Patch edge")->capture_default_str();
  s_co->add_option("--stride", co.stride, "Grid stride")->capture_default_str();
  s_co->add_flag("--no-augment", co.no_augment, "Skip the 16-element augmentation");
  s_co->add_option("--calibration", co.calibration, "Calibration range lo hi (mg/cm3)")->expected(2);

  TrainOpts tr;
  auto* s_tr = app.add_subcommand("train", "Train a generator (pwgan-gp | wgan-gp | gan | wgan-clip)");
  add_common(s_tr);
  s_tr->add_option("--corpus", tr.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  s_tr->add_option("--train-config", tr.train_config, "Training config JSON")->check(CLI::ExistingFile);
  s_tr->add_option("--variant", tr.variant, "pwgan-gp | wgan-gp | gan | wgan-clip");
  s_tr->add_option("--order", tr.order, "fade_then_stabilize | stabilize_then_fade");
  s_tr->add_option("--seed", tr.seed, "Training seed");
  s_tr->add_option("--stages", tr.stages, "Number of resolution stages (3 caps at 16^3)");
  s_tr->add_option("--epochs-train", tr.epochs_train, "Stabilization epochs per stage");
  s_tr->add_option("--epochs-blend", tr.epochs_blend, "Fade-in epochs per stage");
  s_tr->add_option("--first-stage-epochs", tr.first_stage_epochs, "Epochs at the 4^3 stage");
  s_tr->add_option("--batch-size", tr.batch_size, "Mini-batch size");
  s_tr->add_option("--lr", tr.lr, "Adam learning rate");
  s_tr->add_option("--max-patches", tr.max_patches, "Random subset of the corpus (0 = all)");

  GenerateOpts ge;
  auto* s_ge = app.add_subcommand("generate", "Sample volumes from a checkpoint");
  add_common(s_ge);
  s_ge->add_option("--checkpoint", ge.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  s_ge->add_option("--n", ge.n, "Number of samples")->capture_default_str();
  s_ge->add_option("--seed", ge.seed, "Latent seed")->capture_default_str();
  s_ge->add_flag("--no-ema", ge.no_ema, "Use live generator weights instead of the EMA shadow");
  s_ge->add_option("--stage", ge.stage, "Require the checkpoint to be at this stage");

  AnalyzeOpts an;
  auto* s_an = app.add_subcommand("analyze", "Classic morphometry CSV over SVOL files");
  add_common(s_an);
  s_an->add_option("files", an.files, "SVOL files")->required()->check(CLI::ExistingFile);
  s_an->add_option("--threshold", an.threshold, "Bone threshold (mg/cm3)")->capture_default_str();

  StyleOpts st;
  auto* s_st = app.add_subcommand("style", "Latent optimization toward target parameters (single, grid, treatment)");
  add_common(s_st);
  s_st->add_option("--checkpoint", st.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  s_st->add_option("--seed", st.seed, "Seed of the content latent and of extra starts")->capture_default_str();
  s_st->add_option("--target-seed", st.target_seed, "Take target parameters from the sample with this latent seed");
  s_st->add_option("--target", st.target, "Target component override name=value (bmd, bmd_sd, bvtv, tmd)");
  s_st->add_option("--mu", st.mu, "Content weight")->capture_default_str();
  s_st->add_flag("--mu-literal", st.mu_literal, "Use mu = e^-4 instead of --mu");
  s_st->add_option("--starts", st.starts, "Multi-start count")->capture_default_str();
  s_st->add_option("--max-iter", st.max_iter, "L-BFGS iteration cap per start")->capture_default_str();
  s_st->add_option("--grid", st.grid, "Parameter grid ROWSxCOLS, e.g. 5x5");
  s_st->add_option("--axes", st.axes, "Grid axes: two of bmd, bmd_sd, bvtv, tmd")->expected(2)->capture_default_str();
  s_st->add_option("--steps", st.steps, "Grid step per axis in parameter units")->expected(2);
  s_st->add_option("--presets", st.presets, "Treatment preset JSON")->check(CLI::ExistingFile);
  s_st->add_option("--preset", st.preset, "Treatment preset name");
  s_st->add_option("--months", st.months, "Treatment time points");
  s_st->add_option("--calibration-samples", st.calibration_samples, "Samples used to derive component weights")
      ->capture_default_str();
  s_st->add_option("--precision", st.precision, "Evaluation precision in bits (32 or 64)")
      ->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  s_st->add_flag("--no-ema", st.no_ema, "Use live generator weights");

  EvaluateOpts ev;
  auto* s_ev = app.add_subcommand("evaluate", "PCA, Tukey tests and summary report across groups");
  add_common(s_ev);
  s_ev->add_option("--group", ev.groups, "label=DIR with SVOL patches or a corpus");
  s_ev->add_option("--checkpoint", ev.checkpoints, "label=FILE; samples are generated");
  s_ev->add_option("--samples", ev.samples, "Patches per group")->capture_default_str();
  s_ev->add_option("--seed", ev.seed, "Sampling seed")->capture_default_str();
  s_ev->add_option("--alpha", ev.alpha, "Significance level")->capture_default_str();
  s_ev->add_option("--pca-params", ev.pca_params, "Parameters feeding the PCA (default all seven)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  auto* sub = app.get_subcommands().front();
  std::vector<std::string> args(argv, argv + argc);
  std::optional<Run> run;
  try {
    run.emplace(sub->get_name(), args, common.out, common.run_dir);
    json opts = json::object();
    for (const auto* opt : sub->get_options()) {
      const auto& key = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
      if (key == "help") continue;
      const auto& given = opt->reduced_results();
      if (!given.empty()) opts[key] = given.size() == 1 ? json(given.front()) : json(given);
      else if (!opt->get_default_str().empty()) opts[key] = opt->get_default_str();
    }
    if (const auto* cfg = app.get_config_ptr(); cfg && cfg->count() > 0) opts["config"] = cfg->as<std::string>();
    run->record()["options"] = opts;
    run->flush();
    const auto& name = sub->get_name();
    if (name == "phantom") cmd_phantom(ph, *run, out);
    else if (name == "corpus") cmd_corpus(co, *run, out);
    else if (name == "train") cmd_train(tr, *run, out);
    else if (name == "generate") cmd_generate(ge, *run, out);
    else if (name == "analyze") cmd_analyze(an, *run, out);
    else if (name == "style") cmd_style(st, *run, out);
    else if (name == "evaluate") cmd_evaluate(ev, *run, out);
    run->finish("ok");
    return 0;
  } catch (const ConfigError& e) {
    err << "bonegan: error [" << e.kind() << "]: " << e.what() << "\n" << sub->help();
    if (run) run->finish(std::string("config_error: ") + e.what());
    return 2;
  } catch (const Error& e) {
    err << "bonegan: error [" << e.kind() << "]: " << e.what() << "\n";
    if (run) run->finish(e.kind() + ": " + e.what());
    return 1;
  } catch (const std::exception& e) {
    err << "bonegan: error [internal]: " << e.what() << "\n";
    if (run) run->finish(std::string("internal: ") + e.what());
    return 1;
  }
}

}  // namespace bonegan::cli
