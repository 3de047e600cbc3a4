// Command-line entry point: synthesize data, train, register, evaluate,
// probe stability, benchmark inference, run ablation sweeps.
//
// Exit codes: 0 success, 2 usage error, 1 runtime error. Diagnostics go to
// stderr; data goes to files only. Existing output files are overwritten
// only with --force.

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "ncamorph/metrics.hpp"
#include "ncamorph/model.hpp"
#include "ncamorph/optim.hpp"
#include "ncamorph/synth.hpp"
#include "ncamorph/volume_io.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace ncam;

namespace {

void check_overwrite(const std::string& path, bool force) {
  if (!force && fs::exists(path))
    throw std::runtime_error("refusing to overwrite " + path +
                             " (use --force)");
}

void ensure_parent_dir(const std::string& path) {
  const fs::path dir = fs::path(path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
}

int next_multiple(int n, int m) { return ((n + m - 1) / m) * m; }

Grid<float> pad_grid(const Grid<float>& g, Shape3 target) {
  if (g.shape == target) return g;
  Grid<float> out(g.channels, target);
  for (int c = 0; c < g.channels; ++c)
    for (int z = 0; z < g.shape.d; ++z)
      for (int y = 0; y < g.shape.h; ++y) {
        const float* src = g.plane(c) +
                           (static_cast<std::size_t>(z) * g.shape.h + y) *
                               g.shape.w;
        float* dst = out.plane(c) +
                     (static_cast<std::size_t>(z) * target.h + y) * target.w;
        std::copy(src, src + g.shape.w, dst);
      }
  return out;
}

LabelMap pad_labels(const LabelMap& l, Shape3 target) {
  if (l.shape == target) return l;
  LabelMap out(target, l.num_labels);
  for (int z = 0; z < l.shape.d; ++z)
    for (int y = 0; y < l.shape.h; ++y)
      for (int x = 0; x < l.shape.w; ++x) out.at(z, y, x) = l.at(z, y, x);
  return out;
}

FlowField crop_flow(const FlowField& f, Shape3 orig) {
  if (f.shape == orig) return f;
  Grid<float> g(3, f.shape);
  g.data = f.data;
  Grid<float> c = crop_patch(g, PatchBox{0, 0, 0, orig});
  FlowField out(orig);
  out.data = std::move(c.data);
  return out;
}

// Pads a loaded pair so the pyramid divides evenly; returns the original
// shape for cropping results back.
Shape3 pad_pair(LoadedPair& pair, const ArchConfig& cfg, bool quiet = false) {
  const Shape3 orig = pair.fixed.shape;
  const int m = cfg.level_scale(0);
  const Shape3 target{next_multiple(orig.d, m), next_multiple(orig.h, m),
                      next_multiple(orig.w, m)};
  if (!(target == orig)) {
    if (!quiet)
      std::cerr << "note: input " << orig.str() << " padded to "
                << target.str() << " (pyramid scale " << m
                << "); outputs are cropped back\n";
    pair.fixed = pad_grid(pair.fixed, target);
    pair.moving = pad_grid(pair.moving, target);
    if (pair.fixed_seg) pair.fixed_seg = pad_labels(*pair.fixed_seg, target);
    if (pair.moving_seg)
      pair.moving_seg = pad_labels(*pair.moving_seg, target);
  }
  return orig;
}

std::vector<LoadedPair> load_dataset(const std::string& manifest,
                                     bool do_normalize) {
  PairDataset ds = read_manifest(manifest);
  if (ds.pairs.empty())
    throw std::runtime_error("manifest has no pairs: " + manifest);
  std::vector<LoadedPair> out;
  out.reserve(ds.pairs.size());
  for (const auto& pp : ds.pairs) {
    LoadedPair lp = load_pair(pp);
    if (do_normalize) {
      lp.fixed = normalize(Volume::from_grid(lp.fixed)).grid();
      lp.moving = normalize(Volume::from_grid(lp.moving)).grid();
    }
    out.push_back(std::move(lp));
  }
  return out;
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

double peak_rss_mb() {
  struct rusage ru;
  if (getrusage(RUSAGE_SELF, &ru) != 0) return 0.0;
  return static_cast<double>(ru.ru_maxrss) / 1024.0;  // Linux reports KiB
}

void kv(std::ostream& os, const std::string& key, const std::string& val) {
  os << "# " << key << "=" << val << "\n";
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared option bundles

struct ArchOpts {
  int channels = 32;
  int hidden = 128;
  std::vector<int> kernels = {3, 3};
  std::vector<int> steps = {5, 5};
  double fire_rate = 0.5;
  int downsample = 4;
  std::string flow_mode = "direct";

  void attach(CLI::App* app) {
    app->add_option("--channels", channels, "Cell state channels");
    app->add_option("--hidden", hidden, "Hidden layer width");
    app->add_option("--kernels", kernels,
                    "Perception kernel per level, coarse first")
        ->delimiter(',');
    app->add_option("--steps", steps, "Update steps per level")
        ->delimiter(',');
    app->add_option("--fire-rate", fire_rate, "Cell update probability");
    app->add_option("--downsample-factor", downsample,
                    "Pyramid downsampling factor");
    app->add_option("--flow-mode", flow_mode, "Flow readout: direct|conv_head")
        ->check(CLI::IsMember({"direct", "conv_head"}));
  }

  ArchConfig to_config() const {
    ArchConfig cfg;
    cfg.channels = channels;
    cfg.hidden = hidden;
    cfg.kernels = kernels;
    cfg.steps = steps;
    cfg.fire_rate = fire_rate;
    cfg.downsample_factor = downsample;
    cfg.flow_mode =
        flow_mode == "conv_head" ? FlowMode::conv_head : FlowMode::direct;
    cfg.validate();
    return cfg;
  }
};

struct LossOpts {
  std::string similarity = "mse";
  double lambda_smooth = -1.0;  // auto: 0.01 for mse, 1.0 for ncc
  double lambda_seg = 1.0;
  int ncc_window = 9;
  double aux_coarse_weight = 0.0;

  void attach(CLI::App* app) {
    app->add_option("--similarity", similarity, "Similarity loss: mse|ncc")
        ->check(CLI::IsMember({"mse", "ncc"}));
    app->add_option("--lambda-smooth", lambda_smooth,
                    "Smoothness weight (default 0.01 mse / 1.0 ncc)");
    app->add_option("--lambda-seg", lambda_seg, "Segmentation overlap weight");
    app->add_option("--ncc-window", ncc_window, "NCC window side (odd)");
    app->add_option("--aux-coarse-weight", aux_coarse_weight,
                    "Auxiliary coarse-level similarity weight (0 = off)");
  }

  LossWeights to_weights() const {
    LossWeights w;
    w.similarity = similarity == "ncc" ? Similarity::ncc : Similarity::mse;
    w.lambda_smooth =
        lambda_smooth >= 0 ? lambda_smooth
                           : (w.similarity == Similarity::ncc ? 1.0 : 0.01);
    w.lambda_seg = lambda_seg;
    w.ncc_window = ncc_window;
    w.aux_coarse_weight = aux_coarse_weight;
    w.validate();
    return w;
  }
};

int threads_opt = 0;

void apply_threads() {
#ifdef _OPENMP
  if (threads_opt > 0) omp_set_num_threads(threads_opt);
#endif
}

// Flat key=value config file. Keys are the long option names without the
// leading dashes; command-line flags override file values; unknown keys are
// usage errors.
struct ConfigKey {
  std::string key;
  std::function<void(const std::string&)> set;
};

int to_int(const std::string& v) { return std::stoi(v); }
double to_dbl(const std::string& v) { return std::stod(v); }
std::uint64_t to_u64(const std::string& v) { return std::stoull(v); }
bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw CLI::ValidationError("config", "boolean expects true/false/1/0, got " + v);
}
std::vector<int> to_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

void apply_config_file(const CLI::App& sub, const std::string& path,
                       const std::vector<ConfigKey>& keys) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r'))
      line.pop_back();
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError(
          "config", "line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto it = std::find_if(keys.begin(), keys.end(),
                           [&](const ConfigKey& k) { return k.key == key; });
    if (it == keys.end())
      throw CLI::ValidationError("config", "unknown key '" + key + "'");
    if (sub.count("--" + key) > 0) continue;  // flag wins
    try {
      it->set(val);
    } catch (const CLI::Error&) {
      throw;
    } catch (const std::exception&) {
      throw CLI::ValidationError("config",
                                 "bad value for '" + key + "': " + val);
    }
  }
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir;
  int pairs = 64;
  std::vector<int> size = {48};
  std::uint64_t seed = 0;
  int blobs = 10;
  int labels = 4;
  double noise = 0.02;
  double amplitude = 3.0;
  double smoothness = 8.0;
  bool force = false;
};

void run_synth(const SynthArgs& a) {
  Shape3 shape;
  if (a.size.size() == 1)
    shape = {a.size[0], a.size[0], a.size[0]};
  else if (a.size.size() == 3)
    shape = {a.size[0], a.size[1], a.size[2]};
  else
    throw CLI::ValidationError("--size expects 1 or 3 values");

  fs::create_directories(a.out_dir);
  const std::string manifest = (fs::path(a.out_dir) / "manifest.tsv").string();
  check_overwrite(manifest, a.force);

  std::cerr << "# resolved config for 'synth'\n";
  kv(std::cerr, "out", a.out_dir);
  kv(std::cerr, "pairs", std::to_string(a.pairs));
  kv(std::cerr, "size", shape.str());
  kv(std::cerr, "seed", std::to_string(a.seed));
  kv(std::cerr, "blobs", std::to_string(a.blobs));
  kv(std::cerr, "labels", std::to_string(a.labels));
  kv(std::cerr, "noise", fmt_double(a.noise));
  kv(std::cerr, "amplitude", fmt_double(a.amplitude));
  kv(std::cerr, "smoothness", fmt_double(a.smoothness));

  PairDataset ds;
  for (int i = 0; i < a.pairs; ++i) {
    SynthConfig cfg;
    cfg.size = shape;
    cfg.blobs = a.blobs;
    cfg.labels = a.labels;
    cfg.noise = a.noise;
    cfg.amplitude = a.amplitude;
    cfg.smoothness = a.smoothness;
    cfg.seed = derive_seed(a.seed, static_cast<std::uint64_t>(i));
    SynthPair p = synth_pair(cfg);

    char base[32];
    std::snprintf(base, sizeof(base), "pair_%04d", i);
    auto path = [&](const char* suffix) {
      return (fs::path(a.out_dir) / (std::string(base) + suffix)).string();
    };
    PairPaths pp;
    pp.fixed_img = path("_fixed.nii");
    pp.fixed_seg = path("_fixed_seg.nii");
    pp.moving_img = path("_moving.nii");
    pp.moving_seg = path("_moving_seg.nii");
    for (const auto& f : {pp.fixed_img, *pp.fixed_seg, pp.moving_img,
                          *pp.moving_seg, path("_gt_flow.nii")})
      check_overwrite(f, a.force);
    write_nifti(p.fixed, pp.fixed_img);
    write_nifti(p.fixed_seg, *pp.fixed_seg);
    write_nifti(p.moving, pp.moving_img);
    write_nifti(p.moving_seg, *pp.moving_seg);
    write_nifti(p.gt_flow, path("_gt_flow.nii"));
    ds.pairs.push_back(std::move(pp));
  }
  write_manifest(ds, manifest);
  std::cerr << "wrote " << a.pairs << " pairs to " << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string resume;
  std::string loss_log;
  std::string config;
  ArchOpts arch;
  LossOpts loss;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int iterations = 200;
  int batch = 1;
  int patch = 0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  bool save_optimizer = false;
  bool do_normalize = false;
  bool force = false;
};

void run_train(TrainArgs& a, const CLI::App& sub) {
  if (!a.config.empty()) {
    const std::vector<ConfigKey> keys = {
        {"iterations", [&](const std::string& v) { a.iterations = to_int(v); }},
        {"batch", [&](const std::string& v) { a.batch = to_int(v); }},
        {"patch", [&](const std::string& v) { a.patch = to_int(v); }},
        {"lr", [&](const std::string& v) { a.lr = to_dbl(v); }},
        {"beta1", [&](const std::string& v) { a.beta1 = to_dbl(v); }},
        {"beta2", [&](const std::string& v) { a.beta2 = to_dbl(v); }},
        {"eps", [&](const std::string& v) { a.eps = to_dbl(v); }},
        {"seed", [&](const std::string& v) { a.seed = to_u64(v); }},
        {"checkpoint-every",
         [&](const std::string& v) { a.checkpoint_every = to_int(v); }},
        {"save-optimizer",
         [&](const std::string& v) { a.save_optimizer = to_bool(v); }},
        {"normalize",
         [&](const std::string& v) { a.do_normalize = to_bool(v); }},
        {"channels", [&](const std::string& v) { a.arch.channels = to_int(v); }},
        {"hidden", [&](const std::string& v) { a.arch.hidden = to_int(v); }},
        {"kernels",
         [&](const std::string& v) { a.arch.kernels = to_int_list(v); }},
        {"steps", [&](const std::string& v) { a.arch.steps = to_int_list(v); }},
        {"fire-rate",
         [&](const std::string& v) { a.arch.fire_rate = to_dbl(v); }},
        {"downsample-factor",
         [&](const std::string& v) { a.arch.downsample = to_int(v); }},
        {"flow-mode", [&](const std::string& v) { a.arch.flow_mode = v; }},
        {"similarity",
         [&](const std::string& v) { a.loss.similarity = v; }},
        {"lambda-smooth",
         [&](const std::string& v) { a.loss.lambda_smooth = to_dbl(v); }},
        {"lambda-seg",
         [&](const std::string& v) { a.loss.lambda_seg = to_dbl(v); }},
        {"ncc-window",
         [&](const std::string& v) { a.loss.ncc_window = to_int(v); }},
        {"aux-coarse-weight",
         [&](const std::string& v) { a.loss.aux_coarse_weight = to_dbl(v); }},
    };
    apply_config_file(sub, a.config, keys);
  }
  apply_threads();
  check_overwrite(a.out, a.force);
  if (!a.loss_log.empty()) check_overwrite(a.loss_log, a.force);

  NcaModel model;
  AdamState state;
  if (!a.resume.empty()) {
    model = load_checkpoint(a.resume, &state);
    if (state.m.empty())
      throw std::runtime_error(
          "resume checkpoint carries no optimizer state (train with "
          "--save-optimizer)");
  } else {
    model = init_model<float>(a.seed, a.arch.to_config());
  }

  TrainConfig cfg;
  cfg.adam = {a.lr, a.beta1, a.beta2, a.eps};
  cfg.iterations = a.iterations;
  cfg.batch = a.batch;
  cfg.patch_side = a.patch;
  cfg.loss = a.loss.to_weights();
  cfg.seed = a.seed;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.checkpoint_path = a.out;
  cfg.save_optimizer = a.save_optimizer;

  std::cerr << "# resolved config for 'train'\n";
  kv(std::cerr, "data", a.data);
  kv(std::cerr, "out", a.out);
  kv(std::cerr, "iterations", std::to_string(cfg.iterations));
  kv(std::cerr, "batch", std::to_string(cfg.batch));
  kv(std::cerr, "patch", std::to_string(cfg.patch_side));
  kv(std::cerr, "lr", fmt_double(cfg.adam.lr));
  kv(std::cerr, "seed", std::to_string(cfg.seed));
  kv(std::cerr, "similarity",
     cfg.loss.similarity == Similarity::ncc ? "ncc" : "mse");
  kv(std::cerr, "lambda_smooth", fmt_double(cfg.loss.lambda_smooth));
  kv(std::cerr, "lambda_seg", fmt_double(cfg.loss.lambda_seg));
  kv(std::cerr, "aux_coarse_weight", fmt_double(cfg.loss.aux_coarse_weight));
  std::cerr << "# arch\n" << arch_config_text(model.config);
  kv(std::cerr, "params", std::to_string(model.param_count()));

  auto dataset = load_dataset(a.data, a.do_normalize);
  for (auto& pair : dataset) pad_pair(pair, model.config);

  const double t0 = now_seconds();
  auto log = train(dataset, model, state, cfg);
  const double t1 = now_seconds();

  ensure_parent_dir(a.out);
  save_checkpoint(model, a.save_optimizer ? &state : nullptr, a.out);
  if (!a.loss_log.empty()) {
    ensure_parent_dir(a.loss_log);
    write_loss_csv(log, a.loss_log);
  }
  std::cerr << "trained " << log.size() << " iterations in "
            << fmt_double(t1 - t0) << " s";
  if (!log.empty())
    std::cerr << "; loss " << fmt_double(log.front().total) << " -> "
              << fmt_double(log.back().total);
  std::cerr << "\nsaved " << a.out << " (" << fs::file_size(a.out)
            << " bytes)\n";
}

// ---------------------------------------------------------------------------
// register

struct RegisterArgs {
  std::string ckpt, fixed, moving, moving_seg;
  std::string out_flow, out_warped, out_warped_seg;
  double fire_rate = -1.0;  // -1: use the checkpoint's rate
  std::uint64_t seed = 0;
  bool do_normalize = false;
  bool force = false;
};

void run_register(const RegisterArgs& a) {
  apply_threads();
  if (!a.out_flow.empty()) check_overwrite(a.out_flow, a.force);
  if (!a.out_warped.empty()) check_overwrite(a.out_warped, a.force);
  if (!a.out_warped_seg.empty()) check_overwrite(a.out_warped_seg, a.force);
  if (!a.out_warped_seg.empty() && a.moving_seg.empty())
    throw CLI::ValidationError("--out-warped-seg requires --moving-seg");

  NcaModel model = load_checkpoint(a.ckpt);
  const double rate = a.fire_rate >= 0 ? a.fire_rate : model.config.fire_rate;

  LoadedPair pair;
  Volume fixed_vol = read_volume(a.fixed);
  Volume moving_vol = read_volume(a.moving);
  pair.fixed = a.do_normalize ? normalize(fixed_vol).grid() : fixed_vol.grid();
  pair.moving =
      a.do_normalize ? normalize(moving_vol).grid() : moving_vol.grid();
  if (!a.moving_seg.empty()) pair.moving_seg = read_labels(a.moving_seg);
  const Shape3 orig = pad_pair(pair, model.config);

  std::cerr << "# resolved config for 'register'\n";
  kv(std::cerr, "ckpt", a.ckpt);
  kv(std::cerr, "fire_rate", fmt_double(rate));
  kv(std::cerr, "seed", std::to_string(a.seed));

  Rng rng(a.seed);
  const double t0 = now_seconds();
  FlowField flow = register_pair(pair.fixed, pair.moving, model, rate, rng);
  const double t1 = now_seconds();
  std::cerr << "registered " << orig.str() << " in " << fmt_double(t1 - t0)
            << " s\n";

  FlowField flow_out = crop_flow(flow, orig);
  if (!a.out_flow.empty()) {
    ensure_parent_dir(a.out_flow);
    write_nifti(flow_out, a.out_flow, fixed_vol.spacing);
  }
  if (!a.out_warped.empty()) {
    Grid<float> warped = warp_trilinear(pair.moving, flow);
    Grid<float> cropped = crop_patch(warped, PatchBox{0, 0, 0, orig});
    Volume out = Volume::from_grid(cropped);
    out.spacing = fixed_vol.spacing;
    out.affine = fixed_vol.affine;
    ensure_parent_dir(a.out_warped);
    write_nifti(out, a.out_warped);
  }
  if (!a.out_warped_seg.empty()) {
    LabelMap warped = warp_nearest(*pair.moving_seg, flow);
    LabelMap cropped(orig, warped.num_labels);
    for (int z = 0; z < orig.d; ++z)
      for (int y = 0; y < orig.h; ++y)
        for (int x = 0; x < orig.w; ++x)
          cropped.at(z, y, x) = warped.at(z, y, x);
    ensure_parent_dir(a.out_warped_seg);
    write_nifti(cropped, a.out_warped_seg, fixed_vol.spacing);
  }
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string ckpt, data, out;
  double fire_rate = -1.0;
  std::uint64_t seed = 0;
  bool no_time = false;
  bool do_normalize = false;
  bool force = false;
};

void run_eval(const EvalArgs& a) {
  apply_threads();
  check_overwrite(a.out, a.force);
  NcaModel model = load_checkpoint(a.ckpt);
  const double rate = a.fire_rate >= 0 ? a.fire_rate : model.config.fire_rate;

  std::cerr << "# resolved config for 'eval'\n";
  kv(std::cerr, "ckpt", a.ckpt);
  kv(std::cerr, "data", a.data);
  kv(std::cerr, "fire_rate", fmt_double(rate));
  kv(std::cerr, "seed", std::to_string(a.seed));
  kv(std::cerr, "params", std::to_string(model.param_count()));

  auto dataset = load_dataset(a.data, a.do_normalize);
  ensure_parent_dir(a.out);
  std::ofstream csv(a.out, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot open " + a.out);
  csv << "pair_id,dice_mean,ssim,neg_jac,seconds\n";

  double base_dice = 0.0, model_dice = 0.0;
  int dice_count = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    LoadedPair pair = dataset[i];
    const Shape3 orig = pad_pair(pair, model.config, i > 0);
    Grid<float> fixed_orig = crop_patch(pair.fixed, PatchBox{0, 0, 0, orig});
    Grid<float> moving_orig = crop_patch(pair.moving, PatchBox{0, 0, 0, orig});
    const LabelMap* fseg =
        dataset[i].fixed_seg ? &*dataset[i].fixed_seg : nullptr;
    const LabelMap* mseg =
        dataset[i].moving_seg ? &*dataset[i].moving_seg : nullptr;

    FlowField zero(orig);
    MetricsReport base =
        evaluate_pair(fixed_orig, fseg, moving_orig, mseg, zero);
    csv << i << "_baseline," << fmt_double(base.dice_mean) << ","
        << fmt_double(base.ssim) << "," << base.neg_jacobian_count << ",0\n";

    Rng rng(derive_seed(a.seed, i));
    const double t0 = now_seconds();
    FlowField flow = register_pair(pair.fixed, pair.moving, model, rate, rng);
    const double t1 = now_seconds();
    FlowField flow_orig = crop_flow(flow, orig);
    MetricsReport rep =
        evaluate_pair(fixed_orig, fseg, moving_orig, mseg, flow_orig);
    rep.inference_seconds = a.no_time ? 0.0 : (t1 - t0);
    csv << i << "_model," << fmt_double(rep.dice_mean) << ","
        << fmt_double(rep.ssim) << "," << rep.neg_jacobian_count << ","
        << fmt_double(rep.inference_seconds) << "\n";

    if (fseg && mseg) {
      base_dice += base.dice_mean;
      model_dice += rep.dice_mean;
      ++dice_count;
    }
  }
  if (!csv) throw std::runtime_error("write failed: " + a.out);
  if (dice_count > 0)
    std::cerr << "mean dice: baseline " << fmt_double(base_dice / dice_count)
              << " model " << fmt_double(model_dice / dice_count) << " over "
              << dice_count << " pairs\n";
}

// ---------------------------------------------------------------------------
// stability

struct StabilityArgs {
  std::string ckpt, fixed, moving, moving_seg, out_dir;
  int runs = 10;
  double fire_rate = -1.0;
  std::uint64_t seed = 0;
  bool force = false;
};

void run_stability(const StabilityArgs& a) {
  apply_threads();
  NcaModel model = load_checkpoint(a.ckpt);
  const double rate = a.fire_rate >= 0 ? a.fire_rate : model.config.fire_rate;
  fs::create_directories(a.out_dir);
  const auto out = [&](const char* name) {
    return (fs::path(a.out_dir) / name).string();
  };
  check_overwrite(out("flow_std.nii"), a.force);
  check_overwrite(out("summary.txt"), a.force);

  LoadedPair pair;
  Volume fv = read_volume(a.fixed);
  pair.fixed = fv.grid();
  pair.moving = read_volume(a.moving).grid();
  if (!a.moving_seg.empty()) pair.moving_seg = read_labels(a.moving_seg);
  const Shape3 orig = pad_pair(pair, model.config);

  std::cerr << "# resolved config for 'stability'\n";
  kv(std::cerr, "runs", std::to_string(a.runs));
  kv(std::cerr, "fire_rate", fmt_double(rate));
  kv(std::cerr, "seed", std::to_string(a.seed));

  StabilityResult res = stability_probe(
      pair.fixed, pair.moving, pair.moving_seg ? &*pair.moving_seg : nullptr,
      model, a.runs, a.seed, rate);

  write_nifti(crop_flow(res.flow_std, orig), out("flow_std.nii"), fv.spacing);
  if (res.has_seg) {
    check_overwrite(out("seg_std.nii"), a.force);
    Grid<float> cropped = crop_patch(res.seg_std, PatchBox{0, 0, 0, orig});
    Volume sv = Volume::from_grid(cropped);
    sv.spacing = fv.spacing;
    write_nifti(sv, out("seg_std.nii"));
  }
  std::ofstream sum(out("summary.txt"), std::ios::trunc);
  sum << "runs=" << res.runs << "\n";
  sum << "fire_rate=" << fmt_double(rate) << "\n";
  sum << "flow_std_mean=" << fmt_double(res.flow_std_mean) << "\n";
  sum << "flow_std_max=" << fmt_double(res.flow_std_max) << "\n";
  if (res.has_seg) {
    sum << "seg_std_mean=" << fmt_double(res.seg_std_mean) << "\n";
    sum << "seg_std_max=" << fmt_double(res.seg_std_max) << "\n";
  }
  std::cerr << "flow std mean " << fmt_double(res.flow_std_mean) << " max "
            << fmt_double(res.flow_std_max) << "\n";
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string ckpt, out;
  std::vector<int> sizes = {32, 64, 96, 128};
  int repeats = 5;
  double fire_rate = -1.0;
  std::uint64_t seed = 0;
  bool force = false;
};

void run_bench(const BenchArgs& a) {
  apply_threads();
  check_overwrite(a.out, a.force);
  NcaModel model = a.ckpt.empty() ? init_model<float>(a.seed, ArchConfig{})
                                  : load_checkpoint(a.ckpt);
  const double rate = a.fire_rate >= 0 ? a.fire_rate : model.config.fire_rate;

  std::cerr << "# resolved config for 'bench'\n";
  kv(std::cerr, "repeats", std::to_string(a.repeats));
  kv(std::cerr, "fire_rate", fmt_double(rate));
  kv(std::cerr, "seed", std::to_string(a.seed));

  ensure_parent_dir(a.out);
  std::ofstream csv(a.out, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot open " + a.out);
  csv << "size,mean_seconds,std_seconds,peak_rss_mb\n";

  std::vector<double> medians;
  for (std::size_t si = 0; si < a.sizes.size(); ++si) {
    const int req = a.sizes[si];
    if (req < 8) throw CLI::ValidationError("--sizes entries must be >= 8");
    const int m = model.config.level_scale(0);
    const int size = next_multiple(req, m);
    if (size != req)
      std::cerr << "note: size " << req << " padded to " << size
                << " (pyramid scale " << m << ")\n";
    SynthConfig scfg;
    scfg.size = {size, size, size};
    scfg.amplitude = std::min(3.0, size / 8.0);
    scfg.smoothness = 8.0;
    scfg.seed = derive_seed(a.seed, 1000 + si);
    SynthPair p = synth_pair(scfg);
    Grid<float> fixed = p.fixed.grid();
    Grid<float> moving = p.moving.grid();

    std::vector<double> times;
    for (int r = 0; r < a.repeats; ++r) {
      Rng rng(derive_seed(a.seed, si * 100 + r));
      const double t0 = now_seconds();
      FlowField flow = register_pair(fixed, moving, model, rate, rng);
      const double t1 = now_seconds();
      (void)flow;
      times.push_back(t1 - t0);
    }
    double mean = 0.0;
    for (double t : times) mean += t;
    mean /= times.size();
    double var = 0.0;
    for (double t : times) var += (t - mean) * (t - mean);
    const double sd = std::sqrt(var / times.size());
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    medians.push_back(sorted[sorted.size() / 2]);

    csv << req << "," << fmt_double(mean) << "," << fmt_double(sd) << ","
        << fmt_double(peak_rss_mb()) << "\n";
    std::cerr << "size " << req << ": mean " << fmt_double(mean) << " s over "
              << a.repeats << " repeats\n";
  }
  for (std::size_t i = 1; i < medians.size(); ++i)
    if (medians[i] < medians[i - 1])
      std::cerr << "warning: median time not monotone between sizes "
                << a.sizes[i - 1] << " and " << a.sizes[i] << "\n";
  if (!csv) throw std::runtime_error("write failed: " + a.out);
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string data, eval_data, grid, out_dir;
  int iterations = 50;
  std::uint64_t seed = 0;
  int jobs = 1;
  bool force = false;
};

struct AblateCell {
  int kernel = 3, steps = 5, channels = 16, hidden = 64;
  std::string name() const {
    return "k" + std::to_string(kernel) + "_s" + std::to_string(steps) + "_c" +
           std::to_string(channels) + "_h" + std::to_string(hidden);
  }
};

std::vector<AblateCell> parse_grid_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open grid file: " + path);
  std::vector<AblateCell> cells;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    AblateCell cell;
    std::stringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("grid line " + std::to_string(lineno) +
                                 ": expected key=value tokens");
      const std::string key = tok.substr(0, eq);
      const int val = std::stoi(tok.substr(eq + 1));
      if (key == "kernel") cell.kernel = val;
      else if (key == "steps") cell.steps = val;
      else if (key == "channels") cell.channels = val;
      else if (key == "hidden") cell.hidden = val;
      else
        throw std::runtime_error("grid line " + std::to_string(lineno) +
                                 ": unknown key " + key);
    }
    cells.push_back(cell);
  }
  if (cells.empty()) throw std::runtime_error("grid file has no cells");
  return cells;
}

std::string self_path() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw std::runtime_error("cannot resolve own executable path");
  return p.string();
}

void run_ablate(const AblateArgs& a) {
  const auto cells = parse_grid_file(a.grid);
  fs::create_directories(a.out_dir);
  const std::string merged = (fs::path(a.out_dir) / "merged.csv").string();
  check_overwrite(merged, a.force);
  const std::string self = self_path();
  const std::string eval_data = a.eval_data.empty() ? a.data : a.eval_data;

  std::cerr << "# resolved config for 'ablate'\n";
  kv(std::cerr, "cells", std::to_string(cells.size()));
  kv(std::cerr, "iterations", std::to_string(a.iterations));
  kv(std::cerr, "seed", std::to_string(a.seed));
  kv(std::cerr, "jobs", std::to_string(a.jobs));

  // every cell trains and evaluates in its own subprocess, shared seed
  std::vector<std::string> commands;
  for (const auto& cell : cells) {
    const fs::path dir = fs::path(a.out_dir) / "cells" / cell.name();
    fs::create_directories(dir);
    const std::string ckpt = (dir / "ckpt.nca").string();
    const std::string metrics = (dir / "metrics.csv").string();
    const std::string log = (dir / "train.log").string();
    std::ostringstream cmd;
    cmd << "'" << self << "' train --data '" << a.data << "' --out '" << ckpt
        << "' --iterations " << a.iterations << " --seed " << a.seed
        << " --channels " << cell.channels << " --hidden " << cell.hidden
        << " --kernels " << cell.kernel << "," << cell.kernel << " --steps "
        << cell.steps << "," << cell.steps << " --force > /dev/null 2> '"
        << log << "' && '" << self << "' eval --ckpt '" << ckpt
        << "' --data '" << eval_data << "' --out '" << metrics
        << "' --no-time --force 2>> '" << log << "'";
    commands.push_back(cmd.str());
  }

  std::vector<int> status(commands.size(), -1);
  std::size_t next = 0;
  std::mutex mtx;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mtx);
        if (next >= commands.size()) return;
        i = next++;
      }
      status[i] = std::system(commands[i].c_str());
    }
  };
  const int jobs = std::max(1, a.jobs);
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < status.size(); ++i)
    if (status[i] != 0)
      throw std::runtime_error("ablation cell " + cells[i].name() +
                               " failed (see its train.log)");

  // merge in grid order so the output is independent of completion order
  std::ofstream out(merged, std::ios::trunc);
  out << "kernel,steps,channels,hidden,params,dice_mean,ssim,neg_jac\n";
  for (const auto& cell : cells) {
    const fs::path dir = fs::path(a.out_dir) / "cells" / cell.name();
    NcaModel m = load_checkpoint((dir / "ckpt.nca").string());
    std::ifstream metrics((dir / "metrics.csv").string());
    std::string line;
    std::getline(metrics, line);  // header
    double dice = 0, ssim = 0, neg = 0;
    int rows = 0;
    while (std::getline(metrics, line)) {
      if (line.find("_model,") == std::string::npos) continue;
      std::stringstream ss(line);
      std::string id, d, s, n, t;
      std::getline(ss, id, ',');
      std::getline(ss, d, ',');
      std::getline(ss, s, ',');
      std::getline(ss, n, ',');
      std::getline(ss, t, ',');
      dice += std::stod(d);
      ssim += std::stod(s);
      neg += std::stod(n);
      ++rows;
    }
    if (rows == 0)
      throw std::runtime_error("cell " + cell.name() + " produced no rows");
    out << cell.kernel << "," << cell.steps << "," << cell.channels << ","
        << cell.hidden << "," << m.param_count() << ","
        << fmt_double(dice / rows) << "," << fmt_double(ssim / rows) << ","
        << fmt_double(neg / rows) << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + merged);
  std::cerr << "merged " << cells.size() << " cells into " << merged << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "ncamorph: lightweight 3D deformable registration with a neural "
      "cellular automaton"};
  app.require_subcommand(1);
  app.add_option("--threads", threads_opt,
                 "Worker threads for grid kernels (0 = library default)");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand(
      "synth", "Generate a synthetic deformable phantom dataset");
  synth->add_option("--out", synth_args.out_dir, "Output directory")
      ->required();
  synth->add_option("--pairs", synth_args.pairs, "Number of pairs")
      ->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_args.size, "Volume size (S or D,H,W)")
      ->delimiter(',');
  synth->add_option("--seed", synth_args.seed, "Dataset seed");
  synth->add_option("--blobs", synth_args.blobs, "Blobs per volume");
  synth->add_option("--labels", synth_args.labels,
                    "Label count including background");
  synth->add_option("--noise", synth_args.noise, "Intensity noise level");
  synth->add_option("--amplitude", synth_args.amplitude,
                    "Deformation amplitude (voxels)");
  synth->add_option("--smoothness", synth_args.smoothness,
                    "Deformation control-point spacing (voxels)");
  synth->add_flag("--force", synth_args.force, "Overwrite existing outputs");
  synth->callback([&]() { run_synth(synth_args); });

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Train a registration model");
  tr->add_option("--config", train_args.config,
                 "Config file (flat key=value lines; flags override)");
  tr->add_option("--data", train_args.data, "Training manifest")->required();
  tr->add_option("--out", train_args.out, "Output checkpoint")->required();
  tr->add_option("--resume", train_args.resume,
                 "Checkpoint with optimizer state to continue from");
  tr->add_option("--loss-log", train_args.loss_log, "Loss CSV path");
  train_args.arch.attach(tr);
  train_args.loss.attach(tr);
  tr->add_option("--lr", train_args.lr, "Adam learning rate");
  tr->add_option("--beta1", train_args.beta1, "Adam beta1");
  tr->add_option("--beta2", train_args.beta2, "Adam beta2");
  tr->add_option("--eps", train_args.eps, "Adam epsilon");
  tr->add_option("--iterations", train_args.iterations, "Optimizer steps");
  tr->add_option("--batch", train_args.batch, "Pairs per optimizer step");
  tr->add_option("--patch", train_args.patch,
                 "Training patch side (0 = size/downsample per dim)");
  tr->add_option("--seed", train_args.seed, "Training seed");
  tr->add_option("--checkpoint-every", train_args.checkpoint_every,
                 "Periodic checkpoint interval (0 = final only)");
  tr->add_flag("--save-optimizer", train_args.save_optimizer,
               "Keep optimizer state in the final checkpoint");
  tr->add_flag("--normalize", train_args.do_normalize,
               "Min-max normalize volumes on load");
  tr->add_flag("--force", train_args.force, "Overwrite existing outputs");
  tr->callback([&]() { run_train(train_args, *tr); });

  RegisterArgs reg_args;
  auto* reg =
      app.add_subcommand("register", "Register one moving volume onto a fixed");
  reg->add_option("--ckpt", reg_args.ckpt, "Model checkpoint")->required();
  reg->add_option("--fixed", reg_args.fixed, "Fixed volume")->required();
  reg->add_option("--moving", reg_args.moving, "Moving volume")->required();
  reg->add_option("--moving-seg", reg_args.moving_seg,
                  "Moving segmentation (labels)");
  reg->add_option("--out-flow", reg_args.out_flow, "Output flow field");
  reg->add_option("--out-warped", reg_args.out_warped,
                  "Output warped moving volume");
  reg->add_option("--out-warped-seg", reg_args.out_warped_seg,
                  "Output warped segmentation");
  reg->add_option("--fire-rate", reg_args.fire_rate,
                  "Inference fire rate (default: checkpoint value)");
  reg->add_option("--seed", reg_args.seed, "Inference seed");
  reg->add_flag("--normalize", reg_args.do_normalize,
                "Min-max normalize volumes on load");
  reg->add_flag("--force", reg_args.force, "Overwrite existing outputs");
  reg->callback([&]() { run_register(reg_args); });

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Evaluate a model over a manifest");
  ev->add_option("--ckpt", eval_args.ckpt, "Model checkpoint")->required();
  ev->add_option("--data", eval_args.data, "Evaluation manifest")->required();
  ev->add_option("--out", eval_args.out, "Metrics CSV")->required();
  ev->add_option("--fire-rate", eval_args.fire_rate,
                 "Inference fire rate (default: checkpoint value)");
  ev->add_option("--seed", eval_args.seed, "Inference seed");
  ev->add_flag("--no-time", eval_args.no_time,
               "Write 0 in the seconds column (byte-stable output)");
  ev->add_flag("--normalize", eval_args.do_normalize,
               "Min-max normalize volumes on load");
  ev->add_flag("--force", eval_args.force, "Overwrite existing outputs");
  ev->callback([&]() { run_eval(eval_args); });

  StabilityArgs stab_args;
  auto* st = app.add_subcommand(
      "stability", "Per-voxel std maps over repeated seeded inferences");
  st->add_option("--ckpt", stab_args.ckpt, "Model checkpoint")->required();
  st->add_option("--fixed", stab_args.fixed, "Fixed volume")->required();
  st->add_option("--moving", stab_args.moving, "Moving volume")->required();
  st->add_option("--moving-seg", stab_args.moving_seg,
                 "Moving segmentation for mask variability");
  st->add_option("--runs", stab_args.runs, "Number of inferences")
      ->check(CLI::Range(2, 1000));
  st->add_option("--out", stab_args.out_dir, "Output directory")->required();
  st->add_option("--fire-rate", stab_args.fire_rate,
                 "Inference fire rate (default: checkpoint value)");
  st->add_option("--seed", stab_args.seed, "Base seed");
  st->add_flag("--force", stab_args.force, "Overwrite existing outputs");
  st->callback([&]() { run_stability(stab_args); });

  BenchArgs bench_args;
  auto* be = app.add_subcommand("bench", "Time inference across input sizes");
  be->add_option("--ckpt", bench_args.ckpt,
                 "Model checkpoint (default: fresh default model)");
  be->add_option("--sizes", bench_args.sizes, "Cube sizes to time")
      ->delimiter(',');
  be->add_option("--repeats", bench_args.repeats, "Repeats per size")
      ->check(CLI::PositiveNumber);
  be->add_option("--out", bench_args.out, "Timing CSV")->required();
  be->add_option("--fire-rate", bench_args.fire_rate,
                 "Inference fire rate (default: checkpoint value)");
  be->add_option("--seed", bench_args.seed, "Seed");
  be->add_flag("--force", bench_args.force, "Overwrite existing outputs");
  be->callback([&]() { run_bench(bench_args); });

  AblateArgs abl_args;
  auto* ab = app.add_subcommand(
      "ablate", "Train and evaluate a grid of architecture variants");
  ab->add_option("--data", abl_args.data, "Training manifest")->required();
  ab->add_option("--eval-data", abl_args.eval_data,
                 "Evaluation manifest (default: --data)");
  ab->add_option("--grid", abl_args.grid,
                 "Grid file: lines of kernel= steps= channels= hidden=")
      ->required();
  ab->add_option("--out", abl_args.out_dir, "Output directory")->required();
  ab->add_option("--iterations", abl_args.iterations, "Iterations per cell");
  ab->add_option("--seed", abl_args.seed, "Shared seed for every cell");
  ab->add_option("--jobs", abl_args.jobs, "Parallel cell subprocesses")
      ->check(CLI::PositiveNumber);
  ab->add_flag("--force", abl_args.force, "Overwrite existing outputs");
  ab->callback([&]() { run_ablate(abl_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
