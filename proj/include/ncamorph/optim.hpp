#pragma once

// Adam, the training loop and checkpoint serialization.
//
// Checkpoint layout (little endian):
//   "NCAM" | u32 version | u32 config_len | config text (key=value lines)
//   | u64 param_count | f32 params in canonical order
//   | u8 has_optimizer [| u64 t | f32 m[] | f32 v[]]
// Canonical parameter order is level-major: perception weights, perception
// bias, fc1 W, fc1 b, fc2 W, fc2 b, then the flow head when present.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncamorph/loss.hpp"
#include "ncamorph/model.hpp"
#include "ncamorph/volume_io.hpp"

namespace ncam {

struct AdamState {
  std::vector<float> m, v;
  std::int64_t t = 0;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Parameter buffers in canonical order; grads use the same layout.
std::vector<std::span<float>> param_views(NcaModel& model);

void adam_step(std::vector<std::span<float>> params,
               std::vector<std::span<const float>> grads, AdamState& state,
               const AdamConfig& cfg);

struct TrainConfig {
  AdamConfig adam;
  int iterations = 200;
  int batch = 1;          // pairs per optimizer step
  int patch_side = 0;     // 0 = auto (full size / downsample factor, per dim)
  LossWeights loss;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;       // 0 = final checkpoint only
  std::string checkpoint_path;    // where periodic checkpoints go
  bool save_optimizer = false;

  void validate() const;
};

struct LossRow {
  std::int64_t iteration = 0;
  double total = 0.0, sim = 0.0, smooth = 0.0, seg = 0.0;
};

// One optimizer step: sample pair and patch, run the patch-mode forward,
// backprop both levels, apply Adam. Exposed for the trainer and tests.
LossRow train_step(const std::vector<LoadedPair>& dataset, NcaModel& model,
                   AdamState& state, const TrainConfig& cfg,
                   std::int64_t iteration);

// Runs iterations [state.t, cfg.iterations); resuming continues the same
// per-iteration seed stream, so split runs match uninterrupted ones.
std::vector<LossRow> train(const std::vector<LoadedPair>& dataset,
                           NcaModel& model, AdamState& state,
                           const TrainConfig& cfg);

void write_loss_csv(const std::vector<LossRow>& log, const std::string& path);

void save_checkpoint(const NcaModel& model, const AdamState* opt,
                     const std::string& path);
NcaModel load_checkpoint(const std::string& path, AdamState* opt = nullptr);

std::string arch_config_text(const ArchConfig& cfg);
ArchConfig parse_arch_config_text(const std::string& text);

}  // namespace ncam
