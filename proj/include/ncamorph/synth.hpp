#pragma once

// Seeded synthetic phantom pairs: smooth random blobs with label regions,
// deformed by a smooth random flow that is fold-free by construction. The
// returned ground-truth flow is the displacement that registers the moving
// pair back onto the fixed pair.

#include <cstdint>

#include "ncamorph/flow.hpp"
#include "ncamorph/rng.hpp"
#include "ncamorph/volume_io.hpp"

namespace ncam {

struct SynthConfig {
  Shape3 size = {48, 48, 48};
  int blobs = 10;
  int labels = 4;          // including background 0
  double noise = 0.02;     // intensity noise on the shared base image
  double amplitude = 3.0;  // max displacement, voxels
  double smoothness = 8.0; // control-point spacing of the random field, voxels
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthPair {
  Volume fixed, moving;
  LabelMap fixed_seg, moving_seg;
  FlowField gt_flow;  // registers moving -> fixed
};

SynthPair synth_pair(const SynthConfig& cfg);

}  // namespace ncam
