#include "ncamorph/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ncamorph/ops.hpp"

namespace ncam {

void SynthConfig::validate() const {
  if (size.d < 8 || size.h < 8 || size.w < 8)
    throw std::invalid_argument("SynthConfig: size too small (min 8)");
  if (blobs < 1) throw std::invalid_argument("SynthConfig: blobs < 1");
  if (labels < 2)
    throw std::invalid_argument("SynthConfig: need background + >= 1 label");
  if (noise < 0) throw std::invalid_argument("SynthConfig: negative noise");
  if (amplitude < 0) throw std::invalid_argument("SynthConfig: negative amplitude");
  const int min_dim = std::min({size.d, size.h, size.w});
  if (amplitude >= min_dim / 4.0)
    throw std::invalid_argument("SynthConfig: amplitude must stay below grid/4");
  if (smoothness < 2.0)
    throw std::invalid_argument("SynthConfig: smoothness below 2 voxels");
  // fold-free guarantee: max displacement gradient 2*amplitude/smoothness < 1
  if (amplitude > 0 && 2.0 * amplitude / smoothness >= 0.95)
    throw std::invalid_argument(
        "SynthConfig: amplitude too large for smoothness (folding risk)");
}

namespace {

struct Blob {
  double cz, cy, cx;
  double radius;
  double intensity;
  int label;
};

// Smooth random displacement field: low-resolution uniform field upsampled
// trilinearly. Values are already in final-resolution voxel units.
FlowField random_smooth_flow(Shape3 shape, double amplitude, double spacing,
                             Rng& rng) {
  FlowField flow(shape);
  if (amplitude <= 0.0) return flow;
  auto ctrl_dim = [&](int n) {
    return std::max(2, static_cast<int>(std::ceil(n / spacing)) + 1);
  };
  const Shape3 cs{ctrl_dim(shape.d), ctrl_dim(shape.h), ctrl_dim(shape.w)};
  Grid<float> ctrl(3, cs);
  for (auto& v : ctrl.data)
    v = static_cast<float>(rng.uniform(-amplitude, amplitude));
  Grid<float> up = trilinear_resize(ctrl, shape);
  flow.data = std::move(up.data);
  return flow;
}

// Fixed-point inversion of a displacement field: inv(p) = -g(p + inv(p)).
FlowField invert_flow(const FlowField& g, int iterations = 20) {
  FlowField inv(g.shape);
  Grid<float> gg(3, g.shape);
  gg.data = g.data;
  for (int it = 0; it < iterations; ++it) {
    Grid<float> sampled = warp_trilinear(gg, inv);  // g at p + inv(p)
    for (std::size_t i = 0; i < inv.data.size(); ++i)
      inv.data[i] = -sampled.data[i];
  }
  return inv;
}

}  // namespace

SynthPair synth_pair(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Shape3 s = cfg.size;
  const int min_dim = std::min({s.d, s.h, s.w});

  std::vector<Blob> blobs(cfg.blobs);
  for (int i = 0; i < cfg.blobs; ++i) {
    Blob& b = blobs[i];
    b.cz = rng.uniform(0.18, 0.82) * s.d;
    b.cy = rng.uniform(0.18, 0.82) * s.h;
    b.cx = rng.uniform(0.18, 0.82) * s.w;
    b.radius = rng.uniform(0.12, 0.22) * min_dim;
    b.intensity = rng.uniform(0.55, 1.0);
    b.label = 1 + i % (cfg.labels - 1);
  }

  Volume base(s);
  base.spacing = {1.0f, 1.0f, 1.0f};
  LabelMap base_seg(s, cfg.labels);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double acc = 0.0;
        double best = 0.0;
        int best_label = 0;
        for (const Blob& b : blobs) {
          const double dz = (z - b.cz) / b.radius;
          const double dy = (y - b.cy) / b.radius;
          const double dx = (x - b.cx) / b.radius;
          const double q = 1.0 - (dz * dz + dy * dy + dx * dx);
          if (q <= 0.0) continue;
          const double bump = b.intensity * q * q;
          acc += bump;
          if (bump > best) {
            best = bump;
            best_label = b.label;
          }
        }
        base.at(z, y, x) = static_cast<float>(std::min(acc, 1.0));
        if (best > 0.08) base_seg.at(z, y, x) = best_label;
      }
  if (cfg.noise > 0.0)
    for (float& v : base.data)
      v = std::clamp(v + static_cast<float>(cfg.noise * rng.normal()), 0.0f,
                     1.0f);

  FlowField gen = random_smooth_flow(s, cfg.amplitude, cfg.smoothness, rng);

  SynthPair out;
  out.fixed = base;
  out.fixed_seg = base_seg;
  if (cfg.amplitude <= 0.0) {
    out.moving = base;
    out.moving_seg = base_seg;
    out.gt_flow = FlowField(s);
  } else {
    Grid<float> base_grid = base.grid();
    Grid<float> warped = warp_trilinear(base_grid, gen);
    out.moving = Volume::from_grid(warped);
    out.moving.spacing = base.spacing;
    out.moving.affine = base.affine;
    out.moving_seg = warp_nearest(base_seg, gen);
    out.gt_flow = invert_flow(gen);
  }
  return out;
}

}  // namespace ncam
