#pragma once

// The registration model: a per-level local update rule applied over a
// coarse-to-fine pyramid. Cell state channels: 0 fixed image, 1 moving
// image, 2..4 flow readout (dx, dy, dz), the rest hidden. Image channels
// are never touched by update steps.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ncamorph/flow.hpp"
#include "ncamorph/grid.hpp"
#include "ncamorph/loss.hpp"
#include "ncamorph/ops.hpp"
#include "ncamorph/rng.hpp"

namespace ncam {

enum class FlowMode { direct, conv_head };

struct ArchConfig {
  int channels = 32;  // i_c
  int hidden = 128;   // h
  std::vector<int> kernels = {3, 3};  // per level, coarse first
  std::vector<int> steps = {5, 5};
  double fire_rate = 0.5;
  int downsample_factor = 4;
  FlowMode flow_mode = FlowMode::direct;

  int levels() const { return static_cast<int>(kernels.size()); }

  void validate() const {
    if (channels < 5)
      throw std::invalid_argument(
          "ArchConfig: need >= 5 channels (2 images + 3 flow)");
    if (hidden < 1) throw std::invalid_argument("ArchConfig: hidden < 1");
    if (kernels.empty() || kernels.size() != steps.size())
      throw std::invalid_argument("ArchConfig: kernels/steps must align");
    for (int k : kernels)
      if (k <= 0 || k % 2 == 0)
        throw std::invalid_argument("ArchConfig: kernels must be odd");
    for (int s : steps)
      if (s < 1) throw std::invalid_argument("ArchConfig: steps must be >= 1");
    if (fire_rate < 0.0 || fire_rate > 1.0)
      throw std::invalid_argument("ArchConfig: fire_rate outside [0,1]");
    if (downsample_factor < 1 ||
        (levels() > 1 && downsample_factor < 2))
      throw std::invalid_argument("ArchConfig: bad downsample_factor");
  }

  // spatial reduction applied to level `lvl` (finest level is 1)
  int level_scale(int lvl) const {
    int s = 1;
    for (int i = lvl; i + 1 < levels(); ++i) s *= downsample_factor;
    return s;
  }
};

template <typename T>
struct NcaLevelParams {
  ConvKernel3<T> perception;          // i_c -> i_c
  DenseLayer<T> fc1;                  // 2*i_c -> h
  DenseLayer<T> fc2;                  // h -> i_c
  std::optional<ConvKernel3<T>> flow_head;  // i_c -> 3, 1x1x1
};

template <typename T>
struct NcaModelT {
  ArchConfig config;
  std::vector<NcaLevelParams<T>> levels;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& L : levels) {
      n += L.perception.w.size() + L.perception.b.size();
      n += L.fc1.w.size() + L.fc1.b.size();
      n += L.fc2.w.size() + L.fc2.b.size();
      if (L.flow_head) n += L.flow_head->w.size() + L.flow_head->b.size();
    }
    return n;
  }

  template <typename U>
  NcaModelT<U> cast() const {
    NcaModelT<U> out;
    out.config = config;
    out.levels.reserve(levels.size());
    for (const auto& L : levels) {
      NcaLevelParams<U> lp;
      lp.perception = L.perception.template cast<U>();
      lp.fc1 = L.fc1.template cast<U>();
      lp.fc2 = L.fc2.template cast<U>();
      if (L.flow_head) lp.flow_head = L.flow_head->template cast<U>();
      out.levels.push_back(std::move(lp));
    }
    return out;
  }
};

using NcaModel = NcaModelT<float>;

// Closed-form trainable parameter count for a config.
inline std::size_t expected_param_count(const ArchConfig& c) {
  std::size_t n = 0;
  for (int lvl = 0; lvl < c.levels(); ++lvl) {
    const std::size_t k3 = static_cast<std::size_t>(c.kernels[lvl]) *
                           c.kernels[lvl] * c.kernels[lvl];
    n += k3 * c.channels * c.channels + c.channels;        // perception
    n += 2ull * c.channels * c.hidden + c.hidden;          // fc1
    n += static_cast<std::size_t>(c.hidden) * c.channels + c.channels;  // fc2
    if (c.flow_mode == FlowMode::conv_head) n += 3ull * c.channels + 3;
  }
  return n;
}

// Kaiming-uniform for perception and fc1; fc2 (and the flow head, when
// present) start at zero so the untrained update is the identity and the
// untrained flow is zero.
template <typename T = float>
NcaModelT<T> init_model(std::uint64_t seed, const ArchConfig& config) {
  config.validate();
  NcaModelT<T> m;
  m.config = config;
  Rng rng(seed);
  auto kaiming = [&](std::vector<T>& w, int fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (T& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  for (int lvl = 0; lvl < config.levels(); ++lvl) {
    NcaLevelParams<T> L;
    const int k = config.kernels[lvl];
    L.perception = ConvKernel3<T>(config.channels, config.channels, k);
    kaiming(L.perception.w, config.channels * k * k * k);
    L.fc1 = DenseLayer<T>(config.hidden, 2 * config.channels);
    kaiming(L.fc1.w, 2 * config.channels);
    L.fc2 = DenseLayer<T>(config.channels, config.hidden);
    if (config.flow_mode == FlowMode::conv_head)
      L.flow_head = ConvKernel3<T>(3, config.channels, 1);
    m.levels.push_back(std::move(L));
  }
  return m;
}

template <typename T>
NcaModelT<T> zero_grads_like(const NcaModelT<T>& m) {
  NcaModelT<T> g = m;
  for (auto& L : g.levels) {
    std::fill(L.perception.w.begin(), L.perception.w.end(), T(0));
    std::fill(L.perception.b.begin(), L.perception.b.end(), T(0));
    std::fill(L.fc1.w.begin(), L.fc1.w.end(), T(0));
    std::fill(L.fc1.b.begin(), L.fc1.b.end(), T(0));
    std::fill(L.fc2.w.begin(), L.fc2.w.end(), T(0));
    std::fill(L.fc2.b.begin(), L.fc2.b.end(), T(0));
    if (L.flow_head) {
      std::fill(L.flow_head->w.begin(), L.flow_head->w.end(), T(0));
      std::fill(L.flow_head->b.begin(), L.flow_head->b.end(), T(0));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fire mask: one Bernoulli(fire_rate) per cell, shared across channels.
// Degenerate rates skip the rng so fire_rate = 1 runs are seed-independent.

inline std::vector<std::uint8_t> make_fire_mask(std::size_t n,
                                                double fire_rate, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  if (fire_rate >= 1.0) {
    std::fill(m.begin(), m.end(), std::uint8_t(1));
  } else if (fire_rate > 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      m[i] = rng.uniform() < fire_rate ? 1 : 0;
  }
  return m;
}

template <typename T>
struct StepRecord {
  Grid<T> state_in;
  Grid<T> vn;       // perception output
  Grid<T> fc1_pre;  // pre-activation of the first dense layer
  std::vector<std::uint8_t> mask;
};

namespace detail {

// Per-cell rule, chunked over voxels so nothing of size hidden x voxels is
// materialized at inference scale. Voxel chunks are contiguous and
// independent: one writer per voxel.
template <typename T>
void rule_mlp_apply(const Grid<T>& vn, Grid<T>& state,
                    const NcaLevelParams<T>& P,
                    const std::vector<std::uint8_t>& mask,
                    Grid<T>* rec_fc1_pre) {
  const int ic = state.channels;
  const int h = P.fc1.out_dim;
  const std::size_t N = state.voxels();
  constexpr std::size_t kChunk = 4096;
  const std::size_t chunks = (N + kChunk - 1) / kChunk;

#pragma omp parallel for schedule(static)
  for (std::size_t ci = 0; ci < chunks; ++ci) {
    const std::size_t v0 = ci * kChunk;
    const std::size_t len = std::min(kChunk, N - v0);
    std::vector<T> a(static_cast<std::size_t>(h) * len);
    std::vector<T> vi(static_cast<std::size_t>(ic) * len);
    // fc1 over the virtual concat (vn, state)
    for (int j = 0; j < h; ++j) {
      T* aj = a.data() + static_cast<std::size_t>(j) * len;
      std::fill(aj, aj + len, P.fc1.b[j]);
      const T* wr = P.fc1.w.data() + static_cast<std::size_t>(j) * 2 * ic;
      for (int i = 0; i < 2 * ic; ++i) {
        const T w = wr[i];
        if (w == T(0)) continue;
        const T* src =
            (i < ic ? vn.plane(i) : state.plane(i - ic)) + v0;
        for (std::size_t t = 0; t < len; ++t) aj[t] += w * src[t];
      }
    }
    if (rec_fc1_pre)
      for (int j = 0; j < h; ++j)
        std::copy(a.data() + static_cast<std::size_t>(j) * len,
                  a.data() + static_cast<std::size_t>(j) * len + len,
                  rec_fc1_pre->plane(j) + v0);
    // relu in place
    for (T& v : a) v = std::max(v, T(0));
    // fc2
    for (int c = 0; c < ic; ++c) {
      T* vc = vi.data() + static_cast<std::size_t>(c) * len;
      std::fill(vc, vc + len, P.fc2.b[c]);
      const T* wr = P.fc2.w.data() + static_cast<std::size_t>(c) * h;
      for (int j = 0; j < h; ++j) {
        const T w = wr[j];
        if (w == T(0)) continue;
        const T* rj = a.data() + static_cast<std::size_t>(j) * len;
        for (std::size_t t = 0; t < len; ++t) vc[t] += w * rj[t];
      }
    }
    // masked residual; image channels 0..1 stay untouched
    for (int c = 2; c < ic; ++c) {
      T* sp = state.plane(c) + v0;
      const T* vc = vi.data() + static_cast<std::size_t>(c) * len;
      const std::uint8_t* mk = mask.data() + v0;
      for (std::size_t t = 0; t < len; ++t)
        if (mk[t]) sp[t] += vc[t];
    }
  }
}

}  // namespace detail

template <typename T>
void nca_step(Grid<T>& state, const NcaLevelParams<T>& P,
              const std::vector<std::uint8_t>& mask, StepRecord<T>* rec) {
  if (state.channels != P.perception.in_c)
    throw std::invalid_argument("nca_step: state channel mismatch");
  if (mask.size() != state.voxels())
    throw std::invalid_argument("nca_step: mask size mismatch");
  if (rec) {
    rec->state_in = state;
    rec->mask = mask;
    rec->fc1_pre = Grid<T>(P.fc1.out_dim, state.shape);
  }
  Grid<T> vn = conv3d(state, P.perception);
  detail::rule_mlp_apply(vn, state, P, mask, rec ? &rec->fc1_pre : nullptr);
  if (rec) rec->vn = std::move(vn);
}

// Returns the gradient w.r.t. the step's input state; parameter gradients
// accumulate into gP. The fire mask is a constant of differentiation.
template <typename T>
Grid<T> nca_step_backward(const StepRecord<T>& rec, const NcaLevelParams<T>& P,
                          const Grid<T>& g_next, NcaLevelParams<T>& gP) {
  const int ic = rec.state_in.channels;
  const int h = P.fc1.out_dim;
  const std::size_t N = rec.state_in.voxels();
  const Shape3 shape = rec.state_in.shape;

  Grid<T> ds = g_next;  // identity branch of the residual

  Grid<T> dvi(ic, shape);
  for (int c = 2; c < ic; ++c) {
    const T* g = g_next.plane(c);
    T* d = dvi.plane(c);
    for (std::size_t v = 0; v < N; ++v)
      if (rec.mask[v]) d[v] = g[v];
  }

  // fc2 backward: dr = W2^T dvi
  Grid<T> dr(h, shape);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < h; ++j) {
    T* out = dr.plane(j);
    for (int c = 0; c < ic; ++c) {
      const T w = P.fc2.w[static_cast<std::size_t>(c) * h + j];
      if (w == T(0)) continue;
      const T* d = dvi.plane(c);
      for (std::size_t v = 0; v < N; ++v) out[v] += w * d[v];
    }
  }
#pragma omp parallel for schedule(static)
  for (int c = 0; c < ic; ++c) {
    const T* d = dvi.plane(c);
    T* gw = gP.fc2.w.data() + static_cast<std::size_t>(c) * h;
    for (int j = 0; j < h; ++j) {
      const T* aj = rec.fc1_pre.plane(j);
      T acc = T(0);
      for (std::size_t v = 0; v < N; ++v)
        acc += d[v] * std::max(aj[v], T(0));
      gw[j] += acc;
    }
    T acc = T(0);
    for (std::size_t v = 0; v < N; ++v) acc += d[v];
    gP.fc2.b[c] += acc;
  }

  // relu backward in place on dr
#pragma omp parallel for schedule(static)
  for (int j = 0; j < h; ++j) {
    const T* aj = rec.fc1_pre.plane(j);
    T* d = dr.plane(j);
    for (std::size_t v = 0; v < N; ++v)
      if (!(aj[v] > T(0))) d[v] = T(0);
  }
  const Grid<T>& da = dr;

  // fc1 backward over the virtual concat (vn, state_in)
  Grid<T> dvn(ic, shape);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < 2 * ic; ++i) {
    T* out = (i < ic) ? dvn.plane(i) : ds.plane(i - ic);
    for (int j = 0; j < h; ++j) {
      const T w = P.fc1.w[static_cast<std::size_t>(j) * 2 * ic + i];
      if (w == T(0)) continue;
      const T* d = da.plane(j);
      for (std::size_t v = 0; v < N; ++v) out[v] += w * d[v];
    }
  }
#pragma omp parallel for schedule(static)
  for (int j = 0; j < h; ++j) {
    const T* d = da.plane(j);
    T* gw = gP.fc1.w.data() + static_cast<std::size_t>(j) * 2 * ic;
    for (int i = 0; i < 2 * ic; ++i) {
      const T* src = (i < ic) ? rec.vn.plane(i) : rec.state_in.plane(i - ic);
      T acc = T(0);
      for (std::size_t v = 0; v < N; ++v) acc += d[v] * src[v];
      gw[i] += acc;
    }
    T acc = T(0);
    for (std::size_t v = 0; v < N; ++v) acc += d[v];
    gP.fc1.b[j] += acc;
  }

  conv3d_backward(rec.state_in, P.perception, dvn, &ds, &gP.perception);
  return ds;
}

template <typename T>
struct LevelTrace {
  std::vector<StepRecord<T>> steps;
  Grid<T> state_final;
};

template <typename T>
void run_level(Grid<T>& state, const NcaLevelParams<T>& P, int steps,
               double fire_rate, Rng& rng, LevelTrace<T>* trace) {
  if (steps < 1) throw std::invalid_argument("run_level: steps must be >= 1");
  if (trace) trace->steps.clear();
  for (int s = 0; s < steps; ++s) {
    auto mask = make_fire_mask(state.voxels(), fire_rate, rng);
    if (trace) {
      trace->steps.emplace_back();
      nca_step(state, P, mask, &trace->steps.back());
    } else {
      nca_step(state, P, mask, static_cast<StepRecord<T>*>(nullptr));
    }
  }
  if (trace) trace->state_final = state;
}

// ---------------------------------------------------------------------------
// Flow extraction: direct channel readout or a 1x1x1 conv head.

template <typename T>
FlowT<T> extract_flow(const Grid<T>& state, FlowMode mode,
                      const std::optional<ConvKernel3<T>>& head) {
  FlowT<T> flow(state.shape);
  if (mode == FlowMode::direct) {
    const std::size_t N = state.voxels();
    for (int c = 0; c < 3; ++c) {
      const T* src = state.plane(2 + c);
      std::copy(src, src + N, flow.comp(c));
    }
  } else {
    if (!head)
      throw std::invalid_argument("extract_flow: conv_head mode needs a head");
    Grid<T> out = conv3d(state, *head);
    flow.data = std::move(out.data);
  }
  return flow;
}

template <typename T>
void extract_flow_backward(const Grid<T>& state_final, FlowMode mode,
                           const std::optional<ConvKernel3<T>>& head,
                           const FlowT<T>& g_flow, Grid<T>& g_state,
                           ConvKernel3<T>* g_head) {
  if (mode == FlowMode::direct) {
    const std::size_t N = state_final.voxels();
    for (int c = 0; c < 3; ++c) {
      const T* src = g_flow.comp(c);
      T* dst = g_state.plane(2 + c);
      for (std::size_t v = 0; v < N; ++v) dst[v] += src[v];
    }
  } else {
    Grid<T> g(3, g_flow.shape);
    g.data = g_flow.data;
    conv3d_backward(state_final, *head, g, &g_state, g_head);
  }
}

// ---------------------------------------------------------------------------
// Two-level (generally n-level) registration.

template <typename T>
struct RegTrace {
  std::vector<LevelTrace<T>> levels;
  std::vector<FlowT<T>> level_flows;  // flow extracted at each level
  PatchBox patch;
  bool has_patch = false;
  Shape3 full_shape;
};

namespace detail {

// Level input state: images in channels 0..1, injected flow (if any) in
// channels 2..4, zeros elsewhere.
template <typename T>
Grid<T> build_level_state(const Grid<T>& fixed_lvl, const Grid<T>& moving_lvl,
                          const FlowT<T>* injected, int channels) {
  Grid<T> state(channels, fixed_lvl.shape);
  const std::size_t N = state.voxels();
  std::copy(fixed_lvl.plane(0), fixed_lvl.plane(0) + N, state.plane(0));
  std::copy(moving_lvl.plane(0), moving_lvl.plane(0) + N, state.plane(1));
  if (injected)
    for (int c = 0; c < 3; ++c)
      std::copy(injected->comp(c), injected->comp(c) + N, state.plane(2 + c));
  return state;
}

template <typename T>
void check_register_inputs(const Grid<T>& fixed, const Grid<T>& moving,
                           const ArchConfig& cfg) {
  if (fixed.channels != 1 || moving.channels != 1)
    throw std::invalid_argument("register: inputs must be single-channel");
  if (!(fixed.shape == moving.shape))
    throw std::invalid_argument("register: fixed/moving shape mismatch");
  const int s = cfg.level_scale(0);
  if (fixed.shape.d % s || fixed.shape.h % s || fixed.shape.w % s)
    throw std::invalid_argument("register: shape " + fixed.shape.str() +
                                " not divisible by pyramid scale " +
                                std::to_string(s));
}

}  // namespace detail

// Inference: full resolution, no intermediate records kept.
template <typename T>
FlowT<T> register_pair(const Grid<T>& fixed, const Grid<T>& moving,
                       const NcaModelT<T>& model, double fire_rate, Rng& rng,
                       std::vector<FlowT<T>>* level_flows = nullptr) {
  const ArchConfig& cfg = model.config;
  detail::check_register_inputs(fixed, moving, cfg);
  FlowT<T> flow;
  if (level_flows) level_flows->clear();
  for (int lvl = 0; lvl < cfg.levels(); ++lvl) {
    const int scale = cfg.level_scale(lvl);
    Grid<T> f = (scale == 1) ? fixed : avg_downsample(fixed, scale);
    Grid<T> m = (scale == 1) ? moving : avg_downsample(moving, scale);
    FlowT<T> injected;
    const FlowT<T>* inj = nullptr;
    if (lvl > 0) {
      injected = upsample_flow(flow, cfg.downsample_factor);
      inj = &injected;
    }
    Grid<T> state = detail::build_level_state(f, m, inj, cfg.channels);
    run_level(state, model.levels[lvl], cfg.steps[lvl], fire_rate, rng,
              static_cast<LevelTrace<T>*>(nullptr));
    flow = extract_flow(state, cfg.flow_mode, model.levels[lvl].flow_head);
    if (level_flows) level_flows->push_back(flow);
  }
  return flow;
}

// Training forward: records every step; optional patch crop on the finest
// level. The final flow lives at trace.level_flows.back() (patch-sized when
// a patch is given).
template <typename T>
RegTrace<T> register_forward(const Grid<T>& fixed, const Grid<T>& moving,
                             const NcaModelT<T>& model, double fire_rate,
                             Rng& rng, const PatchBox* patch) {
  const ArchConfig& cfg = model.config;
  detail::check_register_inputs(fixed, moving, cfg);
  RegTrace<T> trace;
  trace.full_shape = fixed.shape;
  trace.levels.resize(cfg.levels());
  FlowT<T> flow;
  for (int lvl = 0; lvl < cfg.levels(); ++lvl) {
    const int scale = cfg.level_scale(lvl);
    Grid<T> f = (scale == 1) ? fixed : avg_downsample(fixed, scale);
    Grid<T> m = (scale == 1) ? moving : avg_downsample(moving, scale);
    FlowT<T> injected;
    const FlowT<T>* inj = nullptr;
    if (lvl > 0) {
      injected = upsample_flow(flow, cfg.downsample_factor);
      inj = &injected;
    }
    Grid<T> state = detail::build_level_state(f, m, inj, cfg.channels);
    const bool finest = (lvl == cfg.levels() - 1);
    if (finest && patch) {
      state = crop_patch(state, *patch);
      trace.patch = *patch;
      trace.has_patch = true;
    }
    run_level(state, model.levels[lvl], cfg.steps[lvl], fire_rate, rng,
              &trace.levels[lvl]);
    flow = extract_flow(state, cfg.flow_mode, model.levels[lvl].flow_head);
    trace.level_flows.push_back(flow);
  }
  return trace;
}

// Reverse pass from the finest flow gradient; parameter gradients accumulate
// into `grads` (same shapes as the model). `g_coarse_extra`, when given, is
// added to the level-0 flow gradient (auxiliary coarse loss).
template <typename T>
void register_backward(const NcaModelT<T>& model, const RegTrace<T>& trace,
                       const FlowT<T>& g_flow_finest,
                       const FlowT<T>* g_coarse_extra, NcaModelT<T>& grads) {
  const ArchConfig& cfg = model.config;
  const int L = cfg.levels();
  FlowT<T> g_flow = g_flow_finest;
  for (int lvl = L - 1; lvl >= 0; --lvl) {
    if (lvl == 0 && g_coarse_extra) {
      if (!(g_coarse_extra->shape == g_flow.shape))
        throw std::invalid_argument("register_backward: aux grad shape");
      for (std::size_t i = 0; i < g_flow.data.size(); ++i)
        g_flow.data[i] += g_coarse_extra->data[i];
    }
    const auto& ltrace = trace.levels[lvl];
    Grid<T> g_state(cfg.channels, ltrace.state_final.shape);
    ConvKernel3<T>* g_head =
        grads.levels[lvl].flow_head ? &*grads.levels[lvl].flow_head : nullptr;
    extract_flow_backward(ltrace.state_final, cfg.flow_mode,
                          model.levels[lvl].flow_head, g_flow, g_state,
                          g_head);
    for (int s = static_cast<int>(ltrace.steps.size()) - 1; s >= 0; --s)
      g_state = nca_step_backward(ltrace.steps[s], model.levels[lvl], g_state,
                                  grads.levels[lvl]);
    if (lvl == 0) break;

    // init-state channels 2..4 came from the upsampled coarser flow
    const Shape3 lvl_shape{trace.full_shape.d / cfg.level_scale(lvl),
                           trace.full_shape.h / cfg.level_scale(lvl),
                           trace.full_shape.w / cfg.level_scale(lvl)};
    FlowT<T> g_up(lvl_shape);
    if (lvl == L - 1 && trace.has_patch) {
      Grid<T> full(3, lvl_shape);
      Grid<T> patch_grad(3, trace.patch.size);
      const std::size_t N = g_state.voxels();
      for (int c = 0; c < 3; ++c)
        std::copy(g_state.plane(2 + c), g_state.plane(2 + c) + N,
                  patch_grad.plane(c));
      crop_patch_backward(patch_grad, trace.patch, full);
      g_up.data = std::move(full.data);
    } else {
      const std::size_t N = g_state.voxels();
      for (int c = 0; c < 3; ++c)
        std::copy(g_state.plane(2 + c), g_state.plane(2 + c) + N,
                  g_up.comp(c));
    }
    const Shape3 coarse_shape{lvl_shape.d / cfg.downsample_factor,
                              lvl_shape.h / cfg.downsample_factor,
                              lvl_shape.w / cfg.downsample_factor};
    FlowT<T> g_coarse(coarse_shape);
    upsample_flow_backward(g_up, coarse_shape, cfg.downsample_factor,
                           g_coarse);
    g_flow = std::move(g_coarse);
  }
}

// ---------------------------------------------------------------------------
// Stability probe: repeated seeded inferences, per-voxel std maps (Welford,
// so identical runs give exactly zero).

struct StabilityResult {
  FlowField flow_std;               // std of each flow component
  Grid<float> seg_std;              // mean over labels of warped one-hot std
  bool has_seg = false;
  int runs = 0;
  double flow_std_mean = 0.0, flow_std_max = 0.0;
  double seg_std_mean = 0.0, seg_std_max = 0.0;
};

inline StabilityResult stability_probe(const ChannelGrid& fixed,
                                       const ChannelGrid& moving,
                                       const LabelMap* moving_seg,
                                       const NcaModel& model, int runs,
                                       std::uint64_t base_seed,
                                       double fire_rate) {
  if (runs < 2)
    throw std::invalid_argument("stability_probe: need at least 2 runs");
  const std::size_t N = fixed.voxels();
  std::vector<double> mean(3 * N, 0.0), m2(3 * N, 0.0);
  Grid<float> seg_onehot;
  std::vector<double> seg_mean, seg_m2;
  int labels = 0;
  if (moving_seg) {
    seg_onehot = one_hot<float>(*moving_seg);
    labels = seg_onehot.channels;
    seg_mean.assign(static_cast<std::size_t>(labels) * N, 0.0);
    seg_m2.assign(static_cast<std::size_t>(labels) * N, 0.0);
  }
  for (int r = 0; r < runs; ++r) {
    Rng rng(derive_seed(base_seed, static_cast<std::uint64_t>(r)));
    FlowField flow = register_pair(fixed, moving, model, fire_rate, rng);
    for (std::size_t i = 0; i < 3 * N; ++i) {
      const double x = flow.data[i];
      const double d = x - mean[i];
      mean[i] += d / (r + 1);
      m2[i] += d * (x - mean[i]);
    }
    if (moving_seg) {
      Grid<float> warped = warp_trilinear(seg_onehot, flow);
      for (std::size_t i = 0; i < seg_mean.size(); ++i) {
        const double x = warped.data[i];
        const double d = x - seg_mean[i];
        seg_mean[i] += d / (r + 1);
        seg_m2[i] += d * (x - seg_mean[i]);
      }
    }
  }
  StabilityResult res;
  res.runs = runs;
  res.flow_std = FlowField(fixed.shape);
  double acc = 0.0;
  for (std::size_t i = 0; i < 3 * N; ++i) {
    const double sd = std::sqrt(std::max(0.0, m2[i] / runs));
    res.flow_std.data[i] = static_cast<float>(sd);
    acc += sd;
    res.flow_std_max = std::max(res.flow_std_max, sd);
  }
  res.flow_std_mean = acc / static_cast<double>(3 * N);
  if (moving_seg) {
    res.has_seg = true;
    res.seg_std = Grid<float>(1, fixed.shape);
    acc = 0.0;
    for (std::size_t v = 0; v < N; ++v) {
      double s = 0.0;
      for (int l = 0; l < labels; ++l)
        s += std::sqrt(
            std::max(0.0, seg_m2[static_cast<std::size_t>(l) * N + v] / runs));
      s /= labels;
      res.seg_std.data[v] = static_cast<float>(s);
      acc += s;
      res.seg_std_max = std::max(res.seg_std_max, s);
    }
    res.seg_std_mean = acc / static_cast<double>(N);
  }
  return res;
}

}  // namespace ncam
