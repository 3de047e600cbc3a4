#pragma once

// Deformation-field machinery: trilinear warping with adjoints, nearest
// label warping, flow upsampling with vector rescaling, Jacobian analysis.
//
// Flow components are displacements in voxel units, component order
// (dx, dy, dz) along (x -> W, y -> H, z -> D).

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "ncamorph/grid.hpp"
#include "ncamorph/ops.hpp"

namespace ncam {

template <typename T>
struct FlowT {
  Shape3 shape;
  std::vector<T> data;  // 3 * D*H*W, component-major

  FlowT() = default;
  explicit FlowT(Shape3 shape_, T fill = T(0)) : shape(shape_) {
    data.assign(3 * shape_.voxels(), fill);
  }

  std::size_t voxels() const { return shape.voxels(); }

  T& at(int comp, int z, int y, int x) {
    return data[(static_cast<std::size_t>(comp) * shape.d + z) * shape.h *
                    shape.w +
                static_cast<std::size_t>(y) * shape.w + x];
  }
  const T& at(int comp, int z, int y, int x) const {
    return const_cast<FlowT*>(this)->at(comp, z, y, x);
  }

  T* comp(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* comp(int c) const {
    return data.data() + static_cast<std::size_t>(c) * voxels();
  }

  Grid<T> as_grid() const {
    Grid<T> g(3, shape);
    g.data = data;
    return g;
  }

  static FlowT from_grid(const Grid<T>& g) {
    if (g.channels != 3)
      throw std::invalid_argument("FlowT::from_grid: need 3 channels");
    FlowT f(g.shape);
    f.data = g.data;
    return f;
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  FlowT<U> cast() const {
    FlowT<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using FlowField = FlowT<float>;

struct LabelMap {
  Shape3 shape;
  std::vector<std::int32_t> data;
  int num_labels = 0;

  LabelMap() = default;
  LabelMap(Shape3 shape_, int num_labels_)
      : shape(shape_), num_labels(num_labels_) {
    data.assign(shape_.voxels(), 0);
  }

  std::int32_t& at(int z, int y, int x) {
    return data[(static_cast<std::size_t>(z) * shape.h + y) * shape.w + x];
  }
  std::int32_t at(int z, int y, int x) const {
    return data[(static_cast<std::size_t>(z) * shape.h + y) * shape.w + x];
  }
};

namespace detail {

// Per-axis sample: clamped base index pair and fraction, plus whether the
// un-clamped coordinate sits strictly inside (0, size-1); only then does a
// flow perturbation move the sample.
template <typename T>
struct WarpTap {
  int i0, i1;
  T t;
  bool inside;
};

template <typename T>
inline WarpTap<T> warp_tap(T s, int size) {
  WarpTap<T> tap;
  tap.inside = (s > T(0)) && (s < static_cast<T>(size - 1));
  T c = std::clamp(s, T(0), static_cast<T>(size - 1));
  int i0 = static_cast<int>(std::floor(c));
  if (i0 > size - 1) i0 = size - 1;
  if (i0 < 0) i0 = 0;
  tap.i0 = i0;
  tap.i1 = std::min(i0 + 1, size - 1);
  tap.t = c - static_cast<T>(i0);
  return tap;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// warp_trilinear: out(p) = volume sampled at p + flow(p), edge clamped.

template <typename T>
Grid<T> warp_trilinear(const Grid<T>& vol, const FlowT<T>& flow) {
  if (!(vol.shape == flow.shape))
    throw std::invalid_argument("warp_trilinear: shape mismatch");
  const int D = vol.shape.d, H = vol.shape.h, W = vol.shape.w;
  Grid<T> out(vol.channels, vol.shape);
  const T* fx = flow.comp(0);
  const T* fy = flow.comp(1);
  const T* fz = flow.comp(2);
#pragma omp parallel for schedule(static)
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p =
            (static_cast<std::size_t>(z) * H + y) * W + x;
        const auto ax = detail::warp_tap<T>(static_cast<T>(x) + fx[p], W);
        const auto ay = detail::warp_tap<T>(static_cast<T>(y) + fy[p], H);
        const auto az = detail::warp_tap<T>(static_cast<T>(z) + fz[p], D);
        for (int c = 0; c < vol.channels; ++c) {
          auto sample = [&](int zz, int yy) {
            return lerp1(vol.at(c, zz, yy, ax.i0), vol.at(c, zz, yy, ax.i1),
                         ax.t);
          };
          T c00 = sample(az.i0, ay.i0), c01 = sample(az.i0, ay.i1);
          T c10 = sample(az.i1, ay.i0), c11 = sample(az.i1, ay.i1);
          out.at(c, z, y, x) =
              lerp1(lerp1(c00, c01, ay.t), lerp1(c10, c11, ay.t), az.t);
        }
      }
  return out;
}

// Adjoints w.r.t. the volume (scatter) and the flow (analytic derivative of
// the trilinear weights; zero where the sample coordinate is clamped).
template <typename T>
void warp_trilinear_backward(const Grid<T>& vol, const FlowT<T>& flow,
                             const Grid<T>& g_out, Grid<T>* g_vol,
                             FlowT<T>* g_flow) {
  if (!(vol.shape == flow.shape) || !g_out.same_layout(vol))
    throw std::invalid_argument("warp_trilinear_backward: shape mismatch");
  const int D = vol.shape.d, H = vol.shape.h, W = vol.shape.w;
  const T* fx = flow.comp(0);
  const T* fy = flow.comp(1);
  const T* fz = flow.comp(2);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p =
            (static_cast<std::size_t>(z) * H + y) * W + x;
        const auto ax = detail::warp_tap<T>(static_cast<T>(x) + fx[p], W);
        const auto ay = detail::warp_tap<T>(static_cast<T>(y) + fy[p], H);
        const auto az = detail::warp_tap<T>(static_cast<T>(z) + fz[p], D);
        const T wx1 = ax.t, wx0 = T(1) - ax.t;
        const T wy1 = ay.t, wy0 = T(1) - ay.t;
        const T wz1 = az.t, wz0 = T(1) - az.t;
        T dsx = T(0), dsy = T(0), dsz = T(0);
        for (int c = 0; c < vol.channels; ++c) {
          const T g = g_out.at(c, z, y, x);
          const T v000 = vol.at(c, az.i0, ay.i0, ax.i0);
          const T v001 = vol.at(c, az.i0, ay.i0, ax.i1);
          const T v010 = vol.at(c, az.i0, ay.i1, ax.i0);
          const T v011 = vol.at(c, az.i0, ay.i1, ax.i1);
          const T v100 = vol.at(c, az.i1, ay.i0, ax.i0);
          const T v101 = vol.at(c, az.i1, ay.i0, ax.i1);
          const T v110 = vol.at(c, az.i1, ay.i1, ax.i0);
          const T v111 = vol.at(c, az.i1, ay.i1, ax.i1);
          if (g_vol) {
            g_vol->at(c, az.i0, ay.i0, ax.i0) += g * wz0 * wy0 * wx0;
            g_vol->at(c, az.i0, ay.i0, ax.i1) += g * wz0 * wy0 * wx1;
            g_vol->at(c, az.i0, ay.i1, ax.i0) += g * wz0 * wy1 * wx0;
            g_vol->at(c, az.i0, ay.i1, ax.i1) += g * wz0 * wy1 * wx1;
            g_vol->at(c, az.i1, ay.i0, ax.i0) += g * wz1 * wy0 * wx0;
            g_vol->at(c, az.i1, ay.i0, ax.i1) += g * wz1 * wy0 * wx1;
            g_vol->at(c, az.i1, ay.i1, ax.i0) += g * wz1 * wy1 * wx0;
            g_vol->at(c, az.i1, ay.i1, ax.i1) += g * wz1 * wy1 * wx1;
          }
          if (g_flow) {
            dsx += g * (wz0 * (wy0 * (v001 - v000) + wy1 * (v011 - v010)) +
                        wz1 * (wy0 * (v101 - v100) + wy1 * (v111 - v110)));
            dsy += g * (wz0 * (wx0 * (v010 - v000) + wx1 * (v011 - v001)) +
                        wz1 * (wx0 * (v110 - v100) + wx1 * (v111 - v101)));
            dsz += g * (wy0 * (wx0 * (v100 - v000) + wx1 * (v101 - v001)) +
                        wy1 * (wx0 * (v110 - v010) + wx1 * (v111 - v011)));
          }
        }
        if (g_flow) {
          if (ax.inside) g_flow->comp(0)[p] += dsx;
          if (ay.inside) g_flow->comp(1)[p] += dsy;
          if (az.inside) g_flow->comp(2)[p] += dsz;
        }
      }
}

// ---------------------------------------------------------------------------
// warp_nearest: evaluation-only label resampling, round then clamp.

inline LabelMap warp_nearest(const LabelMap& labels, const FlowField& flow) {
  if (!(labels.shape == flow.shape))
    throw std::invalid_argument("warp_nearest: shape mismatch");
  const int D = labels.shape.d, H = labels.shape.h, W = labels.shape.w;
  LabelMap out(labels.shape, labels.num_labels);
  const float* fx = flow.comp(0);
  const float* fy = flow.comp(1);
  const float* fz = flow.comp(2);
#pragma omp parallel for schedule(static)
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p =
            (static_cast<std::size_t>(z) * H + y) * W + x;
        int sx = static_cast<int>(std::lround(x + fx[p]));
        int sy = static_cast<int>(std::lround(y + fy[p]));
        int sz = static_cast<int>(std::lround(z + fz[p]));
        sx = std::clamp(sx, 0, W - 1);
        sy = std::clamp(sy, 0, H - 1);
        sz = std::clamp(sz, 0, D - 1);
        out.at(z, y, x) = labels.at(sz, sy, sx);
      }
  return out;
}

// ---------------------------------------------------------------------------
// upsample_flow: trilinear resize of each component, displacements rescaled
// by the factor (voxel units follow resolution).

template <typename T>
FlowT<T> upsample_flow(const FlowT<T>& flow, int factor) {
  if (factor <= 0) throw std::invalid_argument("upsample_flow: factor <= 0");
  Grid<T> g(3, flow.shape);
  g.data = flow.data;
  Shape3 target{flow.shape.d * factor, flow.shape.h * factor,
                flow.shape.w * factor};
  Grid<T> up = trilinear_resize(g, target);
  const T f = static_cast<T>(factor);
  for (T& v : up.data) v *= f;
  FlowT<T> out(target);
  out.data = std::move(up.data);
  return out;
}

template <typename T>
void upsample_flow_backward(const FlowT<T>& g_out, Shape3 coarse_shape,
                            int factor, FlowT<T>& g_in) {
  Grid<T> g(3, g_out.shape);
  g.data = g_out.data;
  const T f = static_cast<T>(factor);
  for (T& v : g.data) v *= f;
  Grid<T> acc(3, coarse_shape);
  trilinear_resize_backward(g, coarse_shape, acc);
  for (std::size_t i = 0; i < acc.data.size(); ++i) g_in.data[i] += acc.data[i];
}

// ---------------------------------------------------------------------------
// Jacobian of the transform p -> p + u(p): central differences in the
// interior, one-sided on the faces. Returns det per voxel.

template <typename T>
Grid<T> jacobian_det_map(const FlowT<T>& flow) {
  const int D = flow.shape.d, H = flow.shape.h, W = flow.shape.w;
  if (D < 2 || H < 2 || W < 2)
    throw std::invalid_argument("jacobian_det_map: all dims must be >= 2");
  Grid<T> out(1, flow.shape);

  auto diff = [](const T* f, std::size_t idx, int i, int n,
                 std::size_t stride) -> T {
    if (i == 0) return f[idx + stride] - f[idx];
    if (i == n - 1) return f[idx] - f[idx - stride];
    return (f[idx + stride] - f[idx - stride]) / T(2);
  };

  const std::size_t sx = 1, sy = W, sz = static_cast<std::size_t>(H) * W;
#pragma omp parallel for schedule(static)
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p =
            (static_cast<std::size_t>(z) * H + y) * W + x;
        T J[3][3];
        for (int c = 0; c < 3; ++c) {
          const T* f = flow.comp(c);
          J[c][0] = diff(f, p, x, W, sx);
          J[c][1] = diff(f, p, y, H, sy);
          J[c][2] = diff(f, p, z, D, sz);
        }
        J[0][0] += T(1);
        J[1][1] += T(1);
        J[2][2] += T(1);
        out.data[p] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                      J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                      J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
      }
  return out;
}

template <typename T>
std::size_t count_nonpositive_jacobian(const FlowT<T>& flow) {
  Grid<T> det = jacobian_det_map(flow);
  std::size_t n = 0;
  for (const T& v : det.data)
    if (v <= T(0)) ++n;
  return n;
}

}  // namespace ncam
