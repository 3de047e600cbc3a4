#pragma once

// Training objective: image similarity (MSE or local NCC), flow smoothness,
// optional soft-Dice overlap. Scalar reductions accumulate in double with a
// fixed serial voxel order.

#include <cmath>
#include <stdexcept>
#include <string>

#include "ncamorph/flow.hpp"
#include "ncamorph/grid.hpp"

namespace ncam {

enum class Similarity { mse, ncc };

struct LossWeights {
  Similarity similarity = Similarity::mse;
  double lambda_smooth = 0.01;  // convention: 0.01 with MSE, 1.0 with NCC
  double lambda_seg = 1.0;
  int ncc_window = 9;
  double epsilon = 1e-5;          // guard for NCC and soft Dice
  double aux_coarse_weight = 0.0; // optional coarse-level similarity term

  void validate() const {
    if (lambda_smooth < 0 || lambda_seg < 0 || aux_coarse_weight < 0)
      throw std::invalid_argument("LossWeights: weights must be >= 0");
    if (ncc_window <= 0 || ncc_window % 2 == 0)
      throw std::invalid_argument("LossWeights: ncc_window must be odd");
  }
};

// ---------------------------------------------------------------------------
// mse_loss

template <typename T>
double mse_loss(const Grid<T>& a, const Grid<T>& b) {
  if (!a.same_layout(b)) throw std::invalid_argument("mse_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// d/da = scale * 2 (a - b) / N, d/db the negative.
template <typename T>
void mse_loss_backward(const Grid<T>& a, const Grid<T>& b, double scale,
                       Grid<T>* g_a, Grid<T>* g_b) {
  const double k = 2.0 * scale / static_cast<double>(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = k * (static_cast<double>(a.data[i]) - b.data[i]);
    if (g_a) g_a->data[i] += static_cast<T>(d);
    if (g_b) g_b->data[i] -= static_cast<T>(d);
  }
}

// ---------------------------------------------------------------------------
// Separable box sums with zero padding (window = 2r+1), used by NCC and SSIM.
// One line per task; running-sum order is part of the definition.

namespace detail {

inline void box_sum_axis(std::vector<double>& buf, Shape3 s, int axis, int r) {
  const int dims[3] = {s.d, s.h, s.w};
  const std::size_t strides[3] = {static_cast<std::size_t>(s.h) * s.w,
                                  static_cast<std::size_t>(s.w), 1};
  const int n = dims[axis];
  const std::size_t stride = strides[axis];
  // iterate over all lines along `axis`
  const int oa = (axis == 0) ? 1 : 0;
  const int ob = (axis == 2) ? 1 : 2;
  const int na = dims[oa], nb = dims[ob];
  const std::size_t sa = strides[oa], sb = strides[ob];
#pragma omp parallel for collapse(2) schedule(static)
  for (int ia = 0; ia < na; ++ia)
    for (int ib = 0; ib < nb; ++ib) {
      const std::size_t base = ia * sa + ib * sb;
      std::vector<double> line(n);
      double run = 0.0;
      for (int i = 0; i < std::min(r, n); ++i) run += buf[base + i * stride];
      for (int i = 0; i < n; ++i) {
        if (i + r < n) run += buf[base + (i + r) * stride];
        line[i] = run;
        if (i - r >= 0) run -= buf[base + (i - r) * stride];
      }
      for (int i = 0; i < n; ++i) buf[base + i * stride] = line[i];
    }
}

inline void box_sum(std::vector<double>& buf, Shape3 s, int window) {
  const int r = window / 2;
  box_sum_axis(buf, s, 2, r);
  box_sum_axis(buf, s, 1, r);
  box_sum_axis(buf, s, 0, r);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ncc_loss: 1 - mean over voxels of cross^2 / (var_a * var_b + eps) with
// window statistics from zero-padded box sums (constant window volume).

namespace detail {

struct NccStats {
  Shape3 shape;
  std::vector<double> n;  // in-bounds voxels per window
  std::vector<double> s1, s2, s11, s22, s12;  // zero-padded box sums
  std::vector<double> cross, va, vb;
};

// Window statistics normalize by the in-bounds sample count, so border
// windows carry true local covariance/variance and affine intensity maps
// leave the correlation untouched.
template <typename T>
NccStats ncc_stats(const Grid<T>& a, const Grid<T>& b, int window) {
  NccStats st;
  st.shape = a.shape;
  const std::size_t N = a.voxels();
  st.n.assign(N, 1.0);
  box_sum(st.n, st.shape, window);
  st.s1.resize(N);
  st.s2.resize(N);
  st.s11.resize(N);
  st.s22.resize(N);
  st.s12.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double x = a.data[i], y = b.data[i];
    st.s1[i] = x;
    st.s2[i] = y;
    st.s11[i] = x * x;
    st.s22[i] = y * y;
    st.s12[i] = x * y;
  }
  box_sum(st.s1, st.shape, window);
  box_sum(st.s2, st.shape, window);
  box_sum(st.s11, st.shape, window);
  box_sum(st.s22, st.shape, window);
  box_sum(st.s12, st.shape, window);
  st.cross.resize(N);
  st.va.resize(N);
  st.vb.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    st.cross[i] = st.s12[i] - st.s1[i] * st.s2[i] / st.n[i];
    st.va[i] = st.s11[i] - st.s1[i] * st.s1[i] / st.n[i];
    st.vb[i] = st.s22[i] - st.s2[i] * st.s2[i] / st.n[i];
  }
  return st;
}

}  // namespace detail

template <typename T>
double ncc_loss(const Grid<T>& a, const Grid<T>& b, int window,
                double eps = 1e-5) {
  if (!a.same_layout(b)) throw std::invalid_argument("ncc_loss: shape mismatch");
  if (a.channels != 1)
    throw std::invalid_argument("ncc_loss: expects single-channel grids");
  if (window <= 0 || window % 2 == 0)
    throw std::invalid_argument("ncc_loss: window must be odd");
  auto st = detail::ncc_stats(a, b, window);
  const std::size_t N = a.voxels();
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i)
    acc += st.cross[i] * st.cross[i] / (st.va[i] * st.vb[i] + eps);
  return 1.0 - acc / static_cast<double>(N);
}

template <typename T>
void ncc_loss_backward(const Grid<T>& a, const Grid<T>& b, int window,
                       double eps, double scale, Grid<T>* g_a, Grid<T>* g_b) {
  auto st = detail::ncc_stats(a, b, window);
  const std::size_t N = a.voxels();
  const double m = -scale / static_cast<double>(N);  // d loss / d cc_p
  std::vector<double> d1(N), d2(N), d11(N), d22(N), d12(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double inv_n = 1.0 / st.n[i];
    const double denom = st.va[i] * st.vb[i] + eps;
    const double A = m * 2.0 * st.cross[i] / denom;               // d/d cross
    const double c2 = st.cross[i] * st.cross[i] / (denom * denom);
    const double B = -m * c2 * st.vb[i];                          // d/d va
    const double C = -m * c2 * st.va[i];                          // d/d vb
    d12[i] = A;
    d11[i] = B;
    d22[i] = C;
    d1[i] = -A * st.s2[i] * inv_n - 2.0 * B * st.s1[i] * inv_n;
    d2[i] = -A * st.s1[i] * inv_n - 2.0 * C * st.s2[i] * inv_n;
  }
  // adjoint of a zero-padded box sum is the same box sum
  detail::box_sum(d1, st.shape, window);
  detail::box_sum(d2, st.shape, window);
  detail::box_sum(d11, st.shape, window);
  detail::box_sum(d22, st.shape, window);
  detail::box_sum(d12, st.shape, window);
  for (std::size_t i = 0; i < N; ++i) {
    const double x = a.data[i], y = b.data[i];
    if (g_a)
      g_a->data[i] += static_cast<T>(d1[i] + 2.0 * x * d11[i] + y * d12[i]);
    if (g_b)
      g_b->data[i] += static_cast<T>(d2[i] + 2.0 * y * d22[i] + x * d12[i]);
  }
}

// ---------------------------------------------------------------------------
// smoothness_loss: mean over components of the summed per-axis mean squared
// forward difference (last slice per axis excluded from each count).

template <typename T>
double smoothness_loss(const FlowT<T>& flow) {
  const int D = flow.shape.d, H = flow.shape.h, W = flow.shape.w;
  if (D < 2 || H < 2 || W < 2)
    throw std::invalid_argument("smoothness_loss: all dims must be >= 2");
  const std::size_t sx = 1, sy = W, sz = static_cast<std::size_t>(H) * W;
  const double nx = static_cast<double>(D) * H * (W - 1);
  const double ny = static_cast<double>(D) * (H - 1) * W;
  const double nz = static_cast<double>(D - 1) * H * W;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const T* f = flow.comp(c);
    double ax = 0.0, ay = 0.0, az = 0.0;
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t p =
              (static_cast<std::size_t>(z) * H + y) * W + x;
          if (x + 1 < W) {
            const double d = static_cast<double>(f[p + sx]) - f[p];
            ax += d * d;
          }
          if (y + 1 < H) {
            const double d = static_cast<double>(f[p + sy]) - f[p];
            ay += d * d;
          }
          if (z + 1 < D) {
            const double d = static_cast<double>(f[p + sz]) - f[p];
            az += d * d;
          }
        }
    total += ax / nx + ay / ny + az / nz;
  }
  return total / 3.0;
}

template <typename T>
void smoothness_loss_backward(const FlowT<T>& flow, double scale,
                              FlowT<T>& g_flow) {
  const int D = flow.shape.d, H = flow.shape.h, W = flow.shape.w;
  const std::size_t sx = 1, sy = W, sz = static_cast<std::size_t>(H) * W;
  const double kx = 2.0 * scale / (3.0 * static_cast<double>(D) * H * (W - 1));
  const double ky = 2.0 * scale / (3.0 * static_cast<double>(D) * (H - 1) * W);
  const double kz = 2.0 * scale / (3.0 * static_cast<double>(D - 1) * H * W);
  for (int c = 0; c < 3; ++c) {
    const T* f = flow.comp(c);
    T* g = g_flow.comp(c);
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t p =
              (static_cast<std::size_t>(z) * H + y) * W + x;
          if (x + 1 < W) {
            const double d = kx * (static_cast<double>(f[p + sx]) - f[p]);
            g[p + sx] += static_cast<T>(d);
            g[p] -= static_cast<T>(d);
          }
          if (y + 1 < H) {
            const double d = ky * (static_cast<double>(f[p + sy]) - f[p]);
            g[p + sy] += static_cast<T>(d);
            g[p] -= static_cast<T>(d);
          }
          if (z + 1 < D) {
            const double d = kz * (static_cast<double>(f[p + sz]) - f[p]);
            g[p + sz] += static_cast<T>(d);
            g[p] -= static_cast<T>(d);
          }
        }
  }
}

// ---------------------------------------------------------------------------
// soft_dice_loss over one-hot grids; channel 0 (background) excluded from
// the label mean. Labels absent from both volumes score 1 through the eps
// guard and contribute no gradient.

template <typename T>
double soft_dice_loss(const Grid<T>& p, const Grid<T>& q, double eps = 1e-5) {
  if (!p.same_layout(q))
    throw std::invalid_argument("soft_dice_loss: shape mismatch");
  if (p.channels < 2)
    throw std::invalid_argument("soft_dice_loss: need background + labels");
  const std::size_t N = p.voxels();
  double mean = 0.0;
  for (int c = 1; c < p.channels; ++c) {
    const T* pp = p.plane(c);
    const T* qq = q.plane(c);
    double inter = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      inter += static_cast<double>(pp[i]) * qq[i];
      sum += static_cast<double>(pp[i]) + qq[i];
    }
    mean += (2.0 * inter + eps) / (sum + eps);
  }
  return 1.0 - mean / (p.channels - 1);
}

template <typename T>
void soft_dice_loss_backward(const Grid<T>& p, const Grid<T>& q, double eps,
                             double scale, Grid<T>* g_p, Grid<T>* g_q) {
  const std::size_t N = p.voxels();
  const double k = -scale / (p.channels - 1);
  for (int c = 1; c < p.channels; ++c) {
    const T* pp = p.plane(c);
    const T* qq = q.plane(c);
    double inter = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      inter += static_cast<double>(pp[i]) * qq[i];
      sum += static_cast<double>(pp[i]) + qq[i];
    }
    const double num = 2.0 * inter + eps;
    const double den = sum + eps;
    const double inv_den = 1.0 / den;
    const double num_den2 = num * inv_den * inv_den;
    if (g_p) {
      T* gp = g_p->plane(c);
      for (std::size_t i = 0; i < N; ++i)
        gp[i] += static_cast<T>(k * (2.0 * qq[i] * inv_den - num_den2));
    }
    if (g_q) {
      T* gq = g_q->plane(c);
      for (std::size_t i = 0; i < N; ++i)
        gq[i] += static_cast<T>(k * (2.0 * pp[i] * inv_den - num_den2));
    }
  }
}

// ---------------------------------------------------------------------------
// total_loss: L_sim(fixed, warp(moving, flow)) + lambda_smooth * L_smooth
//             [+ lambda_seg * L_dice(fixed_onehot, warp(moving_onehot, flow))]

struct LossParts {
  double total = 0.0;
  double sim = 0.0;
  double smooth = 0.0;
  double seg = 0.0;
};

template <typename T>
LossParts total_loss(const Grid<T>& fixed, const Grid<T>& moving,
                     const FlowT<T>& flow, const Grid<T>* fixed_onehot,
                     const Grid<T>* moving_onehot, const LossWeights& w) {
  LossParts parts;
  Grid<T> warped = warp_trilinear(moving, flow);
  parts.sim = (w.similarity == Similarity::mse)
                  ? mse_loss(fixed, warped)
                  : ncc_loss(fixed, warped, w.ncc_window, w.epsilon);
  parts.smooth = smoothness_loss(flow);
  parts.total = parts.sim + w.lambda_smooth * parts.smooth;
  if (fixed_onehot && moving_onehot && w.lambda_seg > 0) {
    Grid<T> warped_seg = warp_trilinear(*moving_onehot, flow);
    parts.seg = soft_dice_loss(warped_seg, *fixed_onehot, w.epsilon);
    parts.total += w.lambda_seg * parts.seg;
  }
  return parts;
}

// Accumulates d total / d flow into g_flow.
template <typename T>
LossParts total_loss_backward(const Grid<T>& fixed, const Grid<T>& moving,
                              const FlowT<T>& flow,
                              const Grid<T>* fixed_onehot,
                              const Grid<T>* moving_onehot,
                              const LossWeights& w, FlowT<T>& g_flow) {
  LossParts parts;
  Grid<T> warped = warp_trilinear(moving, flow);
  Grid<T> g_warped(warped.channels, warped.shape);
  if (w.similarity == Similarity::mse) {
    parts.sim = mse_loss(fixed, warped);
    mse_loss_backward(fixed, warped, 1.0, static_cast<Grid<T>*>(nullptr),
                      &g_warped);
  } else {
    parts.sim = ncc_loss(fixed, warped, w.ncc_window, w.epsilon);
    ncc_loss_backward(fixed, warped, w.ncc_window, w.epsilon, 1.0,
                      static_cast<Grid<T>*>(nullptr), &g_warped);
  }
  warp_trilinear_backward(moving, flow, g_warped,
                          static_cast<Grid<T>*>(nullptr), &g_flow);

  parts.smooth = smoothness_loss(flow);
  smoothness_loss_backward(flow, w.lambda_smooth, g_flow);

  parts.total = parts.sim + w.lambda_smooth * parts.smooth;
  if (fixed_onehot && moving_onehot && w.lambda_seg > 0) {
    Grid<T> warped_seg = warp_trilinear(*moving_onehot, flow);
    parts.seg = soft_dice_loss(warped_seg, *fixed_onehot, w.epsilon);
    Grid<T> g_warped_seg(warped_seg.channels, warped_seg.shape);
    soft_dice_loss_backward(warped_seg, *fixed_onehot, w.epsilon, w.lambda_seg,
                            &g_warped_seg, static_cast<Grid<T>*>(nullptr));
    warp_trilinear_backward(*moving_onehot, flow, g_warped_seg,
                            static_cast<Grid<T>*>(nullptr), &g_flow);
    parts.total += w.lambda_seg * parts.seg;
  }
  return parts;
}

// One-hot encoding of a label map (all labels, background in channel 0).
template <typename T>
Grid<T> one_hot(const LabelMap& labels) {
  if (labels.num_labels < 1)
    throw std::invalid_argument("one_hot: num_labels must be >= 1");
  Grid<T> out(labels.num_labels, labels.shape);
  const std::size_t N = labels.shape.voxels();
  for (std::size_t i = 0; i < N; ++i) {
    const std::int32_t l = labels.data[i];
    if (l < 0 || l >= labels.num_labels)
      throw std::invalid_argument("one_hot: label out of range");
    out.data[static_cast<std::size_t>(l) * N + i] = T(1);
  }
  return out;
}

}  // namespace ncam
