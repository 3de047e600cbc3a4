#pragma once

// Differentiable grid primitives. Every forward op has an explicit adjoint
// that accumulates (+=) into caller-owned gradient buffers shaped like the
// objects they differentiate. Parallel loops are partitioned by output
// element, so results are bitwise identical for any thread count.

#include <algorithm>
#include <span>
#include <stdexcept>

#include "ncamorph/grid.hpp"

namespace ncam {

template <typename T>
struct ConvKernel3 {
  int out_c = 0, in_c = 0, k = 0;
  std::vector<T> w;  // [out_c][in_c][k][k][k]
  std::vector<T> b;  // [out_c]

  ConvKernel3() = default;
  ConvKernel3(int out_c_, int in_c_, int k_)
      : out_c(out_c_), in_c(in_c_), k(k_) {
    if (k_ <= 0 || k_ % 2 == 0)
      throw std::invalid_argument("ConvKernel3: kernel side must be odd");
    if (out_c_ <= 0 || in_c_ <= 0)
      throw std::invalid_argument("ConvKernel3: channel counts must be positive");
    w.assign(static_cast<std::size_t>(out_c_) * in_c_ * k_ * k_ * k_, T(0));
    b.assign(out_c_, T(0));
  }

  std::size_t widx(int oc, int ic, int kz, int ky, int kx) const {
    return (((static_cast<std::size_t>(oc) * in_c + ic) * k + kz) * k + ky) *
               k +
           kx;
  }

  template <typename U>
  ConvKernel3<U> cast() const {
    ConvKernel3<U> out;
    out.out_c = out_c;
    out.in_c = in_c;
    out.k = k;
    out.w.resize(w.size());
    out.b.resize(b.size());
    for (std::size_t i = 0; i < w.size(); ++i) out.w[i] = static_cast<U>(w[i]);
    for (std::size_t i = 0; i < b.size(); ++i) out.b[i] = static_cast<U>(b[i]);
    return out;
  }
};

template <typename T>
struct DenseLayer {
  int out_dim = 0, in_dim = 0;
  std::vector<T> w;  // [out_dim][in_dim], row-major
  std::vector<T> b;  // [out_dim]

  DenseLayer() = default;
  DenseLayer(int out_dim_, int in_dim_) : out_dim(out_dim_), in_dim(in_dim_) {
    if (out_dim_ <= 0 || in_dim_ <= 0)
      throw std::invalid_argument("DenseLayer: dimensions must be positive");
    w.assign(static_cast<std::size_t>(out_dim_) * in_dim_, T(0));
    b.assign(out_dim_, T(0));
  }

  template <typename U>
  DenseLayer<U> cast() const {
    DenseLayer<U> out;
    out.out_dim = out_dim;
    out.in_dim = in_dim;
    out.w.resize(w.size());
    out.b.resize(b.size());
    for (std::size_t i = 0; i < w.size(); ++i) out.w[i] = static_cast<U>(w[i]);
    for (std::size_t i = 0; i < b.size(); ++i) out.b[i] = static_cast<U>(b[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// conv3d: same zero padding, output spatial shape equals input shape.

template <typename T>
Grid<T> conv3d(const Grid<T>& in, const ConvKernel3<T>& ker) {
  if (ker.in_c != in.channels)
    throw std::invalid_argument("conv3d: kernel expects " +
                                std::to_string(ker.in_c) + " channels, got " +
                                std::to_string(in.channels));
  const int D = in.shape.d, H = in.shape.h, W = in.shape.w;
  const int r = ker.k / 2, K = ker.k;
  Grid<T> out(ker.out_c, in.shape);

  // x runs innermost over independent accumulators so the hot loop
  // vectorizes without reassociating any reduction.
#pragma omp parallel for collapse(2) schedule(static)
  for (int oc = 0; oc < ker.out_c; ++oc)
    for (int z = 0; z < D; ++z) {
      std::vector<T> acc(W);
      const int kz0 = std::max(0, r - z), kz1 = std::min(K, D + r - z);
      for (int y = 0; y < H; ++y) {
        std::fill(acc.begin(), acc.end(), ker.b[oc]);
        const int ky0 = std::max(0, r - y), ky1 = std::min(K, H + r - y);
        for (int ic = 0; ic < ker.in_c; ++ic)
          for (int kz = kz0; kz < kz1; ++kz)
            for (int ky = ky0; ky < ky1; ++ky) {
              const T* row = in.plane(ic) +
                             (static_cast<std::size_t>(z + kz - r) * H +
                              (y + ky - r)) *
                                 W;
              const T* wr = ker.w.data() + ker.widx(oc, ic, kz, ky, 0);
              for (int kx = 0; kx < K; ++kx) {
                const T wv = wr[kx];
                const int x0 = std::max(0, r - kx);
                const int x1 = std::min(W, W + r - kx);
                const T* src = row + (kx - r);
                for (int x = x0; x < x1; ++x) acc[x] += wv * src[x];
              }
            }
        T* dst = out.plane(oc) + (static_cast<std::size_t>(z) * H + y) * W;
        std::copy(acc.begin(), acc.end(), dst);
      }
    }
  return out;
}

// Adjoint. Any of g_in / g_ker may be null to skip that gradient.
template <typename T>
void conv3d_backward(const Grid<T>& in, const ConvKernel3<T>& ker,
                     const Grid<T>& g_out, Grid<T>* g_in,
                     ConvKernel3<T>* g_ker) {
  if (ker.in_c != in.channels || g_out.channels != ker.out_c ||
      !(g_out.shape == in.shape))
    throw std::invalid_argument("conv3d_backward: shape mismatch");
  const int D = in.shape.d, H = in.shape.h, W = in.shape.w;
  const int r = ker.k / 2, K = ker.k;

  if (g_in) {
    if (!g_in->same_layout(in))
      throw std::invalid_argument("conv3d_backward: bad input-grad layout");
    // g_in(q) = sum_{oc,u} g_out(q + r - u) * w[oc][ic][u]
#pragma omp parallel for collapse(2) schedule(static)
    for (int ic = 0; ic < ker.in_c; ++ic)
      for (int z = 0; z < D; ++z) {
        const int kz0 = std::max(0, z + r - (D - 1)),
                  kz1 = std::min(K, z + r + 1);
        for (int y = 0; y < H; ++y) {
          const int ky0 = std::max(0, y + r - (H - 1)),
                    ky1 = std::min(K, y + r + 1);
          T* dst = g_in->plane(ic) +
                   (static_cast<std::size_t>(z) * H + y) * W;
          for (int oc = 0; oc < ker.out_c; ++oc)
            for (int kz = kz0; kz < kz1; ++kz)
              for (int ky = ky0; ky < ky1; ++ky) {
                const T* row = g_out.plane(oc) +
                               (static_cast<std::size_t>(z + r - kz) * H +
                                (y + r - ky)) *
                                   W;
                const T* wr = ker.w.data() + ker.widx(oc, ic, kz, ky, 0);
                for (int kx = 0; kx < K; ++kx) {
                  const T wv = wr[kx];
                  const int x0 = std::max(0, kx - r);
                  const int x1 = std::min(W, W + kx - r);
                  const T* src = row + (r - kx);
                  for (int x = x0; x < x1; ++x) dst[x] += wv * src[x];
                }
              }
        }
      }
  }

  if (g_ker) {
    if (g_ker->out_c != ker.out_c || g_ker->in_c != ker.in_c ||
        g_ker->k != ker.k)
      throw std::invalid_argument("conv3d_backward: bad kernel-grad layout");
    // One (oc, ic) pair per task; inner voxel loop stays serial so the
    // accumulation order is fixed.
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < ker.out_c; ++oc)
      for (int ic = 0; ic < ker.in_c; ++ic)
        for (int kz = 0; kz < K; ++kz)
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              T acc = T(0);
              const int z0 = std::max(0, r - kz), z1 = std::min(D, D + r - kz);
              const int y0 = std::max(0, r - ky), y1 = std::min(H, H + r - ky);
              const int x0 = std::max(0, r - kx), x1 = std::min(W, W + r - kx);
              for (int z = z0; z < z1; ++z)
                for (int y = y0; y < y1; ++y) {
                  const T* go = g_out.plane(oc) +
                                (static_cast<std::size_t>(z) * H + y) * W;
                  const T* iv = in.plane(ic) +
                                (static_cast<std::size_t>(z + kz - r) * H +
                                 (y + ky - r)) *
                                    W;
                  for (int x = x0; x < x1; ++x)
                    acc += go[x] * iv[x + kx - r];
                }
              g_ker->w[ker.widx(oc, ic, kz, ky, kx)] += acc;
            }
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < ker.out_c; ++oc) {
      T acc = T(0);
      const T* go = g_out.plane(oc);
      const std::size_t n = g_out.voxels();
      for (std::size_t i = 0; i < n; ++i) acc += go[i];
      g_ker->b[oc] += acc;
    }
  }
}

// ---------------------------------------------------------------------------
// dense: out[i] = sum_j W[i][j] in[j] + b[i]

template <typename T>
std::vector<T> dense(std::span<const T> in, const DenseLayer<T>& L) {
  if (static_cast<int>(in.size()) != L.in_dim)
    throw std::invalid_argument("dense: expected input length " +
                                std::to_string(L.in_dim));
  std::vector<T> out(L.out_dim);
  for (int i = 0; i < L.out_dim; ++i) {
    T acc = L.b[i];
    const T* wr = L.w.data() + static_cast<std::size_t>(i) * L.in_dim;
    for (int j = 0; j < L.in_dim; ++j) acc += wr[j] * in[j];
    out[i] = acc;
  }
  return out;
}

template <typename T>
void dense_backward(std::span<const T> in, const DenseLayer<T>& L,
                    std::span<const T> g_out, std::span<T> g_in,
                    DenseLayer<T>* g_L) {
  if (static_cast<int>(in.size()) != L.in_dim ||
      static_cast<int>(g_out.size()) != L.out_dim)
    throw std::invalid_argument("dense_backward: dimension mismatch");
  if (!g_in.empty()) {
    if (static_cast<int>(g_in.size()) != L.in_dim)
      throw std::invalid_argument("dense_backward: bad input-grad size");
    for (int i = 0; i < L.out_dim; ++i) {
      const T* wr = L.w.data() + static_cast<std::size_t>(i) * L.in_dim;
      for (int j = 0; j < L.in_dim; ++j) g_in[j] += wr[j] * g_out[i];
    }
  }
  if (g_L) {
    for (int i = 0; i < L.out_dim; ++i) {
      T* gw = g_L->w.data() + static_cast<std::size_t>(i) * L.in_dim;
      for (int j = 0; j < L.in_dim; ++j) gw[j] += g_out[i] * in[j];
      g_L->b[i] += g_out[i];
    }
  }
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Grid<T> relu(const Grid<T>& in) {
  Grid<T> out = in;
  for (T& v : out.data) v = std::max(v, T(0));
  return out;
}

// Subgradient at 0 is 0: gradient passes only where in > 0.
template <typename T>
void relu_backward(const Grid<T>& in, const Grid<T>& g_out, Grid<T>& g_in) {
  if (!in.same_layout(g_out) || !in.same_layout(g_in))
    throw std::invalid_argument("relu_backward: layout mismatch");
  for (std::size_t i = 0; i < in.data.size(); ++i)
    if (in.data[i] > T(0)) g_in.data[i] += g_out.data[i];
}

// ---------------------------------------------------------------------------
// avg_downsample: factor^3 block mean; every spatial dim must divide.

template <typename T>
Grid<T> avg_downsample(const Grid<T>& in, int factor) {
  if (factor <= 0) throw std::invalid_argument("avg_downsample: factor <= 0");
  if (in.shape.d % factor || in.shape.h % factor || in.shape.w % factor)
    throw std::invalid_argument("avg_downsample: shape " + in.shape.str() +
                                " not divisible by " + std::to_string(factor));
  const Shape3 os{in.shape.d / factor, in.shape.h / factor,
                  in.shape.w / factor};
  Grid<T> out(in.channels, os);
  // Block sums accumulate in double so a constant block yields exactly the
  // constant back.
  const double n = static_cast<double>(factor) * factor * factor;
#pragma omp parallel for collapse(2) schedule(static)
  for (int c = 0; c < in.channels; ++c)
    for (int z = 0; z < os.d; ++z)
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x) {
          double acc = 0.0;
          for (int dz = 0; dz < factor; ++dz)
            for (int dy = 0; dy < factor; ++dy) {
              const T* row = in.plane(c) +
                             (static_cast<std::size_t>(z * factor + dz) *
                                  in.shape.h +
                              (y * factor + dy)) *
                                 in.shape.w;
              for (int dx = 0; dx < factor; ++dx)
                acc += row[x * factor + dx];
            }
          out.at(c, z, y, x) = static_cast<T>(acc / n);
        }
  return out;
}

template <typename T>
void avg_downsample_backward(const Grid<T>& g_out, int factor,
                             Grid<T>& g_in) {
  const T inv = T(1) / static_cast<T>(factor * factor * factor);
#pragma omp parallel for collapse(2) schedule(static)
  for (int c = 0; c < g_out.channels; ++c)
    for (int z = 0; z < g_out.shape.d; ++z)
      for (int y = 0; y < g_out.shape.h; ++y)
        for (int x = 0; x < g_out.shape.w; ++x) {
          const T g = g_out.at(c, z, y, x) * inv;
          for (int dz = 0; dz < factor; ++dz)
            for (int dy = 0; dy < factor; ++dy)
              for (int dx = 0; dx < factor; ++dx)
                g_in.at(c, z * factor + dz, y * factor + dy, x * factor + dx) +=
                    g;
        }
}

// ---------------------------------------------------------------------------
// trilinear_resize, align-corners=false:
//   src = (dst + 0.5) * (in_size / out_size) - 0.5, clamped to [0, in_size-1].

struct ResizeTap {
  int i0 = 0, i1 = 0;
  double t = 0.0;  // src - i0, in [0, 1]
};

inline std::vector<ResizeTap> resize_taps(int in_size, int out_size) {
  std::vector<ResizeTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    double s = (i + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_size - 1));
    int i0 = static_cast<int>(s);
    if (i0 > in_size - 1) i0 = in_size - 1;
    taps[i].i0 = i0;
    taps[i].i1 = std::min(i0 + 1, in_size - 1);
    taps[i].t = s - i0;
  }
  return taps;
}

template <typename T>
inline T lerp1(T a, T b, T t) {
  return a + t * (b - a);
}

template <typename T>
Grid<T> trilinear_resize(const Grid<T>& in, Shape3 target) {
  if (target.d < 1 || target.h < 1 || target.w < 1)
    throw std::invalid_argument("trilinear_resize: target dims must be >= 1");
  const auto tz = resize_taps(in.shape.d, target.d);
  const auto ty = resize_taps(in.shape.h, target.h);
  const auto tx = resize_taps(in.shape.w, target.w);
  Grid<T> out(in.channels, target);
#pragma omp parallel for collapse(2) schedule(static)
  for (int c = 0; c < in.channels; ++c)
    for (int z = 0; z < target.d; ++z)
      for (int y = 0; y < target.h; ++y)
        for (int x = 0; x < target.w; ++x) {
          const auto& az = tz[z];
          const auto& ay = ty[y];
          const auto& ax = tx[x];
          // Nested lerps keep identity resizes and constant grids exact.
          auto sample = [&](int zz, int yy) {
            return lerp1(in.at(c, zz, yy, ax.i0), in.at(c, zz, yy, ax.i1),
                         static_cast<T>(ax.t));
          };
          T c00 = sample(az.i0, ay.i0), c01 = sample(az.i0, ay.i1);
          T c10 = sample(az.i1, ay.i0), c11 = sample(az.i1, ay.i1);
          T c0 = lerp1(c00, c01, static_cast<T>(ay.t));
          T c1 = lerp1(c10, c11, static_cast<T>(ay.t));
          out.at(c, z, y, x) = lerp1(c0, c1, static_cast<T>(az.t));
        }
  return out;
}

// Scatter adjoint with the same taps. Channels are independent; within a
// channel the scatter runs serially, so accumulation order is fixed.
template <typename T>
void trilinear_resize_backward(const Grid<T>& g_out, Shape3 in_shape,
                               Grid<T>& g_in) {
  const auto tz = resize_taps(in_shape.d, g_out.shape.d);
  const auto ty = resize_taps(in_shape.h, g_out.shape.h);
  const auto tx = resize_taps(in_shape.w, g_out.shape.w);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g_out.channels; ++c)
    for (int z = 0; z < g_out.shape.d; ++z)
      for (int y = 0; y < g_out.shape.h; ++y)
        for (int x = 0; x < g_out.shape.w; ++x) {
          const auto& az = tz[z];
          const auto& ay = ty[y];
          const auto& ax = tx[x];
          const T g = g_out.at(c, z, y, x);
          const T wz1 = static_cast<T>(az.t), wz0 = T(1) - wz1;
          const T wy1 = static_cast<T>(ay.t), wy0 = T(1) - wy1;
          const T wx1 = static_cast<T>(ax.t), wx0 = T(1) - wx1;
          g_in.at(c, az.i0, ay.i0, ax.i0) += g * wz0 * wy0 * wx0;
          g_in.at(c, az.i0, ay.i0, ax.i1) += g * wz0 * wy0 * wx1;
          g_in.at(c, az.i0, ay.i1, ax.i0) += g * wz0 * wy1 * wx0;
          g_in.at(c, az.i0, ay.i1, ax.i1) += g * wz0 * wy1 * wx1;
          g_in.at(c, az.i1, ay.i0, ax.i0) += g * wz1 * wy0 * wx0;
          g_in.at(c, az.i1, ay.i0, ax.i1) += g * wz1 * wy0 * wx1;
          g_in.at(c, az.i1, ay.i1, ax.i0) += g * wz1 * wy1 * wx0;
          g_in.at(c, az.i1, ay.i1, ax.i1) += g * wz1 * wy1 * wx1;
        }
}

// ---------------------------------------------------------------------------
// concat_channels / crop_patch

template <typename T>
Grid<T> concat_channels(const Grid<T>& a, const Grid<T>& b) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("concat_channels: spatial shapes differ");
  Grid<T> out(a.channels + b.channels, a.shape);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

template <typename T>
void concat_channels_backward(const Grid<T>& g_out, Grid<T>& g_a,
                              Grid<T>& g_b) {
  const std::size_t na = g_a.data.size();
  for (std::size_t i = 0; i < na; ++i) g_a.data[i] += g_out.data[i];
  for (std::size_t i = 0; i < g_b.data.size(); ++i)
    g_b.data[i] += g_out.data[na + i];
}

struct PatchBox {
  int z = 0, y = 0, x = 0;
  Shape3 size;
};

template <typename T>
Grid<T> crop_patch(const Grid<T>& in, const PatchBox& box) {
  if (box.z < 0 || box.y < 0 || box.x < 0 || box.size.d < 1 ||
      box.size.h < 1 || box.size.w < 1 || box.z + box.size.d > in.shape.d ||
      box.y + box.size.h > in.shape.h || box.x + box.size.w > in.shape.w)
    throw std::invalid_argument("crop_patch: patch outside input");
  Grid<T> out(in.channels, box.size);
  for (int c = 0; c < in.channels; ++c)
    for (int z = 0; z < box.size.d; ++z)
      for (int y = 0; y < box.size.h; ++y) {
        const T* src = in.plane(c) +
                       (static_cast<std::size_t>(box.z + z) * in.shape.h +
                        (box.y + y)) *
                           in.shape.w +
                       box.x;
        std::copy(src, src + box.size.w,
                  out.plane(c) +
                      (static_cast<std::size_t>(z) * box.size.h + y) *
                          box.size.w);
      }
  return out;
}

template <typename T>
void crop_patch_backward(const Grid<T>& g_out, const PatchBox& box,
                         Grid<T>& g_in) {
  for (int c = 0; c < g_out.channels; ++c)
    for (int z = 0; z < box.size.d; ++z)
      for (int y = 0; y < box.size.h; ++y) {
        const T* src = g_out.plane(c) +
                       (static_cast<std::size_t>(z) * box.size.h + y) *
                           box.size.w;
        T* dst = g_in.plane(c) +
                 (static_cast<std::size_t>(box.z + z) * g_in.shape.h +
                  (box.y + y)) *
                     g_in.shape.w +
                 box.x;
        for (int x = 0; x < box.size.w; ++x) dst[x] += src[x];
      }
}

}  // namespace ncam
