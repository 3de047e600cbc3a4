#include "ncamorph/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ncamorph/loss.hpp"

namespace ncam {

DiceResult dice_score(const LabelMap& a, const LabelMap& b) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("dice_score: shape mismatch");
  const int L = std::max(a.num_labels, b.num_labels);
  std::vector<std::size_t> na(L, 0), nb(L, 0), ni(L, 0);
  const std::size_t N = a.shape.voxels();
  for (std::size_t i = 0; i < N; ++i) {
    const std::int32_t la = a.data[i], lb = b.data[i];
    if (la < 0 || la >= L || lb < 0 || lb >= L)
      throw std::invalid_argument("dice_score: label out of range");
    ++na[la];
    ++nb[lb];
    if (la == lb) ++ni[la];
  }
  DiceResult res;
  double acc = 0.0;
  for (int l = 1; l < L; ++l) {
    if (na[l] == 0 && nb[l] == 0) continue;  // absent from both: excluded
    const double d = 2.0 * static_cast<double>(ni[l]) /
                     static_cast<double>(na[l] + nb[l]);
    res.labels.push_back(l);
    res.per_label.push_back(d);
    acc += d;
  }
  res.mean = res.labels.empty() ? 1.0 : acc / res.labels.size();
  return res;
}

double ssim3d(const Grid<float>& a, const Grid<float>& b,
              const SsimParams& p) {
  if (!a.same_layout(b)) throw std::invalid_argument("ssim3d: shape mismatch");
  if (a.channels != 1)
    throw std::invalid_argument("ssim3d: expects single-channel grids");
  const int D = a.shape.d, H = a.shape.h, W = a.shape.w;
  const int win = p.window, r = win / 2;
  if (D < win || H < win || W < win)
    throw std::invalid_argument("ssim3d: volume smaller than window");

  double lo = a.data[0], hi = a.data[0];
  for (const float v : a.data) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  for (const float v : b.data) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  const double range = hi - lo;
  if (range == 0.0) return 1.0;  // both constant and equal
  const double c1 = (p.k1 * range) * (p.k1 * range);
  const double c2 = (p.k2 * range) * (p.k2 * range);

  const std::size_t N = a.voxels();
  std::vector<double> sa(N), sb(N), saa(N), sbb(N), sab(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double x = a.data[i], y = b.data[i];
    sa[i] = x;
    sb[i] = y;
    saa[i] = x * x;
    sbb[i] = y * y;
    sab[i] = x * y;
  }
  detail::box_sum(sa, a.shape, win);
  detail::box_sum(sb, a.shape, win);
  detail::box_sum(saa, a.shape, win);
  detail::box_sum(sbb, a.shape, win);
  detail::box_sum(sab, a.shape, win);

  const double n = static_cast<double>(win) * win * win;
  const double unb = n / (n - 1.0);  // unbiased window statistics
  double acc = 0.0;
  std::size_t count = 0;
  for (int z = r; z < D - r; ++z)
    for (int y = r; y < H - r; ++y)
      for (int x = r; x < W - r; ++x) {
        const std::size_t i =
            (static_cast<std::size_t>(z) * H + y) * W + x;
        const double ma = sa[i] / n, mb = sb[i] / n;
        const double va = (saa[i] / n - ma * ma) * unb;
        const double vb = (sbb[i] / n - mb * mb) * unb;
        const double cov = (sab[i] / n - ma * mb) * unb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return acc / static_cast<double>(count);
}

MetricsReport evaluate_pair(const Grid<float>& fixed_img,
                            const LabelMap* fixed_seg,
                            const Grid<float>& moving_img,
                            const LabelMap* moving_seg,
                            const FlowField& flow) {
  MetricsReport rep;
  Grid<float> warped = warp_trilinear(moving_img, flow);
  rep.ssim = ssim3d(fixed_img, warped);
  rep.neg_jacobian_count = count_nonpositive_jacobian(flow);
  if (fixed_seg && moving_seg) {
    LabelMap warped_seg = warp_nearest(*moving_seg, flow);
    DiceResult d = dice_score(*fixed_seg, warped_seg);
    rep.dice_labels = std::move(d.labels);
    rep.dice_per_label = std::move(d.per_label);
    rep.dice_mean = d.mean;
  }
  return rep;
}

}  // namespace ncam
