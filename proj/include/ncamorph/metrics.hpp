#pragma once

// Evaluation-only measures: multi-label Dice, 3D SSIM over uniform windows,
// non-positive Jacobian count, wrapped into a per-pair report.

#include <cstddef>
#include <vector>

#include "ncamorph/flow.hpp"
#include "ncamorph/grid.hpp"

namespace ncam {

struct DiceResult {
  std::vector<int> labels;       // counted labels (>= 1, present somewhere)
  std::vector<double> per_label;
  double mean = 0.0;
};

// 2|A∩B| / (|A|+|B|) per label >= 1; labels absent from both inputs are
// excluded from the mean. All-background agreement scores 1.
DiceResult dice_score(const LabelMap& a, const LabelMap& b);

struct SsimParams {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Uniform-window SSIM with unbiased window statistics, averaged over fully
// interior window positions. Dynamic range taken jointly from both inputs.
double ssim3d(const Grid<float>& a, const Grid<float>& b,
              const SsimParams& params = {});

struct MetricsReport {
  std::vector<int> dice_labels;
  std::vector<double> dice_per_label;
  double dice_mean = 0.0;
  double ssim = 0.0;
  std::size_t neg_jacobian_count = 0;
  double inference_seconds = 0.0;
  std::size_t params = 0;
};

// Warps the moving image (trilinear) and segmentation (nearest) by the flow,
// then scores against the fixed pair.
MetricsReport evaluate_pair(const Grid<float>& fixed_img,
                            const LabelMap* fixed_seg,
                            const Grid<float>& moving_img,
                            const LabelMap* moving_seg, const FlowField& flow);

}  // namespace ncam
