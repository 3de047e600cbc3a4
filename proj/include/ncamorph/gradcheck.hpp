#pragma once

// Central-finite-difference verification of analytic adjoints. Check mode is
// double precision throughout; callers instantiate the ops with T = double.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ncamorph/rng.hpp"

namespace ncam {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares analytic_grad against a central difference of `objective` for
// every element of x (or a random subsample of at least min_samples for
// large buffers). Relative error uses max(|fd|, |analytic|) as the scale;
// pairs below `floor` count as matching.
inline GradCheckReport grad_check(std::span<double> x,
                                  std::span<const double> analytic_grad,
                                  const std::function<double()>& objective,
                                  double eps, double tolerance, Rng& rng,
                                  std::size_t min_samples = 200,
                                  double floor = 1e-9) {
  GradCheckReport rep;
  rep.tolerance = tolerance;
  std::vector<std::size_t> idx;
  if (x.size() <= min_samples) {
    idx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) idx[i] = i;
  } else {
    idx.reserve(min_samples);
    for (std::size_t i = 0; i < min_samples; ++i)
      idx.push_back(rng.below(x.size()));
  }
  for (std::size_t i : idx) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double fp = objective();
    x[i] = saved - eps;
    const double fm = objective();
    x[i] = saved;
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = analytic_grad[i];
    const double scale = std::max(std::abs(fd), std::abs(an));
    if (scale < floor) {
      ++rep.checked;
      continue;
    }
    const double rel = std::abs(fd - an) / scale;
    if (rel > rep.max_rel_err) rep.max_rel_err = rel;
    ++rep.checked;
  }
  rep.pass = rep.max_rel_err <= tolerance;
  return rep;
}

}  // namespace ncam
