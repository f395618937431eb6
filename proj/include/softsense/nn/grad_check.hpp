#pragma once

// Central finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace softsense::nn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  [[nodiscard]] double max_rel_error() const {
    double e = 0.0;
    for (const auto& x : entries) e = std::max(e, x.max_rel_error);
    return e;
  }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero up
/// to round-off from producing spurious relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckTarget {
  std::string name;
  std::span<double> values;           // perturbed in place and restored
  std::span<const double> analytic;   // gradient of loss w.r.t. values
};

/// Compares each analytic gradient against (L(x + eps) - L(x - eps)) / 2eps.
inline GradCheckReport grad_check(const std::function<double()>& loss, const std::vector<GradCheckTarget>& targets,
                                  double eps = 1e-5) {
  GradCheckReport report;
  for (const GradCheckTarget& target : targets) {
    GradCheckEntry entry{target.name, 0.0, 0};
    for (std::size_t i = 0; i < target.values.size(); ++i) {
      const double saved = target.values[i];
      target.values[i] = saved + eps;
      const double up = loss();
      target.values[i] = saved - eps;
      const double down = loss();
      target.values[i] = saved;
      const double err = relative_error(target.analytic[i], (up - down) / (2.0 * eps));
      if (err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace softsense::nn
