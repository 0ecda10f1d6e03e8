#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace futcr::testing {

struct GradCheck {
  int coordinates = 0;
  int agreeing = 0;
  double worst_rel = 0.0;

  double fraction() const { return coordinates == 0 ? 1.0 : static_cast<double>(agreeing) / coordinates; }
  void merge(const GradCheck& o) {
    coordinates += o.coordinates;
    agreeing += o.agreeing;
    worst_rel = std::max(worst_rel, o.worst_rel);
  }
};

// Central differences on the listed coordinates of x. A coordinate agrees when
// the relative error is within rtol, or both values sit below the absolute
// floor where double rounding of the difference quotient dominates.
inline GradCheck check_gradient(std::vector<double>& x, std::span<const double> analytic,
                                const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<std::size_t>& coords, double h = 1e-4, double rtol = 1e-4,
                                double floor = 1e-8) {
  GradCheck r;
  for (std::size_t i : coords) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    const double err = std::abs(a - numeric);
    ++r.coordinates;
    if (scale < floor || err <= rtol * scale) {
      ++r.agreeing;
    } else {
      r.worst_rel = std::max(r.worst_rel, err / scale);
    }
  }
  return r;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

}  // namespace futcr::testing
