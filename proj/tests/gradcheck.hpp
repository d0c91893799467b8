#ifndef CECSIM_TESTS_GRADCHECK_HPP_
#define CECSIM_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cecsim/tensorlite.hpp"

namespace testsupport {

struct GradCheck {
  double rel_error = 0.0;   // ||analytic - numeric|| / (||analytic|| + ||numeric||)
  double max_abs_diff = 0.0;
  double analytic_norm = 0.0;
};

// `analytic` must fill ps gradients (after zeroing) for the current values;
// `loss` evaluates the scalar objective without touching gradients.
inline GradCheck finite_difference(cecsim::tl::ParamSet& ps, const std::function<void()>& analytic,
                                   const std::function<double()>& loss, double h = 1e-5) {
  ps.zero_grad();
  analytic();
  const auto g = ps.flat_grads();
  auto x = ps.flat_values();
  std::vector<double> num(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    ps.set_flat_values(x);
    const double fp = loss();
    x[i] = keep - h;
    ps.set_flat_values(x);
    const double fm = loss();
    x[i] = keep;
    num[i] = (fp - fm) / (2.0 * h);
  }
  ps.set_flat_values(x);
  double diff = 0.0, na = 0.0, nn = 0.0;
  GradCheck r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += (g[i] - num[i]) * (g[i] - num[i]);
    na += g[i] * g[i];
    nn += num[i] * num[i];
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(g[i] - num[i]));
  }
  r.analytic_norm = std::sqrt(na);
  const double denom = std::sqrt(na) + std::sqrt(nn);
  r.rel_error = denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
  return r;
}

}  // namespace testsupport

#endif  // CECSIM_TESTS_GRADCHECK_HPP_
