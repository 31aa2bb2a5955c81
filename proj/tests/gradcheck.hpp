#pragma once

#include <cmath>
#include <functional>
#include <vector>

// Central-difference gradient checking. The primary window is h = 1e-4; when
// a relu kink or hinge boundary happens to sit inside +/-h the quadratic fd
// model is invalid for that coordinate, so the window shrinks (1e-5, 1e-6)
// until it is kink-free. A wrong analytic gradient fails at every width,
// since fd converges to the true derivative.
namespace gradcheck {

inline double rel_err(double a, double b) {
  // The floor keeps fd round-off on near-zero components from dominating.
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-2});
}

inline bool fd_matches(std::vector<double>& x, std::size_t i,
                       const std::function<double()>& f, double analytic,
                       double* got = nullptr, double rel_tol = 1e-5) {
  for (double h : {1e-4, 1e-5, 1e-6}) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    const double fd = (fp - fm) / (2.0 * h);
    if (got) *got = fd;
    if (rel_err(fd, analytic) <= rel_tol) return true;
  }
  return false;
}

}  // namespace gradcheck
