#pragma once

#include <cmath>

namespace oracle {

template <class H>
double frailty_integral(H h, double r, int points) {
  const double a = 1.0 / r;
  const double lo = -40.0;
  const double hi = std::log(80.0);
  const double step = (hi - lo) / points;
  const double log_norm = a * std::log(a) - std::lgamma(a);
  double sum = 0.0;
  for (int k = 0; k <= points; ++k) {
    const double s = lo + k * step;
    const double z = std::exp(s);
    // f(z) dz = a^a / Gamma(a) z^(a-1) e^(-a z) z ds
    const double f = std::exp(log_norm + a * s - a * z);
    const double w = (k == 0 || k == points) ? 0.5 : 1.0;
    sum += w * f * h(z);
  }
  return sum * step;
}

}  // namespace oracle
