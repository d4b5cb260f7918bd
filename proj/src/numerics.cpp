#include "codedvtr/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "codedvtr/error.hpp"

namespace cvtr {

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double peak = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double& x : v) {
    x = std::exp(x - peak);
    total += x;
  }
  for (double& x : v) x /= total;
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax: temperature must be > 0");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) {
    if (!std::isfinite(x)) throw NumericalError("softmax: non-finite input");
    x /= temperature;
  }
  softmax_inplace(out);
  return out;
}

double entropy(std::span<const double> p) {
  double total = 0.0;
  for (double x : p) {
    if (x < 0.0) throw ValidationError("entropy: negative probability");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ValidationError("entropy: probabilities sum to " + std::to_string(total));
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

}  // namespace cvtr
