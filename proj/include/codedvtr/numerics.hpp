#pragma once

#include <span>
#include <vector>

namespace cvtr {

// Max-subtracted softmax of v / temperature.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);
// Same contract, in place; no validation (kernel use).
void softmax_inplace(std::span<double> v);

// -sum p ln p in nats with 0 ln 0 = 0.
double entropy(std::span<const double> p);

}  // namespace cvtr
