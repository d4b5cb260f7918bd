#include "codedvtr/parallel.hpp"

#ifdef CODEDVTR_HAVE_OPENMP
#include <omp.h>
#endif

namespace cvtr::par {

void set_threads(int n) {
#ifdef CODEDVTR_HAVE_OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int threads() {
#ifdef CODEDVTR_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void tree_reduce_add(std::vector<double>& partials, std::size_t chunks, std::span<double> out) {
  const std::size_t width = out.size();
  for (std::size_t step = 1; step < chunks; step *= 2) {
    for (std::size_t c = 0; c + step < chunks; c += 2 * step) {
      double* dst = partials.data() + c * width;
      const double* src = partials.data() + (c + step) * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  }
  for (std::size_t i = 0; i < width; ++i) out[i] += partials[i];
}

}  // namespace cvtr::par
