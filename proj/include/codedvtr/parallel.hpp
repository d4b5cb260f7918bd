#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cvtr::par {

// Work is always split into chunks of this many items, independent of the
// thread count. Per-chunk partial sums are merged in a fixed tree order, so
// reductions are bit-identical for any number of threads.
inline constexpr std::size_t kChunk = 64;

void set_threads(int n);
int threads();

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

// Runs body(i) for i in [0, n). Iterations must write disjoint memory.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
}

// Sums `chunks` equally sized partial buffers into `out` (+=) using a fixed
// pairwise tree. `partials` holds chunks * out.size() values and is clobbered.
void tree_reduce_add(std::vector<double>& partials, std::size_t chunks, std::span<double> out);

// Chunked accumulation helper: body(chunk, begin, end, partial) fills the
// chunk's zero-initialised partial buffer of `width` doubles; the buffers are
// then tree-reduced into `out`.
template <class Body>
void chunked_accumulate(std::size_t n, std::span<double> out, Body&& body) {
  const std::size_t width = out.size();
  const std::size_t chunks = chunk_count(n);
  if (chunks == 0 || width == 0) return;
  std::vector<double> partials(chunks * width, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t end = begin + kChunk < n ? begin + kChunk : n;
    body(c, begin, end, std::span<double>(partials.data() + c * width, width));
  });
  tree_reduce_add(partials, chunks, out);
}

}  // namespace cvtr::par
