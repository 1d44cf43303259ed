#pragma once

#include <cstddef>
#include <exception>

namespace safepred {

/// OpenMP loop over [0, n) that carries the first exception out of the region.
template <class Body>
void parallel_for(std::ptrdiff_t n, Body&& body) {
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(safepred_parallel_for)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace safepred

#include <algorithm>
#include <span>
#include <vector>

namespace safepred {

/// Sums body(i, grad_chunk) over [0, n) into `out`. Items are grouped into
/// fixed chunks of `chunk` with one buffer each; buffers are reduced in chunk
/// order, so the result is identical for any thread count. Returns the sum of
/// body's return values, reduced the same way.
template <class Body>
double chunked_sum(std::size_t n, std::size_t chunk, std::span<double> out, Body&& body) {
  const std::size_t width = out.size();
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<double> buffers(chunks * width, 0.0);
  std::vector<double> partial(chunks, 0.0);
  parallel_for(static_cast<std::ptrdiff_t>(chunks), [&](std::ptrdiff_t c) {
    const auto cu = static_cast<std::size_t>(c);
    std::span<double> g(buffers.data() + cu * width, width);
    const std::size_t end = std::min(n, (cu + 1) * chunk);
    for (std::size_t i = cu * chunk; i < end; ++i) partial[cu] += body(i, g);
  });
  std::fill(out.begin(), out.end(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const double* g = buffers.data() + c * width;
    for (std::size_t p = 0; p < width; ++p) out[p] += g[p];
    total += partial[c];
  }
  return total;
}

}  // namespace safepred
