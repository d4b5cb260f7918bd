#include "codedvtr/matrix.hpp"

#include "codedvtr/error.hpp"
#include "codedvtr/parallel.hpp"

namespace cvtr::linalg {

Matrix matmul(const Matrix& x, std::span<const double> w, std::size_t out,
              std::span<const double> bias) {
  if (w.size() != x.cols * out) throw StructuralError("matmul: weight shape mismatch");
  if (!bias.empty() && bias.size() != out) throw StructuralError("matmul: bias shape mismatch");
  Matrix y(x.rows, out);
  const std::size_t in = x.cols;
  par::parallel_for(x.rows, [&](std::size_t r) {
    double* yr = y.data.data() + r * out;
    const double* xr = x.data.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) yr[o] = bias.empty() ? 0.0 : bias[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = w.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  });
  return y;
}

void accumulate_outer(const Matrix& x, const Matrix& dy, std::span<double> dw) {
  if (x.rows != dy.rows || dw.size() != x.cols * dy.cols)
    throw StructuralError("accumulate_outer: shape mismatch");
  const std::size_t in = x.cols;
  const std::size_t out = dy.cols;
  par::chunked_accumulate(x.rows, dw, [&](std::size_t, std::size_t b, std::size_t e, std::span<double> acc) {
    for (std::size_t r = b; r < e; ++r) {
      const double* xr = x.data.data() + r * in;
      const double* gr = dy.data.data() + r * out;
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        if (xi == 0.0) continue;
        double* ar = acc.data() + i * out;
        for (std::size_t o = 0; o < out; ++o) ar[o] += xi * gr[o];
      }
    }
  });
}

Matrix matmul_backward(const Matrix& x, const Matrix& dy, std::span<const double> w,
                       std::span<double> dw, std::span<double> dbias) {
  const std::size_t in = x.cols;
  const std::size_t out = dy.cols;
  if (w.size() != in * out) throw StructuralError("matmul_backward: weight shape mismatch");
  accumulate_outer(x, dy, dw);
  if (!dbias.empty()) {
    par::chunked_accumulate(dy.rows, dbias, [&](std::size_t, std::size_t b, std::size_t e, std::span<double> acc) {
      for (std::size_t r = b; r < e; ++r)
        for (std::size_t o = 0; o < out; ++o) acc[o] += dy(r, o);
    });
  }
  Matrix dx(x.rows, in);
  par::parallel_for(x.rows, [&](std::size_t r) {
    const double* gr = dy.data.data() + r * out;
    double* dr = dx.data.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double* wr = w.data() + i * out;
      double s = 0.0;
      for (std::size_t o = 0; o < out; ++o) s += wr[o] * gr[o];
      dr[i] = s;
    }
  });
  return dx;
}

}  // namespace cvtr::linalg
