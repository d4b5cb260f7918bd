#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cvtr {

// Dense row-major matrix of per-voxel feature rows.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

namespace linalg {

// y = x * w (+ bias), w stored in x.cols x out row-major. Parallel over rows.
Matrix matmul(const Matrix& x, std::span<const double> w, std::size_t out,
              std::span<const double> bias = {});

// Reverse of matmul: dw += x^T dy and dbias += colsum(dy) (fixed-order
// chunked reduction); returns dx = dy * w^T.
Matrix matmul_backward(const Matrix& x, const Matrix& dy, std::span<const double> w,
                       std::span<double> dw, std::span<double> dbias = {});

// dw += x^T dy without computing dx.
void accumulate_outer(const Matrix& x, const Matrix& dy, std::span<double> dw);

}  // namespace linalg
}  // namespace cvtr
