#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cadenza {

// Dense row-major matrix of doubles. Used for parameters, activations and
// feature sequences (frames x channels).
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Mat row_vector(std::span<const double> values) {
    Mat m(1, values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m.data[i] = values[i];
    return m;
  }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool same_shape(const Mat& o) const noexcept { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Mat&, const Mat&) = default;
};

}  // namespace cadenza
