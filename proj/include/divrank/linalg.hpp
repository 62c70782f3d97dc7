#pragma once

// Minimal dense linear algebra for the small networks in this project.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace divrank {

using Vec = std::vector<double>;

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;  // row-major

  static Mat zeros(int r, int c) {
    Mat m;
    m.rows = r;
    m.cols = c;
    m.a.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0);
    return m;
  }
  double& operator()(int r, int c) {
    return a[static_cast<std::size_t>(r) * cols + c];
  }
  double operator()(int r, int c) const {
    return a[static_cast<std::size_t>(r) * cols + c];
  }
};

inline Vec matvec(const Mat& m, const Vec& x) {
  if (static_cast<int>(x.size()) != m.cols)
    throw std::domain_error("matvec: dimension mismatch");
  Vec y(static_cast<std::size_t>(m.rows), 0.0);
  for (int r = 0; r < m.rows; ++r) {
    double s = 0.0;
    const double* row = &m.a[static_cast<std::size_t>(r) * m.cols];
    for (int c = 0; c < m.cols; ++c) s += row[c] * x[static_cast<std::size_t>(c)];
    y[static_cast<std::size_t>(r)] = s;
  }
  return y;
}

// W^T y
inline Vec mat_tvec(const Mat& m, const Vec& y) {
  if (static_cast<int>(y.size()) != m.rows)
    throw std::domain_error("mat_tvec: dimension mismatch");
  Vec x(static_cast<std::size_t>(m.cols), 0.0);
  for (int r = 0; r < m.rows; ++r) {
    const double yr = y[static_cast<std::size_t>(r)];
    const double* row = &m.a[static_cast<std::size_t>(r) * m.cols];
    for (int c = 0; c < m.cols; ++c) x[static_cast<std::size_t>(c)] += row[c] * yr;
  }
  return x;
}

// g += y x^T
inline void add_outer(Mat& g, const Vec& y, const Vec& x) {
  for (int r = 0; r < g.rows; ++r) {
    const double yr = y[static_cast<std::size_t>(r)];
    double* row = &g.a[static_cast<std::size_t>(r) * g.cols];
    for (int c = 0; c < g.cols; ++c) row[c] += yr * x[static_cast<std::size_t>(c)];
  }
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline Vec concat(const Vec& a, const Vec& b) {
  Vec out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace divrank
