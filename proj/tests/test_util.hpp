#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "convprobe/tensor.hpp"

namespace testutil {

template <typename T>
convprobe::BasicTensor3<T> random_tensor(std::size_t b, std::size_t c, std::size_t t,
                                         std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  convprobe::BasicTensor3<T> x(b, c, t);
  for (T& v : x.flat()) v = static_cast<T>(dist(rng));
  return x;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

// Central difference of f with respect to v[i], restoring v[i] afterwards.
template <typename T>
double central_difference(std::span<T> v, std::size_t i, const std::function<double()>& f,
                          double eps = 1e-4) {
  const T saved = v[i];
  v[i] = static_cast<T>(saved + eps);
  const double up = f();
  v[i] = static_cast<T>(saved - eps);
  const double down = f();
  v[i] = saved;
  return (up - down) / (2 * eps);
}

}  // namespace testutil
