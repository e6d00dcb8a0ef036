#pragma once

#include <cstddef>
#include <span>

#include "convprobe/kernels.hpp"

namespace convprobe::detail {

// Validates conv shapes; returns the output length.
std::size_t check_conv(std::size_t x_channels, std::size_t t_in, std::size_t w_out,
                       std::size_t w_in, std::size_t k, std::size_t bias_size,
                       std::size_t stride, std::size_t pad);
void check_conv_grad(std::size_t gy_channels, std::size_t gy_time, std::size_t w_out,
                     std::size_t k, std::size_t stride, std::size_t pad, std::size_t t_in);
void check_shifts(std::size_t batch, std::size_t time, std::span<const int> shifts);
void check_dense(std::size_t x_size, std::size_t batch, std::size_t w_size, std::size_t bias_size,
                 std::size_t out);

// Reflection index into [0, n): -1 -> 1, n -> n - 2.
inline std::size_t reflect(long i, std::size_t n) {
  const long last = static_cast<long>(n) - 1;
  if (last == 0) return 0;
  while (i < 0 || i > last) {
    if (i < 0) i = -i;
    if (i > last) i = 2 * last - i;
  }
  return static_cast<std::size_t>(i);
}

}  // namespace convprobe::detail

// Explicit instantiation list shared by both kernel implementations.
#define CONVPROBE_INSTANTIATE(T)                                                                 \
  template BasicTensor3<T> conv1d(const BasicTensor3<T>&, const BasicTensor3<T>&,                 \
                                  std::span<const T>, std::size_t, std::size_t);                 \
  template BasicTensor3<T> conv1d_input_grad(const BasicTensor3<T>&, const BasicTensor3<T>&,      \
                                             std::size_t, std::size_t, std::size_t);             \
  template void conv1d_weight_grad(const BasicTensor3<T>&, const BasicTensor3<T>&, std::size_t,   \
                                   std::size_t, BasicTensor3<T>&);                               \
  template void bias_grad(const BasicTensor3<T>&, std::span<T>);                                 \
  template BasicTensor3<T> conv1d_transposed(const BasicTensor3<T>&, const BasicTensor3<T>&,      \
                                             std::span<const T>, std::size_t, std::size_t,       \
                                             std::size_t);                                       \
  template BasicTensor3<T> leaky_relu(const BasicTensor3<T>&, T);                                \
  template BasicTensor3<T> leaky_relu_grad(const BasicTensor3<T>&, const BasicTensor3<T>&, T);   \
  template BasicTensor3<T> phase_shuffle(const BasicTensor3<T>&, std::span<const int>);          \
  template BasicTensor3<T> phase_shuffle_adjoint(const BasicTensor3<T>&, std::span<const int>);  \
  template std::vector<T> dense(std::span<const T>, std::size_t, std::span<const T>,             \
                                std::span<const T>, std::size_t);                                \
  template std::vector<T> dense_input_grad(std::span<const T>, std::size_t, std::span<const T>,  \
                                           std::size_t, std::size_t);                            \
  template void dense_weight_grad(std::span<const T>, std::span<const T>, std::size_t,           \
                                  std::size_t, std::size_t, std::span<T>, std::span<T>);
