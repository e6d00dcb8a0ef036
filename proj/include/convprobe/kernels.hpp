#pragma once

// Differentiable 1D kernels used by the Generator, Discriminator and Q-network.
//
// Two implementations share one interface:
//   convprobe::kernels    - im2col + GEMM, parallelized over the batch with OpenMP
//   convprobe::reference  - direct serial loops, kept as the test oracle
//
// Conv weights have shape (C_out, C_in, K). Transposed convolutions reuse the
// same array so that conv1d_transposed(., w) is the adjoint of conv1d(., w):
// their weight shape reads (C_in_T, C_out_T, K).

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "convprobe/tensor.hpp"

namespace convprobe {

// floor((t_in + 2 pad - k) / stride) + 1; throws DimensionError if the window
// does not fit.
std::size_t conv_out_len(std::size_t t_in, std::size_t k, std::size_t stride, std::size_t pad);

// Natural output length of a transposed convolution before output padding.
std::size_t conv_transposed_out_len(std::size_t t_in, std::size_t k, std::size_t stride,
                                    std::size_t pad);

// One shift per batch item, uniform on {-n, ..., n}.
std::vector<int> draw_shifts(std::size_t batch, int n, std::mt19937_64& rng);

#define CONVPROBE_KERNEL_DECLS                                                                  \
  template <typename T>                                                                         \
  BasicTensor3<T> conv1d(const BasicTensor3<T>& x, const BasicTensor3<T>& w,                     \
                         std::span<const T> bias, std::size_t stride, std::size_t pad);         \
  /* Adjoint of conv1d in x: maps dL/dy to dL/dx of length t_in. */                             \
  template <typename T>                                                                         \
  BasicTensor3<T> conv1d_input_grad(const BasicTensor3<T>& gy, const BasicTensor3<T>& w,         \
                                    std::size_t stride, std::size_t pad, std::size_t t_in);     \
  /* Accumulates dL/dw into gw (shape of w). */                                                 \
  template <typename T>                                                                         \
  void conv1d_weight_grad(const BasicTensor3<T>& x, const BasicTensor3<T>& gy,                   \
                          std::size_t stride, std::size_t pad, BasicTensor3<T>& gw);            \
  /* Accumulates the per-channel sum of gy into gb. */                                          \
  template <typename T>                                                                         \
  void bias_grad(const BasicTensor3<T>& gy, std::span<T> gb);                                   \
  template <typename T>                                                                         \
  BasicTensor3<T> conv1d_transposed(const BasicTensor3<T>& x, const BasicTensor3<T>& w,          \
                                    std::span<const T> bias, std::size_t stride,                \
                                    std::size_t pad, std::size_t output_padding = 0);           \
  template <typename T>                                                                         \
  BasicTensor3<T> leaky_relu(const BasicTensor3<T>& x, T slope);                                \
  /* gy scaled by the activation slope at each pre-activation value. */                         \
  template <typename T>                                                                         \
  BasicTensor3<T> leaky_relu_grad(const BasicTensor3<T>& pre, const BasicTensor3<T>& gy,         \
                                  T slope);                                                     \
  template <typename T>                                                                         \
  BasicTensor3<T> phase_shuffle(const BasicTensor3<T>& x, std::span<const int> shifts);         \
  template <typename T>                                                                         \
  BasicTensor3<T> phase_shuffle_adjoint(const BasicTensor3<T>& gy,                              \
                                        std::span<const int> shifts);                           \
  /* y[b, o] = sum_i w[o, i] x[b, i] + bias[o]; x is (batch, in) row-major. */                 \
  template <typename T>                                                                         \
  std::vector<T> dense(std::span<const T> x, std::size_t batch, std::span<const T> w,           \
                       std::span<const T> bias, std::size_t out);                               \
  template <typename T>                                                                         \
  std::vector<T> dense_input_grad(std::span<const T> gy, std::size_t batch,                     \
                                  std::span<const T> w, std::size_t out, std::size_t in);       \
  template <typename T>                                                                         \
  void dense_weight_grad(std::span<const T> x, std::span<const T> gy, std::size_t batch,        \
                         std::size_t out, std::size_t in, std::span<T> gw, std::span<T> gb);

namespace kernels {
CONVPROBE_KERNEL_DECLS
}  // namespace kernels

namespace reference {
CONVPROBE_KERNEL_DECLS
}  // namespace reference

#undef CONVPROBE_KERNEL_DECLS

}  // namespace convprobe
