#include "kernels_common.hpp"

#include <string>

namespace convprobe {

std::size_t conv_out_len(std::size_t t_in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("conv1d: stride must be positive");
  if (t_in + 2 * pad < k) {
    throw DimensionError("conv1d: kernel width " + std::to_string(k) +
                         " exceeds padded input length " + std::to_string(t_in + 2 * pad));
  }
  return (t_in + 2 * pad - k) / stride + 1;
}

std::size_t conv_transposed_out_len(std::size_t t_in, std::size_t k, std::size_t stride,
                                    std::size_t pad) {
  if (t_in == 0) throw DimensionError("conv1d_transposed: empty input");
  const std::size_t full = (t_in - 1) * stride + k;
  if (full < 2 * pad) throw DimensionError("conv1d_transposed: padding exceeds output");
  return full - 2 * pad;
}

std::vector<int> draw_shifts(std::size_t batch, int n, std::mt19937_64& rng) {
  std::vector<int> shifts(batch, 0);
  if (n <= 0) return shifts;
  std::uniform_int_distribution<int> dist(-n, n);
  for (auto& s : shifts) s = dist(rng);
  return shifts;
}

namespace detail {

std::size_t check_conv(std::size_t x_channels, std::size_t t_in, std::size_t w_out,
                       std::size_t w_in, std::size_t k, std::size_t bias_size,
                       std::size_t stride, std::size_t pad) {
  if (x_channels != w_in) {
    throw DimensionError("conv1d: input has " + std::to_string(x_channels) +
                         " channels, weights expect " + std::to_string(w_in));
  }
  if (bias_size != 0 && bias_size != w_out) {
    throw DimensionError("conv1d: bias length " + std::to_string(bias_size) +
                         " does not match " + std::to_string(w_out) + " output channels");
  }
  return conv_out_len(t_in, k, stride, pad);
}

void check_conv_grad(std::size_t gy_channels, std::size_t gy_time, std::size_t w_out,
                     std::size_t k, std::size_t stride, std::size_t pad, std::size_t t_in) {
  if (gy_channels != w_out) {
    throw DimensionError("conv1d backward: gradient has " + std::to_string(gy_channels) +
                         " channels, weights produce " + std::to_string(w_out));
  }
  if (conv_out_len(t_in, k, stride, pad) != gy_time) {
    throw DimensionError("conv1d backward: input length " + std::to_string(t_in) +
                         " inconsistent with output length " + std::to_string(gy_time));
  }
}

void check_shifts(std::size_t batch, std::size_t time, std::span<const int> shifts) {
  if (shifts.size() != batch) {
    throw DimensionError("phase_shuffle: expected " + std::to_string(batch) + " shifts, got " +
                         std::to_string(shifts.size()));
  }
  for (int s : shifts) {
    const std::size_t mag = static_cast<std::size_t>(s < 0 ? -s : s);
    if (mag >= time) throw DimensionError("phase_shuffle: shift exceeds series length");
  }
}

void check_dense(std::size_t x_size, std::size_t batch, std::size_t w_size, std::size_t bias_size,
                 std::size_t out) {
  if (batch == 0 || out == 0 || x_size % batch != 0) {
    throw DimensionError("dense: input size not divisible by batch");
  }
  const std::size_t in = x_size / batch;
  if (w_size != out * in) {
    throw DimensionError("dense: weight size " + std::to_string(w_size) + " != " +
                         std::to_string(out) + " x " + std::to_string(in));
  }
  if (bias_size != 0 && bias_size != out) throw DimensionError("dense: bias length mismatch");
}

}  // namespace detail
}  // namespace convprobe
