// Serial direct-loop kernels. Slow; used as the oracle for the GEMM kernels
// and as the baseline in the benchmark.

#include "kernels_common.hpp"

namespace convprobe::reference {

template <typename T>
BasicTensor3<T> conv1d(const BasicTensor3<T>& x, const BasicTensor3<T>& w,
                       std::span<const T> bias, std::size_t stride, std::size_t pad) {
  const std::size_t t_out = detail::check_conv(x.channels(), x.time(), w.batch(), w.channels(),
                                               w.time(), bias.size(), stride, pad);
  const long t_in = static_cast<long>(x.time());
  BasicTensor3<T> y(x.batch(), w.batch(), t_out);
  for (std::size_t b = 0; b < x.batch(); ++b) {
    for (std::size_t o = 0; o < w.batch(); ++o) {
      for (std::size_t t = 0; t < t_out; ++t) {
        T acc = bias.empty() ? T(0) : bias[o];
        for (std::size_t i = 0; i < w.channels(); ++i) {
          for (std::size_t k = 0; k < w.time(); ++k) {
            const long src = static_cast<long>(t * stride + k) - static_cast<long>(pad);
            if (src >= 0 && src < t_in) acc += w(o, i, k) * x(b, i, static_cast<std::size_t>(src));
          }
        }
        y(b, o, t) = acc;
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> conv1d_input_grad(const BasicTensor3<T>& gy, const BasicTensor3<T>& w,
                                  std::size_t stride, std::size_t pad, std::size_t t_in) {
  detail::check_conv_grad(gy.channels(), gy.time(), w.batch(), w.time(), stride, pad, t_in);
  BasicTensor3<T> gx(gy.batch(), w.channels(), t_in);
  for (std::size_t b = 0; b < gy.batch(); ++b) {
    for (std::size_t o = 0; o < w.batch(); ++o) {
      for (std::size_t t = 0; t < gy.time(); ++t) {
        for (std::size_t i = 0; i < w.channels(); ++i) {
          for (std::size_t k = 0; k < w.time(); ++k) {
            const long src = static_cast<long>(t * stride + k) - static_cast<long>(pad);
            if (src >= 0 && src < static_cast<long>(t_in)) {
              gx(b, i, static_cast<std::size_t>(src)) += w(o, i, k) * gy(b, o, t);
            }
          }
        }
      }
    }
  }
  return gx;
}

template <typename T>
void conv1d_weight_grad(const BasicTensor3<T>& x, const BasicTensor3<T>& gy, std::size_t stride,
                        std::size_t pad, BasicTensor3<T>& gw) {
  if (x.channels() != gw.channels() || x.batch() != gy.batch()) {
    throw DimensionError("conv1d_weight_grad: shape mismatch");
  }
  detail::check_conv_grad(gy.channels(), gy.time(), gw.batch(), gw.time(), stride, pad, x.time());
  for (std::size_t o = 0; o < gw.batch(); ++o) {
    for (std::size_t i = 0; i < gw.channels(); ++i) {
      for (std::size_t k = 0; k < gw.time(); ++k) {
        T acc = 0;
        for (std::size_t b = 0; b < x.batch(); ++b) {
          for (std::size_t t = 0; t < gy.time(); ++t) {
            const long src = static_cast<long>(t * stride + k) - static_cast<long>(pad);
            if (src >= 0 && src < static_cast<long>(x.time())) {
              acc += gy(b, o, t) * x(b, i, static_cast<std::size_t>(src));
            }
          }
        }
        gw(o, i, k) += acc;
      }
    }
  }
}

template <typename T>
void bias_grad(const BasicTensor3<T>& gy, std::span<T> gb) {
  if (gb.size() != gy.channels()) throw DimensionError("bias_grad: length mismatch");
  for (std::size_t b = 0; b < gy.batch(); ++b) {
    for (std::size_t c = 0; c < gy.channels(); ++c) {
      for (T v : gy.row(b, c)) gb[c] += v;
    }
  }
}

template <typename T>
BasicTensor3<T> conv1d_transposed(const BasicTensor3<T>& x, const BasicTensor3<T>& w,
                                  std::span<const T> bias, std::size_t stride, std::size_t pad,
                                  std::size_t output_padding) {
  if (x.channels() != w.batch()) {
    throw DimensionError("conv1d_transposed: input has " + std::to_string(x.channels()) +
                         " channels, weights expect " + std::to_string(w.batch()));
  }
  if (!bias.empty() && bias.size() != w.channels()) {
    throw DimensionError("conv1d_transposed: bias length mismatch");
  }
  const std::size_t t_out =
      conv_transposed_out_len(x.time(), w.time(), stride, pad) + output_padding;
  BasicTensor3<T> y = conv1d_input_grad(x, w, stride, pad, t_out);
  if (!bias.empty()) {
    for (std::size_t b = 0; b < y.batch(); ++b) {
      for (std::size_t c = 0; c < y.channels(); ++c) {
        for (T& v : y.row(b, c)) v += bias[c];
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> leaky_relu(const BasicTensor3<T>& x, T slope) {
  BasicTensor3<T> y = x;
  for (T& v : y.flat()) {
    if (v < T(0)) v *= slope;
  }
  return y;
}

template <typename T>
BasicTensor3<T> leaky_relu_grad(const BasicTensor3<T>& pre, const BasicTensor3<T>& gy, T slope) {
  if (!pre.same_shape(gy)) throw DimensionError("leaky_relu_grad: shape mismatch");
  BasicTensor3<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    if (pre.flat()[i] < T(0)) gx.flat()[i] *= slope;
  }
  return gx;
}

template <typename T>
BasicTensor3<T> phase_shuffle(const BasicTensor3<T>& x, std::span<const int> shifts) {
  detail::check_shifts(x.batch(), x.time(), shifts);
  BasicTensor3<T> y(x.batch(), x.channels(), x.time());
  for (std::size_t b = 0; b < x.batch(); ++b) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      for (std::size_t t = 0; t < x.time(); ++t) {
        y(b, c, t) = x(b, c, detail::reflect(static_cast<long>(t) - shifts[b], x.time()));
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> phase_shuffle_adjoint(const BasicTensor3<T>& gy, std::span<const int> shifts) {
  detail::check_shifts(gy.batch(), gy.time(), shifts);
  BasicTensor3<T> gx(gy.batch(), gy.channels(), gy.time());
  for (std::size_t b = 0; b < gy.batch(); ++b) {
    for (std::size_t c = 0; c < gy.channels(); ++c) {
      for (std::size_t t = 0; t < gy.time(); ++t) {
        gx(b, c, detail::reflect(static_cast<long>(t) - shifts[b], gy.time())) += gy(b, c, t);
      }
    }
  }
  return gx;
}

template <typename T>
std::vector<T> dense(std::span<const T> x, std::size_t batch, std::span<const T> w,
                     std::span<const T> bias, std::size_t out) {
  detail::check_dense(x.size(), batch, w.size(), bias.size(), out);
  const std::size_t in = x.size() / batch;
  std::vector<T> y(batch * out);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      T acc = bias.empty() ? T(0) : bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[b * in + i];
      y[b * out + o] = acc;
    }
  }
  return y;
}

template <typename T>
std::vector<T> dense_input_grad(std::span<const T> gy, std::size_t batch, std::span<const T> w,
                                std::size_t out, std::size_t in) {
  if (gy.size() != batch * out || w.size() != out * in) {
    throw DimensionError("dense_input_grad: shape mismatch");
  }
  std::vector<T> gx(batch * in, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      for (std::size_t i = 0; i < in; ++i) gx[b * in + i] += w[o * in + i] * gy[b * out + o];
    }
  }
  return gx;
}

template <typename T>
void dense_weight_grad(std::span<const T> x, std::span<const T> gy, std::size_t batch,
                       std::size_t out, std::size_t in, std::span<T> gw, std::span<T> gb) {
  if (x.size() != batch * in || gy.size() != batch * out || gw.size() != out * in) {
    throw DimensionError("dense_weight_grad: shape mismatch");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += gy[b * out + o] * x[b * in + i];
      if (!gb.empty()) gb[o] += gy[b * out + o];
    }
  }
}

CONVPROBE_INSTANTIATE(float)
CONVPROBE_INSTANTIATE(double)

}  // namespace convprobe::reference
