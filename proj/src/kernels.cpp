// im2col + GEMM kernels. The batch loop is split across OpenMP threads; every
// reduction over the batch (weight and bias gradients) runs as a single GEMM or
// a fixed-order loop so results do not depend on the thread count.

#include <Eigen/Dense>

#include "kernels_common.hpp"

namespace convprobe::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Writes the (C_in * K) x T_out patch matrix of batch item b into col, whose
// rows have leading dimension ld starting at column offset.
template <typename T>
void im2col(const BasicTensor3<T>& x, std::size_t b, std::size_t k_width, std::size_t stride,
            std::size_t pad, std::size_t t_out, T* col, std::size_t ld) {
  const long t_in = static_cast<long>(x.time());
  for (std::size_t i = 0; i < x.channels(); ++i) {
    const T* src = x.row(b, i).data();
    for (std::size_t k = 0; k < k_width; ++k) {
      T* dst = col + (i * k_width + k) * ld;
      const long base = static_cast<long>(k) - static_cast<long>(pad);
      for (std::size_t t = 0; t < t_out; ++t) {
        const long s = base + static_cast<long>(t * stride);
        dst[t] = (s >= 0 && s < t_in) ? src[s] : T(0);
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t ld, std::size_t k_width, std::size_t stride,
                std::size_t pad, std::size_t t_out, BasicTensor3<T>& gx, std::size_t b) {
  const long t_in = static_cast<long>(gx.time());
  for (std::size_t i = 0; i < gx.channels(); ++i) {
    T* dst = gx.row(b, i).data();
    for (std::size_t k = 0; k < k_width; ++k) {
      const T* src = col + (i * k_width + k) * ld;
      const long base = static_cast<long>(k) - static_cast<long>(pad);
      for (std::size_t t = 0; t < t_out; ++t) {
        const long s = base + static_cast<long>(t * stride);
        if (s >= 0 && s < t_in) dst[s] += src[t];
      }
    }
  }
}

long as_long(std::size_t v) { return static_cast<long>(v); }

}  // namespace

template <typename T>
BasicTensor3<T> conv1d(const BasicTensor3<T>& x, const BasicTensor3<T>& w,
                       std::span<const T> bias, std::size_t stride, std::size_t pad) {
  const std::size_t t_out = detail::check_conv(x.channels(), x.time(), w.batch(), w.channels(),
                                               w.time(), bias.size(), stride, pad);
  const std::size_t c_out = w.batch();
  const std::size_t rows = w.channels() * w.time();
  BasicTensor3<T> y(x.batch(), c_out, t_out);
  ConstMapMat<T> wm(w.data(), as_long(c_out), as_long(rows));
#pragma omp parallel
  {
    RowMat<T> col(as_long(rows), as_long(t_out));
#pragma omp for schedule(static)
    for (long b = 0; b < as_long(x.batch()); ++b) {
      im2col(x, static_cast<std::size_t>(b), w.time(), stride, pad, t_out, col.data(), t_out);
      MapMat<T> ym(y.item(static_cast<std::size_t>(b)).data(), as_long(c_out), as_long(t_out));
      ym.noalias() = wm * col;
      if (!bias.empty()) {
        for (std::size_t o = 0; o < c_out; ++o) ym.row(as_long(o)).array() += bias[o];
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> conv1d_input_grad(const BasicTensor3<T>& gy, const BasicTensor3<T>& w,
                                  std::size_t stride, std::size_t pad, std::size_t t_in) {
  detail::check_conv_grad(gy.channels(), gy.time(), w.batch(), w.time(), stride, pad, t_in);
  const std::size_t t_out = gy.time();
  const std::size_t rows = w.channels() * w.time();
  BasicTensor3<T> gx(gy.batch(), w.channels(), t_in);
  ConstMapMat<T> wm(w.data(), as_long(w.batch()), as_long(rows));
#pragma omp parallel
  {
    RowMat<T> col(as_long(rows), as_long(t_out));
#pragma omp for schedule(static)
    for (long b = 0; b < as_long(gy.batch()); ++b) {
      ConstMapMat<T> gm(gy.item(static_cast<std::size_t>(b)).data(), as_long(w.batch()),
                        as_long(t_out));
      col.noalias() = wm.transpose() * gm;
      col2im_add(col.data(), t_out, w.time(), stride, pad, t_out, gx, static_cast<std::size_t>(b));
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
  const std::size_t t_out = gy.time();
  const std::size_t batch = x.batch();
  const std::size_t rows = gw.channels() * gw.time();
  const std::size_t ld = batch * t_out;
  RowMat<T> col(as_long(rows), as_long(ld));
  RowMat<T> g(as_long(gy.channels()), as_long(ld));
#pragma omp parallel for schedule(static)
  for (long b = 0; b < as_long(batch); ++b) {
    const auto bi = static_cast<std::size_t>(b);
    im2col(x, bi, gw.time(), stride, pad, t_out, col.data() + bi * t_out, ld);
    for (std::size_t o = 0; o < gy.channels(); ++o) {
      const auto src = gy.row(bi, o);
      std::copy(src.begin(), src.end(), g.data() + o * ld + bi * t_out);
    }
  }
  MapMat<T> gwm(gw.data(), as_long(gw.batch()), as_long(rows));
  gwm.noalias() += g * col.transpose();
}

template <typename T>
void bias_grad(const BasicTensor3<T>& gy, std::span<T> gb) {
  if (gb.size() != gy.channels()) throw DimensionError("bias_grad: length mismatch");
#pragma omp parallel for schedule(static)
  for (long c = 0; c < as_long(gy.channels()); ++c) {
    T acc = 0;
    for (std::size_t b = 0; b < gy.batch(); ++b) {
      for (T v : gy.row(b, static_cast<std::size_t>(c))) acc += v;
    }
    gb[static_cast<std::size_t>(c)] += acc;
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
#pragma omp parallel for schedule(static)
    for (long b = 0; b < as_long(y.batch()); ++b) {
      for (std::size_t c = 0; c < y.channels(); ++c) {
        for (T& v : y.row(static_cast<std::size_t>(b), c)) v += bias[c];
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> leaky_relu(const BasicTensor3<T>& x, T slope) {
  BasicTensor3<T> y(x.batch(), x.channels(), x.time());
  const T* src = x.data();
  T* dst = y.data();
  const long n = as_long(x.size());
#pragma omp parallel for simd schedule(static)
  for (long i = 0; i < n; ++i) dst[i] = src[i] < T(0) ? slope * src[i] : src[i];
  return y;
}

template <typename T>
BasicTensor3<T> leaky_relu_grad(const BasicTensor3<T>& pre, const BasicTensor3<T>& gy, T slope) {
  if (!pre.same_shape(gy)) throw DimensionError("leaky_relu_grad: shape mismatch");
  BasicTensor3<T> gx(gy.batch(), gy.channels(), gy.time());
  const T* p = pre.data();
  const T* g = gy.data();
  T* dst = gx.data();
  const long n = as_long(gy.size());
#pragma omp parallel for simd schedule(static)
  for (long i = 0; i < n; ++i) dst[i] = p[i] < T(0) ? slope * g[i] : g[i];
  return gx;
}

template <typename T>
BasicTensor3<T> phase_shuffle(const BasicTensor3<T>& x, std::span<const int> shifts) {
  detail::check_shifts(x.batch(), x.time(), shifts);
  BasicTensor3<T> y(x.batch(), x.channels(), x.time());
  const long rows = as_long(x.batch() * x.channels());
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const std::size_t b = static_cast<std::size_t>(r) / x.channels();
    const std::size_t c = static_cast<std::size_t>(r) % x.channels();
    const auto src = x.row(b, c);
    auto dst = y.row(b, c);
    for (std::size_t t = 0; t < x.time(); ++t) {
      dst[t] = src[detail::reflect(static_cast<long>(t) - shifts[b], x.time())];
    }
  }
  return y;
}

template <typename T>
BasicTensor3<T> phase_shuffle_adjoint(const BasicTensor3<T>& gy, std::span<const int> shifts) {
  detail::check_shifts(gy.batch(), gy.time(), shifts);
  BasicTensor3<T> gx(gy.batch(), gy.channels(), gy.time());
  const long rows = as_long(gy.batch() * gy.channels());
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const std::size_t b = static_cast<std::size_t>(r) / gy.channels();
    const std::size_t c = static_cast<std::size_t>(r) % gy.channels();
    const auto src = gy.row(b, c);
    auto dst = gx.row(b, c);
    for (std::size_t t = 0; t < gy.time(); ++t) {
      dst[detail::reflect(static_cast<long>(t) - shifts[b], gy.time())] += src[t];
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
  ConstMapMat<T> xm(x.data(), as_long(batch), as_long(in));
  ConstMapMat<T> wm(w.data(), as_long(out), as_long(in));
  MapMat<T> ym(y.data(), as_long(batch), as_long(out));
  ym.noalias() = xm * wm.transpose();
  if (!bias.empty()) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < out; ++o) y[b * out + o] += bias[o];
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
  std::vector<T> gx(batch * in);
  ConstMapMat<T> gm(gy.data(), as_long(batch), as_long(out));
  ConstMapMat<T> wm(w.data(), as_long(out), as_long(in));
  MapMat<T> xm(gx.data(), as_long(batch), as_long(in));
  xm.noalias() = gm * wm;
  return gx;
}

template <typename T>
void dense_weight_grad(std::span<const T> x, std::span<const T> gy, std::size_t batch,
                       std::size_t out, std::size_t in, std::span<T> gw, std::span<T> gb) {
  if (x.size() != batch * in || gy.size() != batch * out || gw.size() != out * in) {
    throw DimensionError("dense_weight_grad: shape mismatch");
  }
  ConstMapMat<T> xm(x.data(), as_long(batch), as_long(in));
  ConstMapMat<T> gm(gy.data(), as_long(batch), as_long(out));
  MapMat<T> wm(gw.data(), as_long(out), as_long(in));
  wm.noalias() += gm.transpose() * xm;
  if (!gb.empty()) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < out; ++o) gb[o] += gy[b * out + o];
    }
  }
}

CONVPROBE_INSTANTIATE(float)
CONVPROBE_INSTANTIATE(double)

}  // namespace convprobe::kernels
