#include <algorithm>
#include <map>

#include "convprobe/kernels.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace convprobe;
using testutil::random_tensor;

namespace {

Tensor3 row_tensor(std::vector<float> v) {
  Tensor3 t(1, 1, v.size());
  std::copy(v.begin(), v.end(), t.flat().begin());
  return t;
}

std::vector<float> as_vec(const Tensor3& t) { return {t.flat().begin(), t.flat().end()}; }

// WaveGAN-style shuffle written independently: reflect-pad by n, then crop the
// window starting at n - k.
std::vector<double> reflect_pad_crop(const std::vector<double>& x, int n, int k) {
  const int len = static_cast<int>(x.size());
  std::vector<double> padded;
  for (int i = n; i >= 1; --i) padded.push_back(x[i]);
  padded.insert(padded.end(), x.begin(), x.end());
  for (int i = 1; i <= n; ++i) padded.push_back(x[len - 1 - i]);
  return {padded.begin() + (n - k), padded.begin() + (n - k) + len};
}

}  // namespace

TEST_CASE("conv1d direct-sum examples") {
  const Tensor3 x = row_tensor({1, 2, 3, 4});
  const Tensor3 w = row_tensor({1, 0});
  CHECK(as_vec(kernels::conv1d<float>(x, w, {}, 1, 0)) == std::vector<float>{1, 2, 3});
  CHECK(as_vec(reference::conv1d<float>(x, w, {}, 1, 0)) == std::vector<float>{1, 2, 3});

  const Tensor3 identity = row_tensor({1});
  CHECK(as_vec(kernels::conv1d<float>(x, identity, {}, 1, 0)) == as_vec(x));

  const Tensor3 zeros(1, 1, 3);
  const std::vector<float> bias{2.5f};
  CHECK(as_vec(kernels::conv1d<float>(x, zeros, bias, 1, 1)) ==
        std::vector<float>(4, 2.5f));
}

TEST_CASE("conv1d shape errors") {
  const Tensor3 x(1, 2, 8);
  CHECK_THROWS_AS(kernels::conv1d<float>(x, Tensor3(1, 3, 3), {}, 1, 0), DimensionError);
  CHECK_THROWS_AS(kernels::conv1d<float>(x, Tensor3(1, 2, 20), {}, 1, 0), DimensionError);
  const std::vector<float> bad_bias(2, 0.f);
  CHECK_THROWS_AS(kernels::conv1d<float>(x, Tensor3(1, 2, 3), bad_bias, 1, 0), DimensionError);
  CHECK_THROWS_AS(kernels::conv1d_transposed<float>(x, Tensor3(3, 1, 3), {}, 1, 0),
                  DimensionError);
}

TEST_CASE("conv1d_transposed scatter-add examples") {
  const Tensor3 x = row_tensor({1});
  const Tensor3 w = row_tensor({1, 2, 3});
  CHECK(as_vec(kernels::conv1d_transposed<float>(x, w, {}, 1, 0)) ==
        std::vector<float>{1, 2, 3});
  CHECK(as_vec(reference::conv1d_transposed<float>(x, w, {}, 1, 0)) ==
        std::vector<float>{1, 2, 3});

  const Tensor3 zero_in(1, 1, 4);
  const std::vector<float> bias{-0.5f};
  const auto y = kernels::conv1d_transposed<float>(zero_in, w, bias, 2, 1, 1);
  CHECK(y.time() == 8);
  for (float v : y.flat()) CHECK(v == -0.5f);
}

TEST_CASE("leaky_relu examples") {
  const Tensor3 x = row_tensor({5, -1, 0, -3});
  CHECK(as_vec(kernels::leaky_relu(x, 0.2f)) == std::vector<float>{5, -0.2f, 0, -0.6f});
  CHECK(as_vec(kernels::leaky_relu(x, 1.0f)) == as_vec(x));
  const Tensor3 pre = row_tensor({-2});
  const Tensor3 ones = row_tensor({1});
  CHECK(kernels::leaky_relu_grad(pre, ones, 0.2f).flat()[0] == doctest::Approx(0.2));
}

TEST_CASE("phase_shuffle examples") {
  const Tensor3 x = row_tensor({1, 2, 3, 4});
  const std::vector<int> plus_one{1};
  CHECK(as_vec(kernels::phase_shuffle<float>(x, plus_one)) == std::vector<float>{2, 1, 2, 3});
  const std::vector<int> minus_one{-1};
  CHECK(as_vec(kernels::phase_shuffle<float>(x, minus_one)) == std::vector<float>{2, 3, 4, 3});

  std::mt19937_64 rng(3);
  const auto big = random_tensor<float>(3, 2, 16, rng);
  const auto none = draw_shifts(3, 0, rng);
  CHECK(kernels::phase_shuffle<float>(big, none) == big);
}

TEST_CASE("phase_shuffle matches reflect-pad-and-crop and moves at most 2n values") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + trial % 4;
    const auto x = random_tensor<double>(2, 3, 12, rng);
    const auto shifts = draw_shifts(2, n, rng);
    for (int s : shifts) CHECK(std::abs(s) <= n);
    const auto y = kernels::phase_shuffle<double>(x, shifts);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::vector<double> row(x.row(b, c).begin(), x.row(b, c).end());
        const auto expect = reflect_pad_crop(row, n, shifts[b]);
        const std::vector<double> got(y.row(b, c).begin(), y.row(b, c).end());
        CHECK(got == expect);
        std::map<double, int> count;
        for (double v : row) count[v]++;
        for (double v : got) count[v]--;
        int changed = 0;
        for (auto& [v, c2] : count) changed += std::abs(c2);
        CHECK(changed <= 2 * n);
      }
    }
  }
}

TEST_CASE("fast kernels agree with the serial reference") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t b = 1 + trial % 3, cin = 1 + trial % 4, cout = 2 + trial % 3;
    const std::size_t k = 3 + trial % 5, stride = 1 + trial % 4, pad = trial % 3;
    const std::size_t t = 16 + 4 * trial;
    const auto x = random_tensor<double>(b, cin, t, rng);
    const auto w = random_tensor<double>(cout, cin, k, rng);
    const auto bias = testutil::random_vector<double>(cout, rng);
    const auto y_fast = kernels::conv1d<double>(x, w, bias, stride, pad);
    const auto y_ref = reference::conv1d<double>(x, w, bias, stride, pad);
    CHECK(testutil::max_abs_diff<double>(y_fast.flat(), y_ref.flat()) < 1e-12);

    const auto gy = random_tensor<double>(b, cout, y_fast.time(), rng);
    const auto gx_fast = kernels::conv1d_input_grad(gy, w, stride, pad, t);
    const auto gx_ref = reference::conv1d_input_grad(gy, w, stride, pad, t);
    CHECK(testutil::max_abs_diff<double>(gx_fast.flat(), gx_ref.flat()) < 1e-12);

    BasicTensor3<double> gw_fast(cout, cin, k), gw_ref(cout, cin, k);
    kernels::conv1d_weight_grad(x, gy, stride, pad, gw_fast);
    reference::conv1d_weight_grad(x, gy, stride, pad, gw_ref);
    CHECK(testutil::max_abs_diff<double>(gw_fast.flat(), gw_ref.flat()) < 1e-11);

    const auto shifts = draw_shifts(b, 2, rng);
    CHECK(kernels::phase_shuffle<double>(x, shifts) == reference::phase_shuffle<double>(x, shifts));
    CHECK(kernels::phase_shuffle_adjoint<double>(x, shifts) ==
          reference::phase_shuffle_adjoint<double>(x, shifts));

    const auto dw = testutil::random_vector<double>(cout * cin * t, rng);
    const auto dy_fast = kernels::dense<double>(x.flat(), b, dw, bias, cout);
    const auto dy_ref = reference::dense<double>(x.flat(), b, dw, bias, cout);
    CHECK(testutil::max_abs_diff<double>(dy_fast, dy_ref) < 1e-12);
  }
}

TEST_CASE("conv1d and conv1d_transposed are adjoint") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> small(1, 4);
    const std::size_t b = small(rng), cin = small(rng), cout = small(rng);
    const std::size_t k = 1 + small(rng) * 2, stride = small(rng);
    const std::size_t pad = std::min<std::size_t>(small(rng) - 1, k - 1);
    const std::size_t t = 8 + 4 * small(rng);
    const auto x = random_tensor<double>(b, cin, t, rng);
    const auto w = random_tensor<double>(cout, cin, k, rng);
    const auto y = kernels::conv1d<double>(x, w, {}, stride, pad);
    const auto r = random_tensor<double>(b, cout, y.time(), rng);
    // Transposed conv with output padding chosen to land back on length t.
    const std::size_t natural = conv_transposed_out_len(y.time(), k, stride, pad);
    const auto xt = kernels::conv1d_transposed<double>(r, w, {}, stride, pad, t - natural);
    REQUIRE(xt.time() == t);
    const double lhs = testutil::dot<double>(y.flat(), r.flat());
    const double rhs = testutil::dot<double>(x.flat(), xt.flat());
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("kernel gradients match central finite differences") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> pick(0, 1 << 20);
  const std::size_t b = 2, cin = 3, cout = 2, k = 5, stride = 2, pad = 2, t = 12;
  auto x = random_tensor<double>(b, cin, t, rng);
  auto w = random_tensor<double>(cout, cin, k, rng);
  auto bias = testutil::random_vector<double>(cout, rng);
  const auto y0 = kernels::conv1d<double>(x, w, bias, stride, pad);
  const auto r = random_tensor<double>(b, cout, y0.time(), rng);

  auto conv_loss = [&] {
    const auto y = kernels::conv1d<double>(x, w, bias, stride, pad);
    return testutil::dot<double>(y.flat(), r.flat());
  };
  BasicTensor3<double> gw(cout, cin, k);
  kernels::conv1d_weight_grad(x, r, stride, pad, gw);
  const auto gx = kernels::conv1d_input_grad(r, w, stride, pad, t);
  std::vector<double> gb(cout, 0.0);
  kernels::bias_grad<double>(r, gb);
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t iw = pick(rng) % w.size();
    CHECK(testutil::rel_err(gw.flat()[iw],
                            testutil::central_difference<double>(w.flat(), iw, conv_loss)) < 1e-3);
    const std::size_t ix = pick(rng) % x.size();
    CHECK(testutil::rel_err(gx.flat()[ix],
                            testutil::central_difference<double>(x.flat(), ix, conv_loss)) < 1e-3);
  }
  for (std::size_t o = 0; o < cout; ++o) {
    CHECK(testutil::rel_err(gb[o], testutil::central_difference<double>(bias, o, conv_loss)) <
          1e-3);
  }

  // Transposed convolution: input (B, cout, T_small) -> (B, cin, T_big).
  auto xs = random_tensor<double>(b, cout, 6, rng);
  const auto yt0 = kernels::conv1d_transposed<double>(xs, w, {}, stride, pad, 1);
  const auto rt = random_tensor<double>(b, cin, yt0.time(), rng);
  auto convt_loss = [&] {
    const auto y = kernels::conv1d_transposed<double>(xs, w, {}, stride, pad, 1);
    return testutil::dot<double>(y.flat(), rt.flat());
  };
  BasicTensor3<double> gwt(cout, cin, k);
  kernels::conv1d_weight_grad(rt, xs, stride, pad, gwt);
  const auto gxs = kernels::conv1d<double>(rt, w, {}, stride, pad);
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t iw = pick(rng) % w.size();
    CHECK(testutil::rel_err(gwt.flat()[iw],
                            testutil::central_difference<double>(w.flat(), iw, convt_loss)) <
          1e-3);
    const std::size_t ix = pick(rng) % xs.size();
    CHECK(testutil::rel_err(gxs.flat()[ix],
                            testutil::central_difference<double>(xs.flat(), ix, convt_loss)) <
          1e-3);
  }

  // Leaky ReLU (probes away from the kink) and phase shuffle.
  auto lx = random_tensor<double>(2, 2, 10, rng);
  for (double& v : lx.flat()) v += v >= 0 ? 0.1 : -0.1;
  const auto lr = random_tensor<double>(2, 2, 10, rng);
  const auto shifts = std::vector<int>{2, -1};
  auto act_loss = [&] {
    const auto y = kernels::phase_shuffle<double>(kernels::leaky_relu(lx, 0.2), shifts);
    return testutil::dot<double>(y.flat(), lr.flat());
  };
  const auto glx = kernels::leaky_relu_grad(lx, kernels::phase_shuffle_adjoint<double>(lr, shifts),
                                            0.2);
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t i = pick(rng) % lx.size();
    CHECK(testutil::rel_err(glx.flat()[i],
                            testutil::central_difference<double>(lx.flat(), i, act_loss)) < 1e-3);
  }

  // Dense.
  const std::size_t in = 7, out = 3;
  auto dx = testutil::random_vector<double>(b * in, rng);
  auto dw = testutil::random_vector<double>(out * in, rng);
  auto db = testutil::random_vector<double>(out, rng);
  const auto dr = testutil::random_vector<double>(b * out, rng);
  auto dense_loss = [&] {
    const auto y = kernels::dense<double>(dx, b, dw, db, out);
    return testutil::dot<double>(y, dr);
  };
  std::vector<double> gdw(out * in, 0.0), gdb(out, 0.0);
  kernels::dense_weight_grad<double>(dx, dr, b, out, in, gdw, gdb);
  const auto gdx = kernels::dense_input_grad<double>(dr, b, dw, out, in);
  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t iw = pick(rng) % dw.size();
    CHECK(testutil::rel_err(gdw[iw], testutil::central_difference<double>(dw, iw, dense_loss)) <
          1e-3);
    const std::size_t ix = pick(rng) % dx.size();
    CHECK(testutil::rel_err(gdx[ix], testutil::central_difference<double>(dx, ix, dense_loss)) <
          1e-3);
  }
  for (std::size_t o = 0; o < out; ++o) {
    CHECK(testutil::rel_err(gdb[o], testutil::central_difference<double>(db, o, dense_loss)) <
          1e-3);
  }
}
