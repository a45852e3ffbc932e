#include <doctest.h>

#include "gradcheck.hpp"

#include <nvs/errors.hpp>
#include <nvs/ops.hpp>

#include <cmath>
#include <random>

using namespace nvs;
using nvs::testing::gradcheck;
using nvs::testing::project;
using nvs::testing::random_const;
using nvs::testing::random_param;

namespace {

void check_op(const std::function<Var<double>()>& fn, const std::vector<Var<double>>& params, double tol = 1e-6) {
  auto r = gradcheck([&] { return project(fn()); }, params, 1e-6, 1e-3);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(1);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({3, 4}, rng);
  auto w = random_param({4, 5}, rng);
  auto bias = random_param({5}, rng);

  check_op([&] { return add(a, b); }, {a, b});
  check_op([&] { return sub(a, b); }, {a, b});
  check_op([&] { return mul(a, b); }, {a, b});
  check_op([&] { return scale(a, 2.5); }, {a});
  check_op([&] { return linear(a, w, bias); }, {a, w, bias});
  check_op([&] { return linear(a, w, Var<double>()); }, {a, w});
  check_op([&] { return matmul(a, w); }, {a, w});
  check_op([&] { return gelu(a); }, {a});
  check_op([&] { return silu(a); }, {a});
  check_op([&] { return add_row_bias(a, slice(reshape(b, {12}), 0, 4)); }, {a, b});
  check_op([&] { return transpose(a); }, {a});
  check_op([&] { return slice_cols(a, 1, 2); }, {a});
  check_op([&] { return gather_rows(a, {2, 0, 2}); }, {a});
  check_op([&] { return concat_cols<double>({a, b}); }, {a, b});
  check_op([&] { return concat<double>({a, b}); }, {a, b});
  ArrayX<double> factors(3);
  factors << 0.5, -1.0, 2.0;
  check_op([&] { return scale_rows(a, factors); }, {a});
}

TEST_CASE("normalization ops match finite differences") {
  std::mt19937_64 rng(2);
  auto x = random_param({5, 6}, rng);
  auto gain = random_param({6}, rng);
  auto shift = random_param({6}, rng);
  check_op([&] { return layer_norm(x, gain, shift); }, {x, gain, shift}, 1e-5);

  auto img = random_param({4, 3, 3}, rng);
  auto g4 = random_param({4}, rng);
  auto s4 = random_param({4}, rng);
  check_op([&] { return group_norm(img, 2, g4, s4); }, {img, g4, s4}, 1e-5);
  check_op([&] { return add_channel_bias(img, g4); }, {img, g4});
}

TEST_CASE("spatial ops match finite differences") {
  std::mt19937_64 rng(3);
  auto x = random_param({2, 4, 4}, rng);
  auto w3 = random_param({3, 2, 3, 3}, rng);
  auto w1 = random_param({3, 2, 1, 1}, rng);
  auto b = random_param({3}, rng);
  check_op([&] { return conv2d(x, w3, b, 1, 1); }, {x, w3, b});
  check_op([&] { return conv2d(x, w3, b, 2, 1); }, {x, w3, b});
  check_op([&] { return conv2d(x, w1, b, 1, 0); }, {x, w1, b});
  check_op([&] { return upsample_nearest2x(x); }, {x});
  check_op([&] { return resize_bilinear(x, 7, 5); }, {x});
  check_op([&] { return avg_pool(x, 2); }, {x});
}

TEST_CASE("conv2d matches a direct convolution loop") {
  std::mt19937_64 rng(4);
  auto x = random_const({2, 5, 4}, rng);
  auto w = random_const({3, 2, 3, 3}, rng);
  auto b = random_const({3}, rng);
  auto out = conv2d(x, w, b, 2, 1);
  REQUIRE(out.shape() == Shape{3, 3, 2});
  for (Index co = 0; co < 3; ++co)
    for (Index oy = 0; oy < 3; ++oy)
      for (Index ox = 0; ox < 2; ++ox) {
        double acc = b.value()[co];
        for (Index ci = 0; ci < 2; ++ci)
          for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
              const Index iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 4) continue;
              acc += w.value()[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.value()[(ci * 5 + iy) * 4 + ix];
            }
        CHECK(out.value()[(co * 3 + oy) * 2 + ox] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("grouped attention matches a naive per-head evaluation and its gradients") {
  std::mt19937_64 rng(5);
  const Index group = 3, heads = 2, d = 4;
  auto qkv = random_param({2 * group, 3 * d}, rng);
  Mask mask{1, 0, 1, 1, 1, 1};
  auto out = grouped_attention(qkv, group, heads, mask);
  const auto m = qkv.mat();
  const Index dh = d / heads;
  for (Index g = 0; g < 2; ++g)
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < group; ++i) {
        std::vector<double> logits;
        double mx = -1e300;
        for (Index j = 0; j < group; ++j) {
          double s = 0;
          for (Index c = 0; c < dh; ++c) s += m(g * group + i, h * dh + c) * m(g * group + j, d + h * dh + c);
          s /= std::sqrt(double(dh));
          logits.push_back(s);
          if (mask[g * group + j]) mx = std::max(mx, s);
        }
        double z = 0;
        for (Index j = 0; j < group; ++j)
          if (mask[g * group + j]) z += std::exp(logits[j] - mx);
        for (Index c = 0; c < dh; ++c) {
          double acc = 0;
          for (Index j = 0; j < group; ++j)
            if (mask[g * group + j]) acc += std::exp(logits[j] - mx) / z * m(g * group + j, 2 * d + h * dh + c);
          CHECK(out.mat()(g * group + i, h * dh + c) == doctest::Approx(acc).epsilon(1e-12));
        }
      }
  check_op([&] { return grouped_attention(qkv, group, heads, mask); }, {qkv});
}

TEST_CASE("group softmax matches a direct exp/normalize oracle") {
  std::mt19937_64 rng(6);
  auto logits = random_param({8}, rng, -3, 3);
  auto w = group_softmax(logits, 4);
  for (Index g = 0; g < 2; ++g) {
    double z = 0;
    for (Index k = 0; k < 4; ++k) z += std::exp(logits.value()[g * 4 + k]);
    for (Index k = 0; k < 4; ++k) CHECK(w.value()[g * 4 + k] == doctest::Approx(std::exp(logits.value()[g * 4 + k]) / z).epsilon(1e-12));
  }
  Mask mask{1, 1, 0, 1, 0, 0, 0, 0};
  auto wm = group_softmax(logits, 4, mask);
  CHECK(wm.value()[2] == 0.0);
  CHECK(wm.value().segment(0, 4).sum() == doctest::Approx(1.0));
  // Fully invalid group: uniform constants.
  for (Index k = 4; k < 8; ++k) CHECK(wm.value()[k] == 0.25);
  check_op([&] { return group_softmax(logits, 4, mask); }, {logits});
}

TEST_CASE("group weighted sum and trilinear sampling gradients") {
  std::mt19937_64 rng(7);
  auto w = random_param({6}, rng);
  auto v = random_param({6, 3}, rng);
  check_op([&] { return group_weighted_sum(w, v, 3); }, {w, v});

  auto vol = random_param({2, 3, 4, 5}, rng);
  Eigen::MatrixX3d coords(4, 3);
  coords << 0.3, 1.2, 0.5, 3.9, 2.99, 2.0, 2.0, 1.0, 1.0, 1.5, 0.5, 1.7;
  Mask valid{1, 1, 0, 1};
  auto s = trilinear_sample(vol, coords, valid);
  CHECK(s.mat().row(2).isZero());
  check_op([&] { return trilinear_sample(vol, coords, valid); }, {vol});
}

TEST_CASE("losses and reductions") {
  Var<double> a = Var<double>::constant(ArrayX<double>::Constant(6, 0.6), {2, 3});
  Var<double> b = Var<double>::constant(ArrayX<double>::Constant(6, 0.5), {2, 3});
  CHECK(mse(a, b).item() == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(sum(a).item() == doctest::Approx(3.6));
  CHECK(mean(a).item() == doctest::Approx(0.6));
  std::mt19937_64 rng(8);
  auto x = random_param({3, 2}, rng);
  auto y = random_param({3, 2}, rng);
  auto r = gradcheck([&] { return mse(x, y); }, {x, y});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("bilinear resize is corner aligned") {
  // 2x2 ramp f(r, c) = r + 2c resampled to 3x3 reproduces the ramp exactly.
  ArrayX<double> v(4);
  v << 0, 2, 1, 3;
  auto x = Var<double>::constant(v, {1, 2, 2});
  auto y = resize_bilinear(x, 3, 3);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 3; ++c) CHECK(y.value()[r * 3 + c] == doctest::Approx(0.5 * r + 1.0 * c).epsilon(1e-15));
  auto same = resize_bilinear(x, 2, 2);
  CHECK((same.value() == x.value()).all());
}

TEST_CASE("shape errors are reported") {
  auto a = Var<double>::zeros({2, 3});
  auto b = Var<double>::zeros({3, 3});
  CHECK_THROWS_AS(add(a, b), ArgumentError);
  CHECK_THROWS_AS(matmul(a, a), ArgumentError);
  CHECK_THROWS_AS(grouped_attention(Var<double>::zeros({4, 6}), 3, 1), ArgumentError);
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  std::mt19937_64 rng(9);
  auto a = random_param({2, 2}, rng);
  NoGradGuard guard;
  auto y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("gradients accumulate across shared uses") {
  auto x = Var<double>::parameter(ArrayX<double>::Constant(1, 3.0), {});
  auto y = add(mul(x, x), x);  // x^2 + x
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}
