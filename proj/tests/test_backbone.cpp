#include <doctest.h>

#include "clusvpr/backbone.hpp"
#include "clusvpr/layers.hpp"
#include "helpers.hpp"

using namespace clusvpr;

namespace {

// Direct definition: y[o][i][j] = b[o] + sum_{c,u,v} w[o][c][u][v] x[c][s i + u - 1][s j + v - 1].
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t s) {
  const long C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0);
  const long Ho = (H + s - 1) / s, Wo = (W + s - 1) / s;
  Tensor y({std::size_t(O), std::size_t(Ho), std::size_t(Wo)});
  for (long o = 0; o < O; ++o)
    for (long i = 0; i < Ho; ++i)
      for (long j = 0; j < Wo; ++j) {
        double acc = b[o];
        for (long c = 0; c < C; ++c)
          for (long u = 0; u < 3; ++u)
            for (long v = 0; v < 3; ++v) {
              const long yy = long(s) * i + u - 1, xx = long(s) * j + v - 1;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              acc += w.data[((o * C + c) * 3 + u) * 3 + v] * x.at(c, yy, xx);
            }
        y.at(o, i, j) = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("conv3x3 matches direct definition") {
  Rng rng(11);
  for (std::size_t s : {1u, 2u}) {
    Tensor x = testutil::random_tensor({3, 6, 6}, rng);
    Tensor w = testutil::random_tensor({4, 3, 3, 3}, rng);
    Tensor b = testutil::random_tensor({4}, rng);
    auto y = layers::conv3x3(x, w, b, s);
    auto ref = conv_oracle(x, w, b, s);
    CHECK(y.shape == ref.shape);
    CHECK(testutil::max_abs_diff(y.data, ref.data) < 1e-12);
  }
}

TEST_CASE("conv3x3 backward") {
  Rng rng(12);
  for (std::size_t s : {1u, 2u}) {
    Tensor x = testutil::random_tensor({2, 4, 4}, rng);
    Tensor w = testutil::random_tensor({3, 2, 3, 3}, rng);
    Tensor b = testutil::random_tensor({3}, rng);
    Tensor gy = testutil::random_tensor(layers::conv3x3(x, w, b, s).shape, rng);
    Tensor gw(w.shape), gb(b.shape), gx(x.shape);
    layers::conv3x3_backward(x, w, s, gy, gw, gb, &gx);
    auto f = [&] { return layers::conv3x3(x, w, b, s); };
    CHECK(max_relative_error(gw.data, testutil::numeric_grad(w, gy, f)) < 1e-7);
    CHECK(max_relative_error(gb.data, testutil::numeric_grad(b, gy, f)) < 1e-7);
    CHECK(max_relative_error(gx.data, testutil::numeric_grad(x, gy, f)) < 1e-7);
  }
}

TEST_CASE("depthwise3x3 and backward") {
  Rng rng(13);
  Tensor x = testutil::random_tensor({3, 5, 5}, rng);
  Tensor w = testutil::random_tensor({3, 3, 3}, rng);
  Tensor b = testutil::random_tensor({3}, rng);
  auto y = layers::depthwise3x3(x, w, b);
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor xc({1, 5, 5}), wc({1, 1, 3, 3}), bc({1}, {b[c]});
    for (std::size_t i = 0; i < 25; ++i) xc.data[i] = x.data[c * 25 + i];
    for (std::size_t i = 0; i < 9; ++i) wc.data[i] = w.data[c * 9 + i];
    auto ref = conv_oracle(xc, wc, bc, 1);
    for (std::size_t i = 0; i < 25; ++i) CHECK(std::abs(y.data[c * 25 + i] - ref.data[i]) < 1e-12);
  }
  Tensor gy = testutil::random_tensor(y.shape, rng);
  Tensor gw(w.shape), gb(b.shape), gx(x.shape);
  layers::depthwise3x3_backward(x, w, gy, gw, gb, gx);
  auto f = [&] { return layers::depthwise3x3(x, w, b); };
  CHECK(max_relative_error(gw.data, testutil::numeric_grad(w, gy, f)) < 1e-7);
  CHECK(max_relative_error(gb.data, testutil::numeric_grad(b, gy, f)) < 1e-7);
  CHECK(max_relative_error(gx.data, testutil::numeric_grad(x, gy, f)) < 1e-7);
}

TEST_CASE("linear backward and token pooling") {
  Rng rng(14);
  Tensor x = testutil::random_tensor({5, 4}, rng);
  Tensor w = testutil::random_tensor({4, 3}, rng);
  Tensor b = testutil::random_tensor({3}, rng);
  Tensor gy = testutil::random_tensor({5, 3}, rng);
  Tensor gw(w.shape), gb(b.shape), gx(x.shape);
  layers::linear_backward(x, w, gy, gw, &gb, &gx);
  auto f = [&] { return layers::linear(x, w, b); };
  CHECK(max_relative_error(gw.data, testutil::numeric_grad(w, gy, f)) < 1e-7);
  CHECK(max_relative_error(gb.data, testutil::numeric_grad(b, gy, f)) < 1e-7);
  CHECK(max_relative_error(gx.data, testutil::numeric_grad(x, gy, f)) < 1e-7);

  Tensor m = testutil::random_tensor({2, 4, 6}, rng);
  Tensor gt = testutil::random_tensor({6, 2}, rng);
  auto pooled = [&] { return layers::avg_pool_tokens(m, 2); };
  auto gm = layers::avg_pool_tokens_backward(gt, 2, 4, 6, 2);
  CHECK(max_relative_error(gm.data, testutil::numeric_grad(m, gt, pooled)) < 1e-8);
  CHECK_THROWS_AS(layers::avg_pool_tokens(Tensor({1, 3, 4}), 2), std::invalid_argument);
}

TEST_CASE("backbone shape law and examples") {
  Rng rng(1);
  Backbone bb(BackboneConfig{}, rng);
  Tensor img = testutil::random_tensor({64, 64, 3}, rng);
  auto y = bb.forward(img);
  CHECK(y.shape == std::vector<std::size_t>{64, 4, 4});
  CHECK(bb.total_stride() == 16);
  CHECK_THROWS_AS(bb.forward(Tensor({60, 64, 3})), std::invalid_argument);
  CHECK_THROWS_AS(bb.forward(Tensor({64, 64, 1})), std::invalid_argument);

  auto zero = bb.forward(Tensor({64, 64, 3}));
  for (double v : zero.data) CHECK(v == 0.0);

  Rng again(1);
  Backbone bb2(BackboneConfig{}, again);
  auto y2 = bb2.forward(img);
  CHECK(y.data == y2.data);
}

TEST_CASE("backbone gradients") {
  Rng rng(2);
  BackboneConfig cfg;
  cfg.channels = {3, 4};
  cfg.strides = {2, 1};
  Backbone bb(cfg, rng);
  for (Param* p : bb.params())
    for (auto& v : p->value.data) v += 0.1 * rng.normal();
  Tensor img = testutil::random_tensor({8, 8, 3}, rng);
  Backbone::Cache cache;
  auto y = bb.forward(img, &cache);
  Tensor gy = testutil::random_tensor(y.shape, rng);
  for (Param* p : bb.params()) p->zero_grad();
  bb.backward(cache, gy);
  for (Param* p : bb.params()) {
    auto num = testutil::numeric_grad(p->value, gy, [&] { return bb.forward(img); });
    INFO(p->name);
    CHECK(max_relative_error(p->grad.data, num) < 1e-6);
  }
}
