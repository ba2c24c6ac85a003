#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nn/conv.hpp"
#include "nn/ops.hpp"

using namespace voxelseg;
using namespace voxelseg::nn;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

// Direct seven-loop convolution used as the reference.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int stride) {
  const auto N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto O = w.dim(0), k = w.dim(2), p = k / 2;
  const auto Do = (D + 2 * p - k) / stride + 1, Ho = (H + 2 * p - k) / stride + 1, Wo = (W + 2 * p - k) / stride + 1;
  Tensor<double> y({N, O, Do, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t yy = 0; yy < Ho; ++yy)
          for (int64_t xx = 0; xx < Wo; ++xx) {
            double s = b ? (*b)[o] : 0.0;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t a = 0; a < k; ++a)
                for (int64_t bb = 0; bb < k; ++bb)
                  for (int64_t cc = 0; cc < k; ++cc) {
                    const int64_t iz = z * stride + a - p, iy = yy * stride + bb - p, ix = xx * stride + cc - p;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                    s += x[(((n * C + c) * D + iz) * H + iy) * W + ix] * w[(((o * C + c) * k + a) * k + bb) * k + cc];
                  }
            y[(((n * O + o) * Do + z) * Ho + yy) * Wo + xx] = s;
          }
  return y;
}

Tensor<double> ones(Shape s) { return Tensor<double>(std::move(s), 1.0); }

}  // namespace

TEST_CASE("conv3d matches direct convolution") {
  Rng rng(7);
  struct Case {
    int c, o, k, s;
    Shape sp;
  };
  for (const Case& cs : {Case{3, 5, 3, 1, {5, 6, 7}}, Case{2, 3, 3, 2, {4, 6, 8}}, Case{4, 9, 1, 1, {3, 4, 5}},
                         Case{17, 11, 3, 1, {9, 3, 20}}, Case{5, 2, 1, 2, {4, 4, 2}}}) {
    Tensor<double> x = random_tensor({2, cs.c, cs.sp[0], cs.sp[1], cs.sp[2]}, rng);
    Tensor<double> w = random_tensor({cs.o, cs.c, cs.k, cs.k, cs.k}, rng);
    Tensor<double> b = random_tensor({cs.o}, rng);
    Graph<double> g;
    auto y = conv3d(g.constant(x), g.constant(w), g.constant(b), cs.s);
    Tensor<double> ref = naive_conv(x, w, &b, cs.s);
    REQUIRE(y.shape() == ref.shape());
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(ref[i] - y.value()[i]));
    CHECK(err < 1e-10);
  }
}

TEST_CASE("conv3d delta kernel is the identity and stride 2 halves") {
  Rng rng(1);
  Tensor<double> x = random_tensor({1, 1, 4, 4, 4}, rng);
  Tensor<double> w({1, 1, 3, 3, 3}, 0.0);
  w[13] = 1.0;
  Graph<double> g;
  auto y = conv3d(g.constant(x), g.constant(w), Var<double>{}, 1);
  CHECK(y.value() == x);
  auto y2 = conv3d(g.constant(x), g.constant(w), Var<double>{}, 2);
  CHECK(y2.shape() == Shape{1, 1, 2, 2, 2});
}

TEST_CASE("conv3d rejects mismatched channels") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({1, 2, 4, 4, 4}));
  auto w = g.constant(Tensor<double>({3, 4, 3, 3, 3}));
  CHECK_THROWS_AS(conv3d(x, w, Var<double>{}, 1), Error);
}

TEST_CASE("float conv agrees with double conv") {
  Rng rng(3);
  Tensor<double> x = random_tensor({1, 6, 8, 8, 8}, rng);
  Tensor<double> w = random_tensor({10, 6, 3, 3, 3}, rng, 0.2);
  Graph<double> gd;
  auto yd = conv3d(gd.constant(x), gd.constant(w), Var<double>{}, 1);
  Graph<float> gf;
  auto yf = conv3d(gf.constant(x.cast<float>()), gf.constant(w.cast<float>()), Var<float>{}, 1);
  double err = 0.0;
  for (std::size_t i = 0; i < yd.value().size(); ++i) err = std::max(err, std::abs(yd.value()[i] - yf.value()[i]));
  CHECK(err < 1e-4);
}

TEST_CASE("conv3d gradients") {
  Rng rng(11);
  for (int k : {1, 3})
    for (int s : {1, 2}) {
      CAPTURE(k);
      CAPTURE(s);
      std::vector<Tensor<double>> in = {random_tensor({2, 3, 4, 4, 2}, rng), random_tensor({2, 3, k, k, k}, rng),
                                        random_tensor({2}, rng)};
      const int64_t o = s == 1 ? 4 : 2, ow = s == 1 ? 2 : 1;
      Tensor<double> wsum = random_tensor({2, 2, o, o, ow}, rng);
      auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(conv3d(v[0], v[1], v[2], s), wsum); });
      CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("conv3d weight gradient on a 2^3 input") {
  Rng rng(5);
  std::vector<Tensor<double>> in = {random_tensor({1, 2, 2, 2, 2}, rng), random_tensor({3, 2, 3, 3, 3}, rng),
                                    random_tensor({3}, rng)};
  Tensor<double> wsum = random_tensor({1, 3, 2, 2, 2}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(conv3d(v[0], v[1], v[2], 1), wsum); });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("instance_norm values") {
  Graph<double> g;
  auto gain = g.constant(ones({1}));
  auto off = g.constant(Tensor<double>({1}, 0.0));
  auto c = instance_norm(g.constant(Tensor<double>({1, 1, 2, 2, 2}, 3.5)), gain, off);
  for (double v : c.value().values()) CHECK(v == 0.0);
  auto y = instance_norm(g.constant(Tensor<double>({1, 1, 1, 1, 2}, std::vector<double>{1.0, 3.0})), gain, off);
  CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Rng rng(2);
  Tensor<double> x = random_tensor({2, 3, 3, 4, 5}, rng, 4.0);
  auto z = instance_norm(g.constant(x), g.constant(ones({3})), g.constant(Tensor<double>({3}, 0.0)));
  for (int nc = 0; nc < 6; ++nc) {
    double m = 0.0, q = 0.0;
    for (int i = 0; i < 60; ++i) m += z.value()[nc * 60 + i];
    m /= 60;
    for (int i = 0; i < 60; ++i) q += std::pow(z.value()[nc * 60 + i] - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(q / 60 == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("instance_norm gradients") {
  Rng rng(13);
  std::vector<Tensor<double>> in = {random_tensor({2, 3, 2, 3, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
  Tensor<double> wsum = random_tensor({2, 3, 2, 3, 2}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(instance_norm(v[0], v[1], v[2]), wsum); });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("leaky_relu values and gradient") {
  Graph<double> g;
  auto x = g.parameter(Tensor<double>({3}, std::vector<double>{2.0, -2.0, -1.0}));
  auto y = leaky_relu(x, 0.01);
  CHECK(y.value()[0] == 2.0);
  CHECK(y.value()[1] == doctest::Approx(-0.02).epsilon(1e-15));
  g.backward(weighted_sum(y, Tensor<double>({3}, std::vector<double>{0.0, 0.0, 1.0})));
  CHECK(x.grad()[2] == doctest::Approx(0.01).epsilon(1e-15));

  Rng rng(17);
  std::vector<Tensor<double>> in = {random_tensor({40}, rng)};
  Tensor<double> wsum = random_tensor({40}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(leaky_relu(v[0], 0.01), wsum); });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("dropout modes and scaling") {
  Graph<double> g;
  Tensor<double> x({1, 1, 2, 2, 2}, 1.5);
  auto id = dropout(g.constant(x), 0.0, nullptr);
  CHECK(id.value() == x);
  Rng rng(99);
  auto p0 = dropout(g.constant(x), 0.0, &rng);
  CHECK(p0.value() == x);
  auto ev = dropout(g.constant(x), 0.3, nullptr);
  CHECK(ev.value() == x);

  Tensor<double> many({10000}, 1.0);
  auto d = dropout(g.constant(many), 0.3, &rng);
  double mean = 0.0;
  for (double v : d.value().values()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12));
    mean += v;
  }
  mean /= 10000.0;
  CHECK(std::abs(mean - 1.0) < 0.02);
  CHECK_THROWS_AS(dropout(g.constant(x), 1.0, &rng), Error);
}

TEST_CASE("dropout gradient with fixed mask") {
  Rng rng(19);
  std::vector<Tensor<double>> in = {random_tensor({30}, rng)};
  Tensor<double> wsum = random_tensor({30}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) {
    Rng mask(4);
    return weighted_sum(dropout(v[0], 0.3, &mask), wsum);
  });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("upsample_repeat and concat") {
  Graph<double> g;
  auto u = upsample_repeat(g.constant(Tensor<double>({1, 1, 1, 1, 1}, 2.5)));
  CHECK(u.shape() == Shape{1, 1, 2, 2, 2});
  for (double v : u.value().values()) CHECK(v == 2.5);

  Rng rng(23);
  std::vector<Tensor<double>> in = {random_tensor({2, 2, 2, 1, 3}, rng), random_tensor({2, 3, 4, 2, 6}, rng)};
  Tensor<double> wsum = random_tensor({2, 5, 4, 2, 6}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) {
    return weighted_sum(concat_channels(upsample_repeat(v[0]), v[1]), wsum);
  });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("softmax sums to one and differentiates") {
  Rng rng(29);
  Graph<double> g;
  auto s = softmax_channels(g.constant(random_tensor({2, 4, 3, 3, 3}, rng, 5.0)));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 27; ++i) {
      double t = 0.0;
      for (int k = 0; k < 4; ++k) t += s.value()[(n * 4 + k) * 27 + i];
      CHECK(std::abs(t - 1.0) < 1e-12);
    }
  std::vector<Tensor<double>> in = {random_tensor({2, 4, 2, 2, 2}, rng)};
  Tensor<double> wsum = random_tensor({2, 4, 2, 2, 2}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(softmax_channels(v[0]), wsum); });
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("add shares gradient and rejects mismatches") {
  Rng rng(31);
  std::vector<Tensor<double>> in = {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
  Tensor<double> wsum = random_tensor({2, 3}, rng);
  auto r = grad_check(in, [&](Graph<double>&, const auto& v) { return weighted_sum(add(v[0], v[0]), wsum); });
  CHECK(r.max_rel_error < 1e-4);
  Graph<double> g;
  CHECK_THROWS_AS(add(g.constant(Tensor<double>({2})), g.constant(Tensor<double>({3}))), Error);
}

TEST_CASE("linear, batch_norm and mse gradients") {
  Rng rng(37);
  std::vector<Tensor<double>> in = {random_tensor({6, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng),
                                    random_tensor({4}, rng), random_tensor({4}, rng)};
  Tensor<double> target = random_tensor({6, 4}, rng);
  for (bool training : {true, false}) {
    CAPTURE(training);
    auto r = grad_check(in, [&](Graph<double>&, const auto& v) {
      BatchNormStats stats;
      stats.mean = {0.1, -0.2, 0.3, 0.0};
      stats.var = {1.5, 0.5, 2.0, 1.0};
      return mse_loss(batch_norm(linear(v[0], v[1], v[2]), v[3], v[4], stats, training), target);
    });
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("batch_norm running statistics") {
  Graph<double> g;
  Tensor<double> x({4, 1}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  BatchNormStats stats;
  batch_norm(g.constant(x), g.constant(ones({1})), g.constant(Tensor<double>({1}, 0.0)), stats, true);
  CHECK(stats.mean[0] == doctest::Approx(0.25));
  CHECK(stats.var[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
}

TEST_CASE("gaussian noise is identity without an rng") {
  Graph<double> g;
  Tensor<double> x({5}, 2.0);
  CHECK(gaussian_noise(g.constant(x), 0.1, nullptr).value() == x);
  Rng rng(3);
  auto y = gaussian_noise(g.constant(Tensor<double>({20000}, 0.0)), 0.1, &rng);
  double q = 0.0;
  for (double v : y.value().values()) q += v * v;
  CHECK(std::sqrt(q / 20000.0) == doctest::Approx(0.1).epsilon(0.03));
}
