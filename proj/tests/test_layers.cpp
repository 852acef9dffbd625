#include <cmath>
#include <functional>

#include "doctest.h"
#include "haccn/layers.hpp"
#include "haccn/rng.hpp"

using namespace haccn;
using namespace haccn::layers;

namespace {

Tensor random_tensor(int c, int h, int w, Rng& rng) {
  Tensor t(c, h, w);
  for (auto& v : t.data) v = rng.normal(0.0, 1.0);
  return t;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, 0.5);
  return v;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// Central difference of f at x[i].
double numeric(std::vector<double>& x, std::size_t i, const std::function<double()>& f) {
  const double h = 1e-6, keep = x[i];
  x[i] = keep + h;
  const double up = f();
  x[i] = keep - h;
  const double dn = f();
  x[i] = keep;
  return (up - dn) / (2 * h);
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(1);
  ConvShape s{2, 3, 3};
  auto in = random_tensor(2, 5, 4, rng);
  auto w = random_vec(3 * 2 * 9, rng);
  auto b = random_vec(3, rng);
  auto out = conv2d(in, s, w, b);
  REQUIRE(out.channels == 3);
  REQUIRE(out.height == 5);
  REQUIRE(out.width == 4);
  for (int o = 0; o < 3; ++o)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 4; ++x) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = y + ky - 1, ix = x + kx - 1;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 4) continue;
              acc += w[((o * 2 + c) * 3 + ky) * 3 + kx] * in(c, iy, ix);
            }
        CHECK(out(o, y, x) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("conv2d backward against finite differences") {
  Rng rng(2);
  ConvShape s{3, 2, 3};
  auto in = random_tensor(3, 4, 5, rng);
  auto w = random_vec(2 * 3 * 9, rng);
  auto b = random_vec(2, rng);
  auto g = random_tensor(2, 4, 5, rng);
  auto loss = [&] { return dot(conv2d(in, s, w, b), g); };
  std::vector<double> dw(w.size()), db(b.size());
  auto dx = conv2d_backward(in, g, s, w, dw, db, true);
  for (std::size_t i = 0; i < w.size(); i += 5) CHECK(dw[i] == doctest::Approx(numeric(w, i, loss)).epsilon(1e-6));
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(db[i] == doctest::Approx(numeric(b, i, loss)).epsilon(1e-6));
  for (std::size_t i = 0; i < in.data.size(); i += 3) {
    CHECK(dx.data[i] == doctest::Approx(numeric(in.data, i, loss)).epsilon(1e-6));
  }
  // empty parameter spans: input gradient only
  auto dx2 = conv2d_backward(in, g, s, w, {}, {}, true);
  CHECK(dx2.data == dx.data);
}

TEST_CASE("1x1 conv is a per-pixel matrix product") {
  Rng rng(3);
  ConvShape s{2, 1, 1};
  auto in = random_tensor(2, 3, 3, rng);
  std::vector<double> w{2.0, -1.0}, b{0.5};
  auto out = conv2d(in, s, w, b);
  CHECK(out(0, 1, 2) == doctest::Approx(2 * in(0, 1, 2) - in(1, 1, 2) + 0.5));
}

TEST_CASE("maxpool picks the max and routes gradient") {
  Tensor t(1, 2, 4);
  t.data = {1, 5, 2, 0, 3, 4, 9, 1};
  auto p = maxpool2(t);
  CHECK(p.out.data == std::vector<double>{5, 9});
  Tensor d(1, 1, 2);
  d.data = {1.0, 2.0};
  auto back = maxpool2_backward(d, p.argmax, 2, 4);
  CHECK(back.data == std::vector<double>{0, 1, 0, 0, 0, 0, 2, 0});
}

TEST_CASE("bilinear upsampling values and adjoint") {
  Tensor t(1, 1, 2);
  t.data = {0.0, 4.0};
  auto u = upsample_bilinear(t, 2);
  // half-pixel centres: sources -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
  REQUIRE(u.height == 2);
  REQUIRE(u.width == 4);
  CHECK(std::vector<double>(u.data.begin(), u.data.begin() + 4) == std::vector<double>{0.0, 1.0, 3.0, 4.0});
  CHECK(std::vector<double>(u.data.begin() + 4, u.data.end()) == std::vector<double>{0.0, 1.0, 3.0, 4.0});

  Rng rng(4);
  auto x = random_tensor(2, 3, 4, rng);
  auto g = random_tensor(2, 12, 16, rng);
  // <up(x), g> == <x, up^T(g)>
  CHECK(dot(upsample_bilinear(x, 4), g) == doctest::Approx(dot(x, upsample_bilinear_backward(g, 4, 3, 4))));
  CHECK(upsample_bilinear(x, 1).data == x.data);
}

TEST_CASE("linear backward") {
  Rng rng(5);
  auto x = random_vec(4, rng);
  auto w = random_vec(12, rng);
  auto b = random_vec(3, rng);
  auto gy = random_vec(3, rng);
  auto loss = [&] {
    auto y = linear(x, 3, w, b);
    return y[0] * gy[0] + y[1] * gy[1] + y[2] * gy[2];
  };
  std::vector<double> dw(12), db(3);
  auto dx = linear_backward(x, gy, w, dw, db);
  for (std::size_t i = 0; i < 12; ++i) CHECK(dw[i] == doctest::Approx(numeric(w, i, loss)).epsilon(1e-6));
  for (std::size_t i = 0; i < 4; ++i) CHECK(dx[i] == doctest::Approx(numeric(x, i, loss)).epsilon(1e-6));
  CHECK(db == gy);
}

TEST_CASE("sigmoid is stable at the extremes") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(std::isfinite(sigmoid(-800.0)));
  CHECK(sigmoid(2.0) + sigmoid(-2.0) == doctest::Approx(1.0));
}

TEST_CASE("concat channels") {
  Tensor a(1, 2, 2, 1.0), b(2, 2, 2, 2.0);
  const Tensor* parts[] = {&a, &b};
  auto c = concat_channels(parts);
  CHECK(c.channels == 3);
  CHECK(c(0, 1, 1) == 1.0);
  CHECK(c(2, 0, 0) == 2.0);
  Tensor bad(1, 3, 2);
  const Tensor* mismatched[] = {&a, &bad};
  CHECK_THROWS(concat_channels(mismatched));
}

}
