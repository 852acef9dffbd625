#include <cmath>

#include "doctest.h"
#include "haccn/evaluation.hpp"
#include "haccn/rng.hpp"

using namespace haccn;

namespace {

std::vector<CountResult> results(std::initializer_list<std::pair<double, double>> gp) {
  std::vector<CountResult> r;
  for (auto [g, p] : gp) r.push_back({"", g, p});
  return r;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("mae and mse by hand") {
  auto r = results({{10, 12}, {20, 16}});
  CHECK(mae(r) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(mse(r) == doctest::Approx(std::sqrt(10.0)).epsilon(1e-15));
  auto zero = results({{5, 5}, {0, 0}});
  CHECK(mae(zero) == 0.0);
  CHECK(mse(zero) == 0.0);
  CHECK_THROWS(mae(std::vector<CountResult>{}));
}

TEST_CASE("density level bins") {
  auto r = results({{0, 1}, {5, 5}, {12, 10}, {40, 50}, {100, 90}});
  const std::vector<double> edges{0, 10, 50};
  auto bins = density_level_report(r, edges);
  REQUIRE(bins.size() == 3);
  CHECK(bins[0].n_images == 2);
  CHECK(*bins[0].mae == doctest::Approx(0.5));
  CHECK(bins[1].n_images == 2);
  CHECK(*bins[1].mae == doctest::Approx(6.0));
  CHECK(bins[2].n_images == 1);
  CHECK(std::isinf(bins[2].hi));
  auto empty = density_level_report(results({{1, 1}}), edges);
  CHECK(!empty[2].mae);
  const std::vector<double> bad{0, 10, 10};
  CHECK_THROWS_AS(density_level_report(r, bad), InvalidArgument);
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Image img(1, 1, 3);
  img.data = {1, 2, 3};
  auto p = reflect_pad(img, 1, 6);
  CHECK(p.data == std::vector<double>{1, 2, 3, 2, 1, 2});
}

TEST_CASE("full image inference crops to the valid region") {
  ModelConfig c;
  c.channel_scale = 0.0625;
  HaCcn m(c);
  auto p = m.init_params(1);
  Rng rng(2);
  Image img(3, 50, 70);
  for (auto& v : img.data) v = rng.uniform();
  auto r = infer_full_image(m, p, img);
  CHECK(r.density.height == 13);
  CHECK(r.density.width == 18);
  CHECK(r.count == doctest::Approx(r.density.sum()));
  CHECK_THROWS_AS(infer_full_image(m, p, img, 48), InvalidArgument);
}

TEST_CASE("padding multiple does not change a translation-invariant count") {
  // With all weights zero the network is a function of its biases only, so
  // every output pixel is the same and the cropped count cannot depend on
  // how much padding was added.
  ModelConfig c;
  c.channel_scale = 0.0625;
  HaCcn m(c);
  auto p = m.init_params(1);
  for (auto& t : p.all()) {
    for (auto& v : t.values) v = t.name.ends_with(".bias") ? 0.1 : 0.0;
  }
  Rng rng(3);
  Image img(3, 40, 72);
  for (auto& v : img.data) v = rng.uniform();
  const double a = infer_full_image(m, p, img, 32).count;
  const double b = infer_full_image(m, p, img, 64).count;
  const double d = infer_full_image(m, p, img, 128).count;
  CHECK(a > 0.0);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK(a == doctest::Approx(d).epsilon(1e-12));
}

TEST_CASE("cross-dataset with identical parameters") {
  ModelConfig c;
  c.channel_scale = 0.0625;
  HaCcn m(c);
  auto p = m.init_params(4);
  Dataset d;
  Rng rng(1);
  for (int i = 0; i < 2; ++i) {
    Sample s{Image(3, 32, 32), {"x", 32, 32, {{3, 4}, {10, 11}}}};
    for (auto& v : s.image.data) v = rng.uniform();
    d.push_back(s);
  }
  auto ns_only = cross_dataset_eval(m, p, nullptr, nullptr, d);
  CHECK(!ns_only.mae.s);
  CHECK(!ns_only.mae.c);
  auto r = cross_dataset_eval(m, p, &m, &p, d);
  CHECK(*r.mae.c == 0.0);
  CHECK(*r.mse.c == 0.0);
  CHECK(*r.mae.s == r.mae.ns);
  CHECK(cross_dataset_to_json(r).find("\"C\"") != std::string::npos);
}

TEST_CASE("report json and csv") {
  auto r = results({{10, 12}, {20, 16}});
  const std::vector<double> edges{0, 15};
  auto rep = make_report(r, edges);
  auto j = report_to_json(rep, R"({"enable_sam": false})");
  CHECK(j.find("\"enable_sam\": false") != std::string::npos);
  auto csv = bins_to_csv(rep.per_bin);
  CHECK(csv == "bin_lo,bin_hi,n_images,mae\n0,15,1,2\n15,,1,4\n");
}

}
