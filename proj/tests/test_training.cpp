#include <cmath>
#include <limits>

#include "doctest.h"
#include "haccn/synth.hpp"
#include "haccn/training.hpp"

using namespace haccn;

namespace {

Dataset small_set(int n, int size, std::uint64_t seed) {
  auto spec = synth::preset_spec(synth::Preset::kSource, size);
  return synth::generate_dataset_in_memory(n, spec, seed);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("density loss is the pixel sum of squares") {
  DensityMap a(1, 3), b(1, 3);
  a.values = {0.5, 0.0, 1.0};
  b.values = {0.0, 0.25, 1.0};
  auto l = density_loss(a, b);
  CHECK(l.value == doctest::Approx(0.25 + 0.0625));
  CHECK(l.grad.data == std::vector<double>{1.0, -0.5, 0.0});
  auto u = density_loss(a, b, false);
  CHECK(u.value == doctest::Approx(std::sqrt(0.3125)));
  DensityMap c(2, 3);
  CHECK_THROWS_AS(density_loss(a, c), ShapeError);
  std::vector<DensityMap> p{a, a}, g{b, a};
  CHECK(density_loss(p, g) == doctest::Approx(0.3125 / 2));
}

TEST_CASE("segmentation loss matches a direct BCE") {
  Tensor z(1, 1, 4);
  z.data = {-3.0, 0.0, 0.7, 40.0};
  SegmentationMask m{1, 4, 4, {0, 1, 1, 0}};
  auto l = segmentation_loss(z, m);
  double ref = 0.0;
  for (int i = 0; i < 4; ++i) {
    // -log sigmoid(z) = log(1 + e^-z), -log(1 - sigmoid(z)) = z + log(1 + e^-z)
    const double zi = z.data[i];
    ref += m.values[i] ? std::log1p(std::exp(-zi)) : zi + std::log1p(std::exp(-zi));
  }
  ref /= 4;
  CHECK(l.value == doctest::Approx(ref).epsilon(1e-9));
  CHECK(l.grad.data[1] == doctest::Approx((0.5 - 1.0) / 4));
}

TEST_CASE("total loss adds the weighted segmentation term") {
  DensityMap a(1, 2), b(1, 2);
  a.values = {1, 0};
  Tensor z(1, 1, 2, 0.0);
  SegmentationMask m{1, 2, 1, {1, 0}};
  CHECK(total_loss(a, b, z, m, 0.0) == doctest::Approx(1.0));
  CHECK(total_loss(a, b, z, m, 2.0) == doctest::Approx(1.0 + 2.0 * std::log(2.0)));
}

TEST_CASE("config file parsing") {
  auto c = parse_train_config("# toy run\nlearning_rate = 1e-3\n  batch_size=4  # inline\nflip = false\n\n");
  CHECK(c.learning_rate == 1e-3);
  CHECK(c.batch_size == 4);
  CHECK(!c.flip);
  CHECK(c.patch_size == 224);
  CHECK(c.patches_per_image == 9);
  CHECK(c.val_fraction == doctest::Approx(0.1));
  CHECK(parse_train_config(format_train_config(c)).learning_rate == c.learning_rate);
  CHECK_THROWS_AS(parse_train_config("lr = 1"), InvalidArgument);
  CHECK_THROWS_AS(parse_train_config("batch_size = four"), InvalidArgument);
  CHECK_THROWS_AS(parse_train_config("learning_rate = -1"), InvalidArgument);
  CHECK_THROWS_AS(parse_train_config("patch_size = 100"), InvalidArgument);
  CHECK_THROWS_AS(parse_train_config("no equals sign"), InvalidArgument);
}

TEST_CASE("patch supervision matches the window count") {
  auto data = small_set(4, 96, 1);
  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.patches_per_image = 9;
  Rng rng(3);
  auto patches = make_training_patches(data, cfg, rng);
  REQUIRE(patches.size() == 36);
  int flipped = 0;
  for (const auto& p : patches) {
    CHECK(p.image.height == 64);
    CHECK(p.density.height == 16);
    CHECK(p.mask.width == 16);
    CHECK(std::abs(p.density.sum() - p.window_count) <= 1e-9);
    flipped += p.flipped;
  }
  CHECK(flipped > 0);
  CHECK(flipped < 36);
}

TEST_CASE("patches are seeded") {
  auto data = small_set(2, 96, 2);
  TrainConfig cfg;
  cfg.patch_size = 64;
  Rng a(9), b(9);
  auto pa = make_training_patches(data, cfg, a);
  auto pb = make_training_patches(data, cfg, b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].y0 == pb[i].y0);
    CHECK(pa[i].x0 == pb[i].x0);
    CHECK(pa[i].flipped == pb[i].flipped);
    CHECK(pa[i].image.data == pb[i].image.data);
  }
}

TEST_CASE("flip commutes with patch extraction") {
  auto data = small_set(1, 64, 4);
  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.patches_per_image = 1;
  cfg.noise_std = 0.0;
  cfg.flip = false;
  Rng r1(1);
  auto plain = make_training_patches(data, cfg, r1)[0];
  cfg.flip = true;
  bool saw_flip = false;
  for (std::uint64_t seed = 0; seed < 8 && !saw_flip; ++seed) {
    Rng r3(seed);
    auto p = make_training_patches(data, cfg, r3)[0];
    if (!p.flipped) continue;
    saw_flip = true;
    CHECK(p.density.sum() == doctest::Approx(plain.density.sum()));
    auto back = flip_horizontal(p.density);
    for (std::size_t i = 0; i < back.values.size(); ++i) CHECK(back.values[i] == doctest::Approx(plain.density.values[i]));
    CHECK(p.image(0, 5, 0) == plain.image(0, 5, 63));
  }
  CHECK(saw_flip);
}

TEST_CASE("noise touches the image only") {
  auto data = small_set(1, 64, 5);
  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.patches_per_image = 1;
  cfg.flip = false;
  cfg.noise_std = 0.0;
  Rng a(1);
  auto clean = make_training_patches(data, cfg, a)[0];
  cfg.noise_std = 0.05;
  Rng b(1);
  auto noisy = make_training_patches(data, cfg, b)[0];
  CHECK(clean.density.values == noisy.density.values);
  CHECK(clean.image.data != noisy.image.data);
}

TEST_CASE("small images are zero padded to the patch size") {
  auto data = small_set(1, 32, 6);
  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.patches_per_image = 2;
  Rng rng(0);
  auto p = make_training_patches(data, cfg, rng);
  CHECK(p[0].image.height == 64);
  CHECK(p[0].density.sum() == doctest::Approx(static_cast<double>(data[0].count())));
}

TEST_CASE("multi-scale patches regenerate their density") {
  auto data = small_set(3, 96, 7);
  TrainConfig cfg;
  cfg.patch_size = 64;
  cfg.patches_per_image = 6;
  const std::vector<double> scales{0.5, 0.75, 1.0};
  Rng rng(2);
  auto p = make_multiscale_patches(data, cfg, rng, scales);
  for (const auto& s : p) {
    CHECK(s.image.height == 64);
    CHECK(std::abs(s.density.sum() - s.window_count) <= 1e-9);
  }
}

TEST_CASE("adam step oracle") {
  NetworkParams p;
  p.add("w", ParamGroup::kFusion, {2});
  p[0].values = {1.0, -2.0};
  Gradients g(p);
  g.values[0] = {0.5, -0.1};
  Adam adam(p, 0.1, 0.9, 0.999);
  adam.step(p, g, GroupSet{ParamGroup::kFusion});
  // first bias-corrected step moves each weight by lr * sign(g)
  CHECK(p[0].values[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[0].values[1] == doctest::Approx(-1.9).epsilon(1e-6));
  adam.step(p, g, GroupSet{ParamGroup::kBackbone});
  CHECK(p[0].values[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("zero iterations return the initialisation") {
  ModelConfig mc;
  mc.channel_scale = 0.0625;
  mc.input_size = 64;
  TrainConfig tc;
  tc.iterations = 0;
  tc.patch_size = 64;
  tc.seed = 4;
  auto r = train(mc, tc, small_set(2, 64, 1));
  CHECK(r.params.checksum() == HaCcn(mc).init_params(4).checksum());
  CHECK(r.history.empty());
}

TEST_CASE("fit changes only trainable groups and logs every step") {
  ModelConfig mc;
  mc.channel_scale = 0.0625;
  mc.input_size = 64;
  HaCcn model(mc);
  auto init = model.init_params(1);
  TrainConfig tc;
  tc.iterations = 3;
  tc.patch_size = 64;
  tc.patches_per_image = 1;
  Rng rng(0);
  auto samples = make_training_patches(small_set(2, 64, 3), tc, rng);
  GroupSet trainable{ParamGroup::kFusion, ParamGroup::kBranchBlocks};
  auto r = fit(model, init, samples, tc, trainable);
  CHECK(r.history.size() == 3);
  GroupSet frozen = GroupSet::all();
  frozen.erase(ParamGroup::kFusion);
  frozen.erase(ParamGroup::kBranchBlocks);
  CHECK(r.params.checksum(frozen) == init.checksum(frozen));
  CHECK(r.params.checksum(trainable) != init.checksum(trainable));
  auto csv = history_to_csv(r.history);
  CHECK(csv.rfind("iteration,density_loss,seg_loss,total_loss,val_mae\n", 0) == 0);
}

TEST_CASE("non-finite loss raises Diverged") {
  ModelConfig mc;
  mc.channel_scale = 0.0625;
  mc.input_size = 64;
  HaCcn model(mc);
  TrainConfig tc;
  tc.iterations = 2;
  tc.patch_size = 64;
  tc.patches_per_image = 1;
  Rng rng(0);
  auto samples = make_training_patches(small_set(1, 64, 3), tc, rng);
  samples[0].density.values[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit(model, model.init_params(0), samples, tc, GroupSet::all()), Diverged);
}

TEST_CASE("validation split sizes") {
  auto data = small_set(20, 32, 1);
  auto [tr, va] = split_validation(data, 0.1, 3);
  CHECK(tr.size() == 18);
  CHECK(va.size() == 2);
  auto [tr2, va2] = split_validation(data, 0.1, 3);
  CHECK(va2[0].ann.image_id == va[0].ann.image_id);
}

}
