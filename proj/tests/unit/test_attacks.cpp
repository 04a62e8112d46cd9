#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "poisonforge/attacks.hpp"
#include "poisonforge/errors.hpp"
#include "poisonforge/random.hpp"
#include "poisonforge/training.hpp"

namespace pf = poisonforge;

namespace {

pf::Tensor grey(std::size_t n, float v) {
  return pf::Tensor({n, 1, 28, 28}, std::vector<float>(n * 784, v));
}

const pf::ClassifierModel& toy_extractor() {
  static pf::ClassifierModel model = [] {
    auto m = pf::fit_classifier(pftest::toy_digits(20, 9), {2, 32, 2e-3}, 3);
    m.set_frozen(true);
    return m;
  }();
  return model;
}

}  // namespace

TEST_CASE("BadNets patch stamps a white 2x4 block bottom-right") {
  const auto out = craft_patch(grey(2, 0.2f), pf::PatchSpec::badnets());
  const auto v = out.values();
  std::size_t white = 0;
  for (std::size_t i = 0; i < 784; ++i) {
    const std::size_t y = i / 28, x = i % 28;
    const bool inside = y >= 25 && y < 27 && x >= 23 && x < 27;
    CHECK(v[i] == (inside ? 1.0f : 0.2f));
    white += v[i] == 1.0f;
  }
  CHECK(white == 8);
  CHECK(v[784 + 25 * 28 + 23] == 1.0f);
}

TEST_CASE("patch placement outside the image is rejected") {
  pf::PatchSpec p;
  p.top = 27;
  CHECK_THROWS_AS(craft_patch(grey(1, 0.0f), p), pf::ShapeError);
  auto acc = pf::PatchSpec::accessory();
  CHECK(acc.bitmap.size() == acc.height * acc.width);
  CHECK_NOTHROW(craft_patch(grey(1, 0.0f), acc));
}

TEST_CASE("blend mixes the watermark at the given opacity") {
  pf::BlendSpec b;
  b.opacity = 0.25;
  const auto out = craft_blend(grey(1, 0.4f), b);
  const auto wm = pf::default_watermark();
  const std::size_t top = (28 - b.height) / 2, left = (28 - b.width) / 2;
  const auto v = out.values();
  CHECK(v[0] == doctest::Approx(0.4f));
  for (std::size_t y = 0; y < b.height; ++y) {
    for (std::size_t x = 0; x < b.width; ++x) {
      const double want = 0.75 * 0.4 + 0.25 * wm[y * b.width + x];
      CHECK(v[(top + y) * 28 + left + x] == doctest::Approx(want));
    }
  }
  b.opacity = 1.5;
  CHECK_THROWS_AS(craft_blend(grey(1, 0.4f), b), pf::ConfigError);
}

TEST_CASE("bilinear resize keeps constants and corners") {
  std::vector<float> img(12, 0.5f);
  for (float v : pf::resize_bilinear(img, 3, 4, 7, 9)) CHECK(v == doctest::Approx(0.5f));
  std::vector<float> ramp{0.0f, 1.0f, 2.0f, 3.0f};
  const auto up = pf::resize_bilinear(ramp, 2, 2, 3, 3);
  CHECK(up[0] == doctest::Approx(0.0f));
  CHECK(up[8] == doctest::Approx(3.0f));
}

TEST_CASE("attack config validation and JSON round trip") {
  pf::AttackConfig c;
  c.kind = pf::AttackKind::feature_collision;
  c.alpha = 2.5;
  c.collision.opacity = 0.1;
  nlohmann::json j = c;
  const auto back = j.get<pf::AttackConfig>();
  CHECK(back.kind == c.kind);
  CHECK(back.alpha == 2.5);
  CHECK(back.collision.opacity == 0.1);
  CHECK(nlohmann::json(back) == j);
  pf::AttackConfig bad;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), pf::ConfigError);
  bad = {};
  bad.alpha = -1;
  CHECK_THROWS_AS(bad.validate(), pf::ConfigError);
  CHECK(pf::attack_kind_from_string("badnets") == pf::AttackKind::patch);
  CHECK_THROWS_AS(pf::attack_kind_from_string("nope"), pf::ConfigError);
}

TEST_CASE("feature collision stays in budget and moves toward the target") {
  const auto& fe = toy_extractor();
  const auto data = pftest::toy_digits(4, 10);
  const auto bases = data.gather(data.indices_of_class(4));
  const auto donors = data.gather(data.indices_of_class(9));
  const auto df = pf::extract_features_batched(fe, donors);
  std::vector<float> target(df.dim(1), 0.0f);
  for (std::size_t i = 0; i < df.dim(0); ++i)
    for (std::size_t k = 0; k < target.size(); ++k) target[k] += df.values()[i * target.size() + k] / df.dim(0);
  auto distance = [&](const pf::Tensor& x) {
    const auto f = pf::extract_features_batched(fe, x);
    double s = 0;
    for (std::size_t i = 0; i < f.dim(0); ++i)
      for (std::size_t k = 0; k < target.size(); ++k) {
        const double d = f.values()[i * target.size() + k] - target[k];
        s += d * d;
      }
    return s;
  };
  pf::FeatureCollisionSpec spec;
  spec.steps = 40;
  const auto out = pf::craft_feature_collision(bases, target, fe, spec, 0.2);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK(std::abs(out.values()[i] - bases.values()[i]) <= 0.2f + 1e-6f);
    CHECK(out.values()[i] >= 0.0f);
    CHECK(out.values()[i] <= 1.0f);
  }
  CHECK(distance(out) < distance(bases));

  pf::ClassifierModel unfrozen = pf::fit_classifier(data, {1, 32, 1e-3}, 1);
  CHECK_THROWS_AS(pf::craft_feature_collision(bases, target, unfrozen, spec, 0.2), pf::ConfigError);
}

TEST_CASE("DeepPoison crafting: budget, determinism, per-row noise") {
  const auto& fe = toy_extractor();
  const auto data = pftest::toy_digits(24, 11);
  const auto base_pool = data.gather(data.indices_of_class(4));
  const auto donor_pool = data.gather(data.indices_of_class(9));
  pf::AttackConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.epsilon = 0.1;
  c.seed = 17;
  c.patience = 0;
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
  const auto run = pf::train_deep_poison(c, base_pool, donor_pool, fe, all);
  const auto again = pf::train_deep_poison(c, base_pool, donor_pool, fe, all);
  REQUIRE(run.craft.crafted_images.shape() == pf::Shape{8, 1, 28, 28});
  const auto v = run.craft.crafted_images.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float base = base_pool.values()[i];
    CHECK(std::abs(v[i] - base) <= 0.1f + 1e-6f);
    CHECK(v[i] == again.craft.crafted_images.values()[i]);
  }
  CHECK(run.craft.loss_history.size() == 2 * 3);  // 24 bases / batch 8, two epochs
  for (const auto& l : run.craft.loss_history) {
    CHECK(l.total == doctest::Approx(l.l_gan + c.alpha * l.l_fe + c.beta * l.l_pert));
    CHECK(l.l_gan <= 0.0);
  }
  const auto sub = pf::craft_deep_poison(run.generator, c, base_pool, donor_pool, fe, {2, 5});
  // Same noise and donor per row; batch shape only changes GEMM rounding.
  for (std::size_t k = 0; k < 784; ++k) {
    CHECK(sub.crafted_images.values()[k] == doctest::Approx(v[2 * 784 + k]).epsilon(1e-5));
    CHECK(sub.crafted_images.values()[784 + k] == doctest::Approx(v[5 * 784 + k]).epsilon(1e-5));
  }
  CHECK(sub.donor_indices[1] == run.craft.donor_indices[5]);
  CHECK_THROWS_AS(pf::craft_deep_poison(run.generator, c, base_pool, donor_pool, fe, {99}),
                  pf::ShapeError);
}

TEST_CASE("DeepPoison reports divergence with the partial loss history") {
  const auto& fe = toy_extractor();
  const auto data = pftest::toy_digits(16, 12);
  const auto base_pool = data.gather(data.indices_of_class(4));
  const auto donor_pool = data.gather(data.indices_of_class(9));
  pf::AttackConfig c;
  c.epochs = 8;
  c.batch_size = 16;
  c.lr_g = 1e-12;  // the generator cannot improve l_fe
  c.patience = 1;
  bool thrown = false;
  try {
    (void)pf::train_deep_poison_models(c, base_pool, donor_pool, fe);
  } catch (const pf::AttackDivergence& e) {
    thrown = true;
    CHECK_FALSE(e.loss_history().empty());
  }
  CHECK(thrown);
}

TEST_CASE("nearest feature pairing picks the closest donor") {
  pf::Tensor a({2, 2}, {0.0f, 0.0f, 5.0f, 5.0f});
  pf::Tensor b({3, 2}, {4.0f, 4.0f, 0.1f, 0.0f, 9.0f, 9.0f});
  CHECK(pf::nearest_feature_pairs(a, b) == std::vector<std::size_t>{1, 0});
}
