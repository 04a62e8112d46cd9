#include <cstring>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "poisonforge/checkpoint.hpp"
#include "poisonforge/errors.hpp"
#include "poisonforge/models.hpp"
#include "poisonforge/ops.hpp"
#include "poisonforge/random.hpp"
#include "poisonforge/training.hpp"

namespace pf = poisonforge;

TEST_CASE("classifier shapes and feature tap") {
  pf::Rng rng(1);
  pf::ClassifierModel model({}, rng);
  pf::Tensor batch = rng.uniform_tensor({3, 1, 28, 28}, 0.0, 1.0);
  auto out = model.forward_all(batch);
  CHECK(out.logits.shape() == pf::Shape{3, 10});
  CHECK(out.features.shape() == pf::Shape{3, pf::ClassifierModel::kFeatureDim});
  for (float f : out.features.values()) CHECK(f >= 0.0f);  // post-ReLU
  CHECK_THROWS_AS(model.forward(rng.uniform_tensor({3, 1, 27, 27}, 0.0, 1.0)), pf::ShapeError);
}

TEST_CASE("generator output respects the epsilon budget") {
  pf::Rng rng(2);
  pf::GeneratorModel g({16, pf::Conditioning::image_conditioned, 0.1}, rng);
  auto z = rng.normal_tensor({4, 16});
  auto base = rng.uniform_tensor({4, 1, 28, 28}, 0.0, 1.0);
  auto delta = g.forward(z, base);
  CHECK(delta.shape() == pf::Shape{4, 1, 28, 28});
  for (float v : delta.values()) CHECK(std::abs(v) <= 0.1f + 1e-6f);
  CHECK_THROWS_AS(g.forward(z), pf::ConfigError);
  pf::GeneratorModel g2({16, pf::Conditioning::noise_only, 0.1}, rng);
  CHECK(g2.forward(z).shape() == pf::Shape{4, 1, 28, 28});
}

TEST_CASE("discriminator and autoencoder output ranges") {
  pf::Rng rng(3);
  pf::DiscriminatorModel d(rng);
  pf::AutoencoderModel ae({8}, rng);
  auto batch = rng.uniform_tensor({5, 1, 28, 28}, 0.0, 1.0);
  auto p = d.forward(batch);
  CHECK(p.shape() == pf::Shape{5, 1});
  for (float v : p.values()) CHECK((v > 0.0f && v < 1.0f));
  auto r = ae.forward(batch);
  CHECK(r.shape() == batch.shape());
  for (float v : r.values()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("frozen modules pass gradients to their inputs only") {
  pf::Rng rng(4);
  pf::ClassifierModel model({}, rng);
  model.set_frozen(true);
  pf::Tensor x = rng.uniform_tensor({2, 1, 28, 28}, 0.0, 1.0);
  x.set_requires_grad(true);
  pf::Tape tape;
  tape.backward(pf::ops::sum(model.extract_features(x)));
  CHECK(x.has_grad());
  for (const auto& p : model.parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("PFW1 round trip is bit exact") {
  pf::Rng rng(5);
  std::vector<pf::NamedTensor> tensors{{"a", rng.normal_tensor({3, 4})},
                                       {"bias/ü", pf::Tensor({2}, {-0.0f, 1e-30f})}};
  std::stringstream buf;
  pf::write_checkpoint(buf, tensors);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "PFW1");
  auto back = pf::read_checkpoint(buf);
  REQUIRE(back.size() == 2);
  CHECK(back[1].name == "bias/ü");
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(back[k].tensor.shape() == tensors[k].tensor.shape());
    CHECK(std::memcmp(back[k].tensor.values().data(), tensors[k].tensor.values().data(),
                      tensors[k].tensor.numel() * 4) == 0);
  }
}

TEST_CASE("truncated or foreign checkpoints are rejected") {
  std::stringstream bad("PFW2....");
  CHECK_THROWS_AS(pf::read_checkpoint(bad), pf::DataError);
  pf::Rng rng(6);
  std::stringstream buf;
  pf::write_checkpoint(buf, {{"w", rng.normal_tensor({10})}});
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(pf::read_checkpoint(cut), pf::DataError);
}

TEST_CASE("saved models reload with identical outputs") {
  const auto dir = pftest::scratch_dir("models");
  pf::Rng rng(7), other(8);
  pf::ClassifierModel a({}, rng), b({}, other);
  pf::save_model(a, dir / "m");
  pf::load_model_parameters(b, dir / "m");
  auto x = rng.uniform_tensor({2, 1, 28, 28}, 0.0, 1.0);
  auto ya = a.forward(x), yb = b.forward(x);
  for (std::size_t i = 0; i < ya.numel(); ++i) CHECK(ya.values()[i] == yb.values()[i]);
  pf::Rng r3(9);
  pf::DiscriminatorModel d(r3);
  CHECK_THROWS_AS(pf::load_model_parameters(d, dir / "m"), pf::Error);
}

TEST_CASE("classifier learns toy digits and training is reproducible") {
  const auto data = pftest::toy_digits(30, 1);
  pf::TrainRecipe recipe{3, 32, 2e-3};
  pf::TrainHistory h1, h2;
  auto m1 = pf::fit_classifier(data, recipe, 11, &h1);
  auto m2 = pf::fit_classifier(data, recipe, 11, &h2);
  CHECK(h1.epoch_loss == h2.epoch_loss);
  CHECK(h1.epoch_loss.back() < h1.epoch_loss.front());
  const auto pred = pf::predict_labels(m1, data.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  CHECK(static_cast<double>(correct) / pred.size() > 0.9);
  const auto p2 = pf::predict_labels(m2, data.images);
  CHECK(pred == p2);
}
