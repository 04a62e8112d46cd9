#include "poisonforge/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "poisonforge/ops.hpp"
#include "poisonforge/optim.hpp"
#include "poisonforge/random.hpp"
#include "poisonforge/training.hpp"

namespace poisonforge {

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::deep_poison: return "deep_poison";
    case AttackKind::patch: return "patch";
    case AttackKind::blend: return "blend";
    case AttackKind::feature_collision: return "feature_collision";
  }
  return "unknown";
}

std::string to_string(DonorPairing pairing) {
  return pairing == DonorPairing::random ? "random" : "nearest_feature";
}

std::string to_string(GeneratorLoss loss) {
  return loss == GeneratorLoss::non_saturating ? "non_saturating" : "minimax";
}

AttackKind attack_kind_from_string(const std::string& text) {
  for (auto k : {AttackKind::deep_poison, AttackKind::patch, AttackKind::blend,
                 AttackKind::feature_collision}) {
    if (to_string(k) == text) return k;
  }
  if (text == "badnets") return AttackKind::patch;
  if (text == "bis") return AttackKind::blend;
  if (text == "poisonfrog") return AttackKind::feature_collision;
  throw ConfigError("unknown attack kind '" + text + "'");
}

DonorPairing donor_pairing_from_string(const std::string& text) {
  if (text == "random") return DonorPairing::random;
  if (text == "nearest_feature") return DonorPairing::nearest_feature;
  throw ConfigError("unknown donor pairing '" + text + "'");
}

GeneratorLoss generator_loss_from_string(const std::string& text) {
  if (text == "non_saturating") return GeneratorLoss::non_saturating;
  if (text == "minimax") return GeneratorLoss::minimax;
  throw ConfigError("unknown generator loss '" + text + "'");
}

PatchSpec PatchSpec::badnets() { return PatchSpec{}; }

PatchSpec PatchSpec::accessory() {
  PatchSpec p;
  p.height = 3;
  p.width = 7;
  p.bitmap = {1, 1, 1, 0, 1, 1, 1,
              1, 0, 1, 1, 1, 0, 1,
              1, 1, 1, 0, 1, 1, 1};
  p.top = 1;
  p.left = 10;
  return p;
}

std::vector<float> default_watermark() {
  constexpr std::size_t h = 16, w = 11;
  std::vector<float> img(h * w, 0.0f);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = (r - cy) / (h / 2.0), dx = (c - cx) / (w / 2.0);
      const double d = std::sqrt(dy * dy + dx * dx);
      if (d > 0.78 && d <= 1.0) img[r * w + c] = 1.0f;
    }
  }
  for (std::size_t c : {3u, 7u}) img[5 * w + c] = 1.0f;  // eyes
  for (std::size_t c = 3; c <= 7; ++c) img[11 * w + c] = 1.0f;  // mouth
  img[10 * w + 2] = img[10 * w + 8] = 1.0f;
  return img;
}

void AttackConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("attack: alpha and beta must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("attack: epsilon must be > 0");
  if (!(blend.opacity >= 0.0 && blend.opacity <= 1.0)) {
    throw ConfigError("attack: opacity must lie in [0,1]");
  }
  if (!(collision.opacity >= 0.0 && collision.opacity <= 1.0)) {
    throw ConfigError("attack: collision opacity must lie in [0,1]");
  }
  if (batch_size == 0) throw ConfigError("attack: batch_size must be positive");
  if (!(lr_g > 0.0) || !(lr_d > 0.0)) throw ConfigError("attack: learning rates must be > 0");
  if (noise_dim == 0) throw ConfigError("attack: noise_dim must be positive");
  if (patch.bitmap.size() != patch.height * patch.width) {
    throw ConfigError("attack: patch bitmap size does not match its footprint");
  }
  if (!blend.watermark.empty() && blend.watermark.size() != blend.height * blend.width) {
    throw ConfigError("attack: watermark size does not match its footprint");
  }
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{
      {"kind", to_string(c.kind)},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"epsilon", c.epsilon},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr_g", c.lr_g},
      {"lr_d", c.lr_d},
      {"pairing", to_string(c.pairing)},
      {"generator_loss", to_string(c.generator_loss)},
      {"conditioning",
       c.conditioning == Conditioning::image_conditioned ? "image_conditioned" : "noise_only"},
      {"noise_dim", c.noise_dim},
      {"patience", c.patience},
      {"patch",
       {{"height", c.patch.height},
        {"width", c.patch.width},
        {"bitmap", c.patch.bitmap},
        {"top", c.patch.top},
        {"left", c.patch.left}}},
      {"blend",
       {{"height", c.blend.height},
        {"width", c.blend.width},
        {"watermark", c.blend.watermark},
        {"opacity", c.blend.opacity}}},
      {"collision",
       {{"steps", c.collision.steps},
        {"step_size", c.collision.step_size},
        {"lambda", c.collision.lambda},
        {"opacity", c.collision.opacity}}},
      {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c = d;
  if (j.contains("kind")) c.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_g = j.value("lr_g", d.lr_g);
  c.lr_d = j.value("lr_d", d.lr_d);
  if (j.contains("pairing")) c.pairing = donor_pairing_from_string(j.at("pairing"));
  if (j.contains("generator_loss")) {
    c.generator_loss = generator_loss_from_string(j.at("generator_loss"));
  }
  if (j.contains("conditioning")) {
    const auto mode = j.at("conditioning").get<std::string>();
    if (mode == "image_conditioned") c.conditioning = Conditioning::image_conditioned;
    else if (mode == "noise_only") c.conditioning = Conditioning::noise_only;
    else throw ConfigError("unknown conditioning '" + mode + "'");
  }
  c.noise_dim = j.value("noise_dim", d.noise_dim);
  c.patience = j.value("patience", d.patience);
  if (j.contains("patch")) {
    const auto& p = j.at("patch");
    c.patch.height = p.value("height", d.patch.height);
    c.patch.width = p.value("width", d.patch.width);
    c.patch.top = p.value("top", d.patch.top);
    c.patch.left = p.value("left", d.patch.left);
    c.patch.bitmap = p.contains("bitmap") ? p.at("bitmap").get<std::vector<float>>()
                                          : std::vector<float>(c.patch.height * c.patch.width, 1.0f);
  }
  if (j.contains("blend")) {
    const auto& b = j.at("blend");
    c.blend.height = b.value("height", d.blend.height);
    c.blend.width = b.value("width", d.blend.width);
    c.blend.opacity = b.value("opacity", d.blend.opacity);
    c.blend.watermark = b.value("watermark", std::vector<float>{});
  }
  if (j.contains("collision")) {
    const auto& f = j.at("collision");
    c.collision.steps = f.value("steps", d.collision.steps);
    c.collision.step_size = f.value("step_size", d.collision.step_size);
    c.collision.lambda = f.value("lambda", d.collision.lambda);
    c.collision.opacity = f.value("opacity", d.collision.opacity);
  }
  c.seed = j.value("seed", d.seed);
  c.validate();
}

void to_json(nlohmann::json& j, const LossBreakdown& l) {
  j = nlohmann::json{{"step", l.step}, {"l_gan", l.l_gan}, {"l_fe", l.l_fe},
                     {"l_pert", l.l_pert}, {"total", l.total}};
}

namespace {

void require_images(const Tensor& images, const char* who) {
  if (!images.defined() || images.rank() != 4 || images.dim(1) != 1) {
    throw ShapeError(std::string(who) + ": expected [N,1,H,W] images");
  }
}

void require_frozen(const ClassifierModel& fe, const char* who) {
  if (!fe.frozen()) throw ConfigError(std::string(who) + ": feature extractor must be frozen");
}

}  // namespace

Tensor craft_patch(const Tensor& base_images, const PatchSpec& patch) {
  require_images(base_images, "craft_patch");
  const std::size_t n = base_images.dim(0), h = base_images.dim(2), w = base_images.dim(3);
  if (patch.bitmap.size() != patch.height * patch.width) {
    throw ShapeError("craft_patch: bitmap has " + std::to_string(patch.bitmap.size()) +
                     " values for a " + std::to_string(patch.height) + "x" +
                     std::to_string(patch.width) + " footprint");
  }
  if (patch.top + patch.height > h || patch.left + patch.width > w) {
    throw ShapeError("craft_patch: patch " + std::to_string(patch.height) + "x" +
                     std::to_string(patch.width) + " at (" + std::to_string(patch.top) + "," +
                     std::to_string(patch.left) + ") exceeds " + std::to_string(h) + "x" +
                     std::to_string(w) + " image");
  }
  Tensor out = base_images.detach().clone();
  auto v = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < patch.height; ++r) {
      for (std::size_t c = 0; c < patch.width; ++c) {
        v[(i * h + patch.top + r) * w + patch.left + c] = patch.bitmap[r * patch.width + c];
      }
    }
  }
  return out;
}

std::vector<float> resize_bilinear(const std::vector<float>& image, std::size_t height,
                                   std::size_t width, std::size_t out_height,
                                   std::size_t out_width) {
  if (image.size() != height * width || height == 0 || width == 0) {
    throw ShapeError("resize_bilinear: image size does not match its dimensions");
  }
  if (height == out_height && width == out_width) return image;
  std::vector<float> out(out_height * out_width);
  for (std::size_t r = 0; r < out_height; ++r) {
    const double y = std::clamp((r + 0.5) * height / out_height - 0.5, 0.0, height - 1.0);
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double fy = y - y0;
    for (std::size_t c = 0; c < out_width; ++c) {
      const double x = std::clamp((c + 0.5) * width / out_width - 0.5, 0.0, width - 1.0);
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double fx = x - x0;
      const double top = image[y0 * width + x0] * (1 - fx) + image[y0 * width + x1] * fx;
      const double bottom = image[y1 * width + x0] * (1 - fx) + image[y1 * width + x1] * fx;
      out[r * out_width + c] = static_cast<float>(top * (1 - fy) + bottom * fy);
    }
  }
  return out;
}

Tensor craft_blend(const Tensor& base_images, const BlendSpec& blend) {
  require_images(base_images, "craft_blend");
  if (!(blend.opacity >= 0.0 && blend.opacity <= 1.0)) {
    throw ConfigError("craft_blend: opacity must lie in [0,1]");
  }
  const std::size_t n = base_images.dim(0), h = base_images.dim(2), w = base_images.dim(3);
  if (blend.height > h || blend.width > w) {
    throw ShapeError("craft_blend: watermark footprint larger than the image");
  }
  const std::vector<float> mark =
      blend.watermark.empty()
          ? resize_bilinear(default_watermark(), 16, 11, blend.height, blend.width)
          : blend.watermark;
  if (mark.size() != blend.height * blend.width) {
    throw ShapeError("craft_blend: watermark size does not match its footprint");
  }
  const std::size_t top = (h - blend.height) / 2, left = (w - blend.width) / 2;
  const double op = blend.opacity;
  Tensor out = base_images.detach().clone();
  auto v = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < blend.height; ++r) {
      for (std::size_t c = 0; c < blend.width; ++c) {
        float& px = v[(i * h + top + r) * w + left + c];
        const double mixed = (1.0 - op) * px + op * mark[r * blend.width + c];
        px = static_cast<float>(std::clamp(mixed, 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor craft_feature_collision(const Tensor& base_images, const std::vector<float>& donor_target,
                               const ClassifierModel& fe, const FeatureCollisionSpec& spec,
                               double epsilon, const std::optional<FeatureCollisionInit>& init) {
  require_images(base_images, "craft_feature_collision");
  require_frozen(fe, "craft_feature_collision");
  if (donor_target.size() != fe.feature_dim()) {
    throw ShapeError("craft_feature_collision: target has " + std::to_string(donor_target.size()) +
                     " features, extractor produces " + std::to_string(fe.feature_dim()));
  }
  if (!(epsilon > 0.0)) throw ConfigError("craft_feature_collision: epsilon must be > 0");
  const std::size_t n = base_images.dim(0);
  const std::size_t pixels = base_images.numel() / n;
  const auto base = base_images.values();

  std::vector<float> x(base.begin(), base.end());
  auto project = [&](std::size_t i) {
    const float eps = static_cast<float>(epsilon);
    x[i] = std::clamp(std::clamp(x[i], base[i] - eps, base[i] + eps), 0.0f, 1.0f);
  };
  if (init) {
    if (init->donor_images.shape() != base_images.shape()) {
      throw ShapeError("craft_feature_collision: init images must match the bases");
    }
    const auto d = init->donor_images.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = static_cast<float>((1.0 - init->opacity) * base[i] + init->opacity * d[i]);
      project(i);
    }
  }
  const float shrink = static_cast<float>(spec.step_size * spec.lambda);
  const float step = static_cast<float>(spec.step_size);
  std::vector<float> target_rows;
  for (std::size_t step_index = 0; step_index < spec.steps; ++step_index) {
    for (std::size_t start = 0; start < n; start += 256) {
      const std::size_t count = std::min<std::size_t>(256, n - start);
      const std::size_t offset = start * pixels;
      Shape shape = base_images.shape();
      shape[0] = count;
      Tensor xp(shape, std::vector<float>(x.begin() + offset, x.begin() + offset + count * pixels),
                true);
      target_rows.resize(count * donor_target.size());
      for (std::size_t r = 0; r < count; ++r) {
        std::copy(donor_target.begin(), donor_target.end(),
                  target_rows.begin() + r * donor_target.size());
      }
      const Tensor target({count, donor_target.size()}, target_rows);
      Tape tape;
      Tensor loss;
      try {
        loss = ops::l2_loss(fe.extract_features(xp), target, ops::Reduction::sum);
        tape.backward(loss);
      } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << "craft_feature_collision: non-finite loss at step " << step_index << ", rows "
            << start << ".." << start + count << ": " << e.what();
        throw NumericError(msg.str());
      }
      const auto g = xp.grad();
      for (std::size_t k = 0; k < count * pixels; ++k) {
        const std::size_t i = offset + k;
        float delta = x[i] - step * g[k] - base[i];
        const float mag = std::max(std::abs(delta) - shrink, 0.0f);
        delta = std::copysign(mag, delta);
        x[i] = base[i] + delta;
        project(i);
      }
    }
  }
  return Tensor(base_images.shape(), std::move(x));
}

std::vector<std::size_t> nearest_feature_pairs(const Tensor& base_features,
                                               const Tensor& donor_features) {
  if (base_features.rank() != 2 || donor_features.rank() != 2 ||
      base_features.dim(1) != donor_features.dim(1)) {
    throw ShapeError("nearest_feature_pairs: feature matrices must be [N,F] with equal F");
  }
  const std::size_t nb = base_features.dim(0), nd = donor_features.dim(0),
                    f = base_features.dim(1);
  const auto a = base_features.values();
  const auto b = donor_features.values();
  std::vector<std::size_t> best(nb, 0);
  for (std::size_t i = 0; i < nb; ++i) {
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nd; ++j) {
      float d = 0.0f;
      for (std::size_t k = 0; k < f; ++k) {
        const float diff = a[i * f + k] - b[j * f + k];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best[i] = j;
      }
    }
  }
  return best;
}

namespace {

Tensor gather_rows(const Tensor& pool, std::span<const std::size_t> rows) {
  const std::size_t row = pool.numel() / pool.dim(0);
  Shape shape = pool.shape();
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * row);
  const auto v = pool.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return Tensor(std::move(shape), std::move(out));
}

double mean_log(std::span<const float> p, bool complement) {
  double s = 0.0;
  for (float v : p) {
    const double q = std::clamp(static_cast<double>(v), 1e-7, 1.0 - 1e-7);
    s += std::log(complement ? 1.0 - q : q);
  }
  return s / static_cast<double>(p.size());
}

Tensor perturbed(const GeneratorModel& g, const Tensor& z, const Tensor& base) {
  const Tensor delta = g.forward(z, base);
  return ops::clip(ops::add(base, delta), 0.0f, 1.0f);
}

}  // namespace

DeepPoisonModels train_deep_poison_models(const AttackConfig& config, const Tensor& base_pool,
                                          const Tensor& donor_pool, const ClassifierModel& fe) {
  config.validate();
  require_frozen(fe, "train_deep_poison");
  require_image_batch(base_pool, 28, "train_deep_poison base_pool");
  require_image_batch(donor_pool, 28, "train_deep_poison donor_pool");
  const std::size_t nb = base_pool.dim(0), nd = donor_pool.dim(0);

  Rng init(config.seed, "deep-poison-init");
  GeneratorModel generator(GeneratorConfig{config.noise_dim, config.conditioning, config.epsilon},
                           init);
  DiscriminatorModel discriminator(init);
  Adam opt_g(config.lr_g, 0.5, 0.999);
  Adam opt_d(config.lr_d, 0.5, 0.999);
  Rng rng(config.seed, "deep-poison-train");

  const Tensor donor_features = extract_features_batched(fe, donor_pool);
  std::vector<std::size_t> nearest;
  if (config.pairing == DonorPairing::nearest_feature) {
    nearest = nearest_feature_pairs(extract_features_batched(fe, base_pool), donor_features);
  }

  const float alpha = static_cast<float>(config.alpha), beta = static_cast<float>(config.beta);
  std::vector<LossBreakdown> history;
  double best_fe = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(nb);
    double epoch_fe = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < nb; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, nb - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      std::vector<std::size_t> donors(count);
      for (std::size_t i = 0; i < count; ++i) {
        donors[i] = nearest.empty() ? rng.index(nd) : nearest[rows[i]];
      }
      const Tensor x_be = gather_rows(base_pool, rows);
      const Tensor f_poi = gather_rows(donor_features, donors);
      const Tensor z = rng.normal_tensor({count, config.noise_dim});
      const Tensor ones = Tensor::full({count, 1}, 1.0f);
      const Tensor zeros = Tensor::zeros({count, 1});

      LossBreakdown entry;
      try {
        Tape g_tape;
        const Tensor x_p = perturbed(generator, z, x_be);
        {
          // D-step: maximise log D(x_be) + log(1 - D(x_p)).
          Tape d_tape;
          const Tensor d_loss = ops::add(ops::bce_loss(discriminator.forward(x_be), ones),
                                         ops::bce_loss(discriminator.forward(x_p.detach()), zeros));
          d_tape.backward(d_loss);
          opt_d.step(discriminator.parameters());
        }
        const Tensor d_fake = discriminator.forward(x_p);
        const Tensor adv = config.generator_loss == GeneratorLoss::non_saturating
                               ? ops::bce_loss(d_fake, ones)
                               : ops::scale(ops::bce_loss(d_fake, zeros), -1.0f);
        const Tensor l_fe = ops::l2_loss(fe.extract_features(x_p), f_poi, ops::Reduction::mean);
        const Tensor l_pert = ops::l1_loss(x_be, x_p, ops::Reduction::mean);
        const Tensor g_loss =
            ops::add(adv, ops::add(ops::scale(l_fe, alpha), ops::scale(l_pert, beta)));
        g_tape.backward(g_loss);
        opt_g.step(generator.parameters());
        zero_grads(discriminator.parameters());

        std::vector<float> real_scores;
        {
          NoGrad guard;
          const auto r = discriminator.forward(x_be).values();
          real_scores.assign(r.begin(), r.end());
        }
        entry.l_gan = mean_log(real_scores, false) + mean_log(d_fake.values(), true);
        entry.l_fe = l_fe.item();
        entry.l_pert = l_pert.item();
      } catch (const NumericError& e) {
        throw AttackDivergence("deep_poison: non-finite value at step " + std::to_string(step) +
                                   " (epoch " + std::to_string(epoch) + "): " + e.what(),
                               history);
      }
      entry.total = entry.l_gan + config.alpha * entry.l_fe + config.beta * entry.l_pert;
      entry.step = step++;
      if (!std::isfinite(entry.total)) {
        throw AttackDivergence("deep_poison: non-finite total loss at step " +
                                   std::to_string(entry.step),
                               history);
      }
      history.push_back(entry);
      epoch_fe += entry.l_fe;
      ++epoch_steps;
    }
    epoch_fe /= static_cast<double>(epoch_steps);
    if (epoch_fe < best_fe) {
      best_fe = epoch_fe;
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      throw AttackDivergence("deep_poison: l_fe has not improved for " +
                                 std::to_string(stale) + " epochs (best " +
                                 std::to_string(best_fe) + ")",
                             history);
    }
  }
  return DeepPoisonModels{std::move(generator), std::move(discriminator), std::move(history)};
}

CraftResult craft_deep_poison(const GeneratorModel& generator, const AttackConfig& config,
                              const Tensor& base_pool, const Tensor& donor_pool,
                              const ClassifierModel& fe, const std::vector<std::size_t>& craft_rows) {
  require_image_batch(base_pool, 28, "craft_deep_poison base_pool");
  require_image_batch(donor_pool, 28, "craft_deep_poison donor_pool");
  const std::size_t nb = base_pool.dim(0), nd = donor_pool.dim(0);
  for (auto r : craft_rows) {
    if (r >= nb) throw ShapeError("craft_deep_poison: craft row outside the base pool");
  }
  const std::size_t dim = generator.config().noise_dim;
  CraftResult craft;
  craft.source_indices = craft_rows;
  craft.donor_indices.resize(craft_rows.size());
  if (craft_rows.empty()) return craft;

  std::vector<std::size_t> nearest;
  if (config.pairing == DonorPairing::nearest_feature) {
    const Tensor bases = gather_rows(base_pool, craft_rows);
    nearest = nearest_feature_pairs(extract_features_batched(fe, bases),
                                    extract_features_batched(fe, donor_pool));
  }
  // Noise and donor for a row depend only on (seed, row), so crafting a subset
  // of rows reproduces the matching rows of a full-pool craft.
  const std::uint64_t craft_seed = derive_seed(config.seed, "deep-poison-craft");
  std::vector<float> noise(craft_rows.size() * dim);
  for (std::size_t i = 0; i < craft_rows.size(); ++i) {
    Rng row_rng(craft_seed, std::to_string(craft_rows[i]));
    for (std::size_t k = 0; k < dim; ++k) noise[i * dim + k] = static_cast<float>(row_rng.normal());
    craft.donor_indices[i] = nearest.empty() ? row_rng.index(nd) : nearest[i];
  }

  std::vector<float> crafted;
  crafted.reserve(craft_rows.size() * 784);
  NoGrad guard;
  for (std::size_t start = 0; start < craft_rows.size(); start += 256) {
    const std::size_t count = std::min<std::size_t>(256, craft_rows.size() - start);
    const std::span<const std::size_t> rows(craft_rows.data() + start, count);
    const Tensor z({count, dim}, std::vector<float>(noise.begin() + start * dim,
                                                    noise.begin() + (start + count) * dim));
    const Tensor x_p = perturbed(generator, z, gather_rows(base_pool, rows));
    crafted.insert(crafted.end(), x_p.values().begin(), x_p.values().end());
  }
  craft.crafted_images = Tensor({craft_rows.size(), 1, 28, 28}, std::move(crafted));
  return craft;
}

DeepPoisonRun train_deep_poison(const AttackConfig& config, const Tensor& base_pool,
                                const Tensor& donor_pool, const ClassifierModel& fe,
                                const std::vector<std::size_t>& craft_rows) {
  auto models = train_deep_poison_models(config, base_pool, donor_pool, fe);
  CraftResult craft =
      craft_deep_poison(models.generator, config, base_pool, donor_pool, fe, craft_rows);
  craft.loss_history = std::move(models.loss_history);
  return DeepPoisonRun{std::move(models.generator), std::move(models.discriminator),
                       std::move(craft)};
}

}  // namespace poisonforge
