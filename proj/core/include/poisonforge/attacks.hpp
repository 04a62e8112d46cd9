#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/errors.hpp"
#include "poisonforge/models.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge {

enum class AttackKind { deep_poison, patch, blend, feature_collision };
enum class DonorPairing { random, nearest_feature };
// non_saturating minimises -log D(x_p); minimax minimises log(1 - D(x_p)).
enum class GeneratorLoss { non_saturating, minimax };

std::string to_string(AttackKind kind);
std::string to_string(DonorPairing pairing);
std::string to_string(GeneratorLoss loss);
AttackKind attack_kind_from_string(const std::string& text);
DonorPairing donor_pairing_from_string(const std::string& text);
GeneratorLoss generator_loss_from_string(const std::string& text);

/// Row-major bitmap stamped at (top, left).
struct PatchSpec {
  std::size_t height = 2;
  std::size_t width = 4;
  std::vector<float> bitmap = std::vector<float>(8, 1.0f);
  std::size_t top = 25;
  std::size_t left = 23;

  static PatchSpec badnets();    // 2x4 white block, bottom-right
  static PatchSpec accessory();  // 7x3 glasses-like bitmap across the top
};

struct BlendSpec {
  std::size_t height = 16;
  std::size_t width = 11;
  std::vector<float> watermark;  // height*width; empty selects default_watermark()
  double opacity = 0.3;
};

// 16x11 outline face used as the blend watermark.
std::vector<float> default_watermark();

struct FeatureCollisionSpec {
  std::size_t steps = 100;
  double step_size = 0.02;
  double lambda = 1e-3;
  double opacity = 0.3;  // donor image blended into the start point; 0 starts from the base
};

struct AttackConfig {
  AttackKind kind = AttackKind::deep_poison;
  double alpha = 5.0;
  double beta = 1.0;
  double epsilon = 0.25;
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  DonorPairing pairing = DonorPairing::random;
  GeneratorLoss generator_loss = GeneratorLoss::non_saturating;
  Conditioning conditioning = Conditioning::image_conditioned;
  std::size_t noise_dim = 64;
  std::size_t patience = 3;  // epochs without an l_fe improvement before giving up
  PatchSpec patch;
  BlendSpec blend;
  FeatureCollisionSpec collision;
  std::uint64_t seed = 0;

  // Throws ConfigError on negative weights, non-positive epsilon, bad opacity.
  void validate() const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

struct LossBreakdown {
  double l_gan = 0.0;
  double l_fe = 0.0;
  double l_pert = 0.0;
  double total = 0.0;
  std::size_t step = 0;
};

void to_json(nlohmann::json& j, const LossBreakdown& l);

struct CraftResult {
  Tensor crafted_images;
  std::vector<std::size_t> source_indices;
  std::vector<std::size_t> donor_indices;
  std::vector<LossBreakdown> loss_history;
};

/// Raised when DeepPoison training diverges; keeps what was logged so far.
class AttackDivergence : public DivergenceError {
 public:
  AttackDivergence(const std::string& what, std::vector<LossBreakdown> history)
      : DivergenceError(what), history_(std::move(history)) {}
  const std::vector<LossBreakdown>& loss_history() const noexcept { return history_; }

 private:
  std::vector<LossBreakdown> history_;
};

Tensor craft_patch(const Tensor& base_images, const PatchSpec& patch);

Tensor craft_blend(const Tensor& base_images, const BlendSpec& blend);

// Bilinear resize of a row-major image.
std::vector<float> resize_bilinear(const std::vector<float>& image, std::size_t height,
                                   std::size_t width, std::size_t out_height,
                                   std::size_t out_width);

struct FeatureCollisionInit {
  Tensor donor_images;  // [N,1,H,W] blended into the bases before optimisation
  double opacity = 0.3;
};

// Forward-backward splitting: a gradient step on ||FE(x) - target||^2, then
// soft-thresholding of (x - base) by step_size*lambda, then projection onto
// the epsilon ball and [0,1].
Tensor craft_feature_collision(const Tensor& base_images, const std::vector<float>& donor_target,
                               const ClassifierModel& fe, const FeatureCollisionSpec& spec,
                               double epsilon,
                               const std::optional<FeatureCollisionInit>& init = std::nullopt);

struct DeepPoisonModels {
  GeneratorModel generator;
  DiscriminatorModel discriminator;
  std::vector<LossBreakdown> loss_history;
};

// Alternating D/G training against the frozen extractor.
DeepPoisonModels train_deep_poison_models(const AttackConfig& config, const Tensor& base_pool,
                                          const Tensor& donor_pool, const ClassifierModel& fe);

// One crafted image per entry of craft_rows (indices into base_pool). The
// noise and donor for a row depend only on the config seed and the row.
CraftResult craft_deep_poison(const GeneratorModel& generator, const AttackConfig& config,
                              const Tensor& base_pool, const Tensor& donor_pool,
                              const ClassifierModel& fe, const std::vector<std::size_t>& craft_rows);

struct DeepPoisonRun {
  GeneratorModel generator;
  DiscriminatorModel discriminator;
  CraftResult craft;
};

// Trains G and D on base_pool / donor_pool, then crafts one image per row in
// craft_rows (indices into base_pool). Indices in the result are pool rows.
DeepPoisonRun train_deep_poison(const AttackConfig& config, const Tensor& base_pool,
                                const Tensor& donor_pool, const ClassifierModel& fe,
                                const std::vector<std::size_t>& craft_rows);

// Nearest donor row (in FE space) for each base row.
std::vector<std::size_t> nearest_feature_pairs(const Tensor& base_features,
                                               const Tensor& donor_features);

}  // namespace poisonforge
