#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/checkpoint.hpp"
#include "poisonforge/random.hpp"
#include "poisonforge/tensor.hpp"

namespace poisonforge {

/// Owns a flat, named list of trainable tensors.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = default;
  Module& operator=(Module&&) = default;
  virtual ~Module() = default;

  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  std::vector<NamedTensor> named_parameters() const;

  // Frozen modules stop requiring grad; gradients still flow through them to
  // their inputs.
  void set_frozen(bool frozen);
  bool frozen() const noexcept { return frozen_; }

  // Copies values by name; every parameter must be present with a matching shape.
  void load_parameters(const std::vector<NamedTensor>& tensors);

  virtual std::string kind() const = 0;
  virtual nlohmann::json architecture() const = 0;

 protected:
  Tensor add_parameter(std::string name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                       Rng& rng);
  Tensor add_bias(std::string name, std::size_t size);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  bool frozen_ = false;
};

// Writes <stem>.pfw (parameters) and <stem>.json (architecture sidecar).
void save_model(const Module& model, const std::filesystem::path& stem);
void load_model_parameters(Module& model, const std::filesystem::path& stem);

struct ClassifierConfig {
  std::size_t num_classes = 10;
  std::size_t image_size = 28;
};

/// LeNet-style classifier: conv 6@5x5 -> pool -> conv 16@5x5 -> pool ->
/// dense 120 -> dense 84 -> dense num_classes. The post-ReLU 84-unit layer is
/// the feature extractor.
class ClassifierModel : public Module {
 public:
  static constexpr std::size_t kFeatureDim = 84;

  ClassifierModel(ClassifierConfig config, Rng& rng);

  struct Outputs {
    Tensor features;
    Tensor logits;
  };
  Outputs forward_all(const Tensor& batch) const;
  Tensor forward(const Tensor& batch) const { return forward_all(batch).logits; }
  Tensor extract_features(const Tensor& batch) const;

  std::size_t feature_dim() const noexcept { return kFeatureDim; }
  std::size_t num_classes() const noexcept { return config_.num_classes; }
  const ClassifierConfig& config() const noexcept { return config_; }

  std::string kind() const override { return "classifier"; }
  nlohmann::json architecture() const override;

 private:
  Tensor trunk(const Tensor& batch) const;

  ClassifierConfig config_;
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
};

enum class Conditioning { noise_only, image_conditioned };

struct GeneratorConfig {
  std::size_t noise_dim = 64;
  Conditioning conditioning = Conditioning::image_conditioned;
  double epsilon = 0.25;
};

/// Perturbation generator: dense(noise_dim -> 32*7*7) -> two stride-2
/// transposed convs to 28x28 -> [concat base image] -> 3x3 convs -> eps*tanh.
class GeneratorModel : public Module {
 public:
  GeneratorModel(GeneratorConfig config, Rng& rng);

  // z: [N, noise_dim]; base: [N,1,28,28], required iff image_conditioned.
  Tensor forward(const Tensor& z, const Tensor& base = {}) const;

  const GeneratorConfig& config() const noexcept { return config_; }
  std::string kind() const override { return "generator"; }
  nlohmann::json architecture() const override;

 private:
  GeneratorConfig config_;
  Tensor fc_w_, fc_b_, up1_w_, up1_b_, up2_w_, up2_b_, mix_w_, mix_b_, out_w_, out_b_;
};

/// Realness discriminator: conv 8 (stride 2) -> conv 16 (stride 2) -> dense -> sigmoid.
class DiscriminatorModel : public Module {
 public:
  explicit DiscriminatorModel(Rng& rng);

  // [N,1,28,28] -> [N,1] scores in (0,1)
  Tensor forward(const Tensor& batch) const;

  std::string kind() const override { return "discriminator"; }
  nlohmann::json architecture() const override;

 private:
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, fc_w_, fc_b_;
};

struct AutoencoderConfig {
  std::size_t bottleneck = 16;
};

/// Convolutional autoencoder used by the reconstruction-error defense.
class AutoencoderModel : public Module {
 public:
  AutoencoderModel(AutoencoderConfig config, Rng& rng);

  // [N,1,28,28] -> reconstruction in [0,1] with the same shape.
  Tensor forward(const Tensor& batch) const;

  std::string kind() const override { return "autoencoder"; }
  nlohmann::json architecture() const override;

 private:
  AutoencoderConfig config_;
  Tensor enc1_w_, enc1_b_, enc2_w_, enc2_b_, code_w_, code_b_, expand_w_, expand_b_;
  Tensor dec1_w_, dec1_b_, dec2_w_, dec2_b_;
};

// Checks an image batch is [N,1,size,size].
void require_image_batch(const Tensor& batch, std::size_t size, const char* who);

}  // namespace poisonforge
