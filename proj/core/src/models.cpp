#include "poisonforge/models.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "poisonforge/errors.hpp"
#include "poisonforge/ops.hpp"

namespace poisonforge {

void require_image_batch(const Tensor& batch, std::size_t size, const char* who) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != size || s[3] != size) {
    throw ShapeError(std::string(who) + ": expected [N,1," + std::to_string(size) + "," +
                     std::to_string(size) + "] images, got " + shape_to_string(s));
  }
}

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) out.push_back({names_[i], params_[i]});
  return out;
}

void Module::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : params_) {
    p.set_requires_grad(!frozen);
    if (frozen) p.clear_grad();
  }
}

void Module::load_parameters(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto it = by_name.find(names_[i]);
    if (it == by_name.end()) {
      throw DataError(kind() + ": checkpoint lacks parameter '" + names_[i] + "'");
    }
    if (it->second->shape() != params_[i].shape()) {
      throw DataError(kind() + ": parameter '" + names_[i] + "' has shape " +
                      shape_to_string(it->second->shape()) + ", expected " +
                      shape_to_string(params_[i].shape()));
    }
    const auto src = it->second->values();
    auto dst = params_[i].mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor Module::add_parameter(std::string name, Shape shape, std::size_t fan_in,
                             std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = rng.uniform_tensor(std::move(shape), -limit, limit);
  t.set_requires_grad(!frozen_);
  names_.push_back(std::move(name));
  params_.push_back(t);
  return t;
}

Tensor Module::add_bias(std::string name, std::size_t size) {
  Tensor t = Tensor::zeros({size}, !frozen_);
  names_.push_back(std::move(name));
  params_.push_back(t);
  return t;
}

void save_model(const Module& model, const std::filesystem::path& stem) {
  auto pfw = stem;
  pfw += ".pfw";
  save_checkpoint(pfw, model.named_parameters());
  auto sidecar = stem;
  sidecar += ".json";
  std::ofstream out(sidecar);
  if (!out) throw DataError("save_model: cannot write " + sidecar.string());
  nlohmann::json j = model.architecture();
  j["kind"] = model.kind();
  out << j.dump(2) << '\n';
}

void load_model_parameters(Module& model, const std::filesystem::path& stem) {
  auto pfw = stem;
  pfw += ".pfw";
  model.load_parameters(load_checkpoint(pfw));
}

// ---------------------------------------------------------------------------

ClassifierModel::ClassifierModel(ClassifierConfig config, Rng& rng) : config_(config) {
  if (config_.image_size != 28) throw ConfigError("classifier: only 28x28 inputs are supported");
  if (config_.num_classes < 2) throw ConfigError("classifier: need at least two classes");
  conv1_w_ = add_parameter("conv1.weight", {6, 1, 5, 5}, 25, 150, rng);
  conv1_b_ = add_bias("conv1.bias", 6);
  conv2_w_ = add_parameter("conv2.weight", {16, 6, 5, 5}, 150, 400, rng);
  conv2_b_ = add_bias("conv2.bias", 16);
  fc1_w_ = add_parameter("fc1.weight", {256, 120}, 256, 120, rng);
  fc1_b_ = add_bias("fc1.bias", 120);
  fc2_w_ = add_parameter("fc2.weight", {120, kFeatureDim}, 120, kFeatureDim, rng);
  fc2_b_ = add_bias("fc2.bias", kFeatureDim);
  fc3_w_ = add_parameter("fc3.weight", {kFeatureDim, config_.num_classes}, kFeatureDim,
                         config_.num_classes, rng);
  fc3_b_ = add_bias("fc3.bias", config_.num_classes);
}

Tensor ClassifierModel::trunk(const Tensor& batch) const {
  require_image_batch(batch, config_.image_size, "classifier");
  using namespace ops;
  Tensor h = maxpool2d(relu(conv2d(batch, conv1_w_, conv1_b_)), 2, 2);  // 6@12x12
  h = maxpool2d(relu(conv2d(h, conv2_w_, conv2_b_)), 2, 2);            // 16@4x4
  h = relu(bias_add(matmul(flatten(h), fc1_w_), fc1_b_));
  return relu(bias_add(matmul(h, fc2_w_), fc2_b_));
}

ClassifierModel::Outputs ClassifierModel::forward_all(const Tensor& batch) const {
  Tensor features = trunk(batch);
  Tensor logits = ops::bias_add(ops::matmul(features, fc3_w_), fc3_b_);
  return {features, logits};
}

Tensor ClassifierModel::extract_features(const Tensor& batch) const { return trunk(batch); }

nlohmann::json ClassifierModel::architecture() const {
  return {{"layers", {"conv 6@5x5", "maxpool 2", "conv 16@5x5", "maxpool 2", "dense 120",
                      "dense 84", "dense " + std::to_string(config_.num_classes)}},
          {"num_classes", config_.num_classes},
          {"image_size", config_.image_size},
          {"feature_dim", kFeatureDim},
          {"activation", "relu"}};
}

// ---------------------------------------------------------------------------

GeneratorModel::GeneratorModel(GeneratorConfig config, Rng& rng) : config_(config) {
  if (config_.noise_dim == 0) throw ConfigError("generator: noise_dim must be positive");
  if (!(config_.epsilon >= 0.0)) throw ConfigError("generator: epsilon must be non-negative");
  const std::size_t mix_in = config_.conditioning == Conditioning::image_conditioned ? 9 : 8;
  fc_w_ = add_parameter("fc.weight", {config_.noise_dim, 32 * 7 * 7}, config_.noise_dim,
                        32 * 7 * 7, rng);
  fc_b_ = add_bias("fc.bias", 32 * 7 * 7);
  up1_w_ = add_parameter("up1.weight", {32, 16, 4, 4}, 32 * 16, 16 * 16, rng);
  up1_b_ = add_bias("up1.bias", 16);
  up2_w_ = add_parameter("up2.weight", {16, 8, 4, 4}, 16 * 16, 8 * 16, rng);
  up2_b_ = add_bias("up2.bias", 8);
  mix_w_ = add_parameter("mix.weight", {16, mix_in, 3, 3}, mix_in * 9, 16 * 9, rng);
  mix_b_ = add_bias("mix.bias", 16);
  out_w_ = add_parameter("out.weight", {1, 16, 3, 3}, 16 * 9, 9, rng);
  out_b_ = add_bias("out.bias", 1);
}

Tensor GeneratorModel::forward(const Tensor& z, const Tensor& base) const {
  if (z.rank() != 2 || z.dim(1) != config_.noise_dim) {
    throw ShapeError("generator: noise must be [N," + std::to_string(config_.noise_dim) +
                     "], got " + shape_to_string(z.shape()));
  }
  const std::size_t n = z.dim(0);
  const bool conditioned = config_.conditioning == Conditioning::image_conditioned;
  if (conditioned) {
    if (!base.defined()) {
      throw ConfigError("generator: image_conditioned mode requires a base image batch");
    }
    require_image_batch(base, 28, "generator");
    if (base.dim(0) != n) {
      throw ShapeError("generator: " + std::to_string(n) + " noise rows for " +
                       std::to_string(base.dim(0)) + " base images");
    }
  }
  using namespace ops;
  const Conv2dAttrs up{2, 1};
  Tensor h = relu(bias_add(matmul(z, fc_w_), fc_b_));
  h = reshape(h, {n, 32, 7, 7});
  h = relu(conv_transpose2d(h, up1_w_, up1_b_, up));  // 16@14x14
  h = relu(conv_transpose2d(h, up2_w_, up2_b_, up));  // 8@28x28
  if (conditioned) h = concat<float>({h, base}, 1);
  h = relu(conv2d(h, mix_w_, mix_b_, {1, 1}));
  h = ops::tanh(conv2d(h, out_w_, out_b_, {1, 1}));
  return scale(h, static_cast<float>(config_.epsilon));
}

nlohmann::json GeneratorModel::architecture() const {
  return {{"noise_dim", config_.noise_dim},
          {"conditioning", config_.conditioning == Conditioning::image_conditioned
                               ? "image_conditioned"
                               : "noise_only"},
          {"epsilon", config_.epsilon},
          {"layers", {"dense 1568", "reshape 32@7x7", "deconv 16@4x4/2", "deconv 8@4x4/2",
                      "concat base", "conv 16@3x3", "conv 1@3x3", "eps*tanh"}}};
}

// ---------------------------------------------------------------------------

DiscriminatorModel::DiscriminatorModel(Rng& rng) {
  conv1_w_ = add_parameter("conv1.weight", {8, 1, 4, 4}, 16, 128, rng);
  conv1_b_ = add_bias("conv1.bias", 8);
  conv2_w_ = add_parameter("conv2.weight", {16, 8, 4, 4}, 128, 256, rng);
  conv2_b_ = add_bias("conv2.bias", 16);
  fc_w_ = add_parameter("fc.weight", {16 * 7 * 7, 1}, 16 * 7 * 7, 1, rng);
  fc_b_ = add_bias("fc.bias", 1);
}

Tensor DiscriminatorModel::forward(const Tensor& batch) const {
  require_image_batch(batch, 28, "discriminator");
  using namespace ops;
  Tensor h = relu(conv2d(batch, conv1_w_, conv1_b_, {2, 1}));  // 8@14x14
  h = relu(conv2d(h, conv2_w_, conv2_b_, {2, 1}));            // 16@7x7
  return sigmoid(bias_add(matmul(flatten(h), fc_w_), fc_b_));
}

nlohmann::json DiscriminatorModel::architecture() const {
  return {{"layers", {"conv 8@4x4/2", "conv 16@4x4/2", "dense 1", "sigmoid"}}};
}

// ---------------------------------------------------------------------------

AutoencoderModel::AutoencoderModel(AutoencoderConfig config, Rng& rng) : config_(config) {
  if (config_.bottleneck == 0) throw ConfigError("autoencoder: bottleneck must be positive");
  enc1_w_ = add_parameter("enc1.weight", {8, 1, 4, 4}, 16, 128, rng);
  enc1_b_ = add_bias("enc1.bias", 8);
  enc2_w_ = add_parameter("enc2.weight", {16, 8, 4, 4}, 128, 256, rng);
  enc2_b_ = add_bias("enc2.bias", 16);
  code_w_ = add_parameter("code.weight", {16 * 7 * 7, config_.bottleneck}, 16 * 7 * 7,
                          config_.bottleneck, rng);
  code_b_ = add_bias("code.bias", config_.bottleneck);
  expand_w_ = add_parameter("expand.weight", {config_.bottleneck, 16 * 7 * 7},
                            config_.bottleneck, 16 * 7 * 7, rng);
  expand_b_ = add_bias("expand.bias", 16 * 7 * 7);
  dec1_w_ = add_parameter("dec1.weight", {16, 8, 4, 4}, 256, 128, rng);
  dec1_b_ = add_bias("dec1.bias", 8);
  dec2_w_ = add_parameter("dec2.weight", {8, 1, 4, 4}, 128, 16, rng);
  dec2_b_ = add_bias("dec2.bias", 1);
}

Tensor AutoencoderModel::forward(const Tensor& batch) const {
  require_image_batch(batch, 28, "autoencoder");
  using namespace ops;
  const std::size_t n = batch.dim(0);
  const Conv2dAttrs down{2, 1};
  Tensor h = relu(conv2d(batch, enc1_w_, enc1_b_, down));
  h = relu(conv2d(h, enc2_w_, enc2_b_, down));
  h = relu(bias_add(matmul(flatten(h), code_w_), code_b_));
  h = relu(bias_add(matmul(h, expand_w_), expand_b_));
  h = reshape(h, {n, 16, 7, 7});
  h = relu(conv_transpose2d(h, dec1_w_, dec1_b_, down));
  return sigmoid(conv_transpose2d(h, dec2_w_, dec2_b_, down));
}

nlohmann::json AutoencoderModel::architecture() const {
  return {{"bottleneck", config_.bottleneck},
          {"layers", {"conv 8@4x4/2", "conv 16@4x4/2", "dense bottleneck", "dense 784",
                      "deconv 8@4x4/2", "deconv 1@4x4/2", "sigmoid"}}};
}

}  // namespace poisonforge
