#include "poisonforge/training.hpp"

#include <algorithm>

#include "poisonforge/errors.hpp"
#include "poisonforge/ops.hpp"
#include "poisonforge/optim.hpp"
#include "poisonforge/random.hpp"

namespace poisonforge {

Tensor slice_rows(const Tensor& batch, std::size_t begin, std::size_t count) {
  const std::size_t n = batch.dim(0);
  if (count == 0 || begin + count > n) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_to_string(batch.shape()));
  }
  const std::size_t row = batch.numel() / n;
  Shape shape = batch.shape();
  shape[0] = count;
  const auto v = batch.values();
  return Tensor(std::move(shape), std::vector<float>(v.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                     v.begin() + static_cast<std::ptrdiff_t>((begin + count) * row)));
}

TrainHistory train_classifier(ClassifierModel& model, const LabeledDataset& data,
                              const TrainRecipe& recipe, std::uint64_t seed) {
  if (recipe.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  TrainHistory history;
  if (recipe.epochs == 0) return history;
  if (data.size() == 0) throw DataError("train: empty dataset");
  Rng rng(seed, "shuffle");
  Adam optimizer(recipe.learning_rate);
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    const auto order = rng.permutation(data.size());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_size) {
      const std::size_t count = std::min(recipe.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, count);
      const Tensor x = data.gather(idx);
      const auto y = data.gather_labels(idx);
      Tape tape;
      const Tensor loss = ops::softmax_cross_entropy(model.forward(x), std::span<const int>(y));
      tape.backward(loss);
      optimizer.step(model.parameters());
      loss_sum += loss.item();
      ++batches;
    }
    history.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  return history;
}

ClassifierModel fit_classifier(const LabeledDataset& data, const TrainRecipe& recipe,
                               std::uint64_t seed, TrainHistory* history) {
  Rng init(seed, "init");
  ClassifierModel model(ClassifierConfig{data.num_classes, 28}, init);
  auto h = train_classifier(model, data, recipe, seed);
  if (history) *history = std::move(h);
  return model;
}

namespace {

template <class Fn>
Tensor batched_rows(const Tensor& images, std::size_t batch_size, Fn fn) {
  const std::size_t n = images.dim(0);
  std::vector<float> out;
  std::size_t width = 0;
  NoGrad guard;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    const Tensor part = fn(slice_rows(images, start, count));
    width = part.numel() / count;
    out.insert(out.end(), part.values().begin(), part.values().end());
  }
  return Tensor({n, width}, std::move(out));
}

}  // namespace

Tensor predict_logits(const ClassifierModel& model, const Tensor& images, std::size_t batch_size) {
  return batched_rows(images, batch_size, [&](const Tensor& x) { return model.forward(x); });
}

std::vector<int> predict_labels(const ClassifierModel& model, const Tensor& images,
                                std::size_t batch_size) {
  return ops::argmax_rows(predict_logits(model, images, batch_size));
}

Tensor extract_features_batched(const ClassifierModel& model, const Tensor& images,
                                std::size_t batch_size) {
  return batched_rows(images, batch_size,
                      [&](const Tensor& x) { return model.extract_features(x); });
}

}  // namespace poisonforge
