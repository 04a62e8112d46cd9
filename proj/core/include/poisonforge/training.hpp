#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "poisonforge/data.hpp"
#include "poisonforge/models.hpp"

namespace poisonforge {

struct TrainRecipe {
  std::size_t epochs = 3;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

// Adam on softmax cross-entropy; mini-batch order drawn from `seed`.
TrainHistory train_classifier(ClassifierModel& model, const LabeledDataset& data,
                              const TrainRecipe& recipe, std::uint64_t seed);

// Fresh classifier initialised from the "init" substream of `seed`, then trained.
ClassifierModel fit_classifier(const LabeledDataset& data, const TrainRecipe& recipe,
                               std::uint64_t seed, TrainHistory* history = nullptr);

// Rows [begin, begin+count) of an [N,...] tensor.
Tensor slice_rows(const Tensor& batch, std::size_t begin, std::size_t count);

Tensor predict_logits(const ClassifierModel& model, const Tensor& images,
                      std::size_t batch_size = 500);
std::vector<int> predict_labels(const ClassifierModel& model, const Tensor& images,
                                std::size_t batch_size = 500);
Tensor extract_features_batched(const ClassifierModel& model, const Tensor& images,
                                std::size_t batch_size = 500);

}  // namespace poisonforge
