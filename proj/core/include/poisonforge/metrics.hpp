#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/data.hpp"
#include "poisonforge/models.hpp"

namespace poisonforge {

/// Counts behind acc = n_correct / n_total and asr = n_att / n_correct.
struct MetricsReport {
  std::string context;  // "clean_model" or "poisoned_model"
  std::string trigger;  // trigger description, empty for plain accuracy
  std::size_t n_total = 0;
  std::size_t n_correct = 0;
  std::size_t n_att = 0;
  double acc = 0.0;
  double asr = 0.0;
};

void to_json(nlohmann::json& j, const MetricsReport& m);
void from_json(const nlohmann::json& j, MetricsReport& m);

MetricsReport accuracy_from_predictions(std::span<const int> predicted, std::span<const int> labels);

// n_correct: triggers the clean model labels trigger_class; n_att: those the
// poisoned model labels target_class. Throws ZeroDenominatorError if n_correct == 0.
MetricsReport asr_from_predictions(std::span<const int> clean_predicted,
                                   std::span<const int> poisoned_predicted, int trigger_class,
                                   int target_class);

MetricsReport compute_acc(const ClassifierModel& model, const LabeledDataset& data);

MetricsReport compute_asr(const ClassifierModel& poisoned_model,
                          const ClassifierModel& clean_reference, const Tensor& triggers,
                          int trigger_class, int target_class, std::string trigger = {});

}  // namespace poisonforge
