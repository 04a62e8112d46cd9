#include "poisonforge/metrics.hpp"

#include "poisonforge/errors.hpp"
#include "poisonforge/training.hpp"

namespace poisonforge {

void to_json(nlohmann::json& j, const MetricsReport& m) {
  j = nlohmann::json{{"context", m.context}, {"trigger", m.trigger},     {"n_total", m.n_total},
                     {"n_correct", m.n_correct}, {"n_att", m.n_att}, {"acc", m.acc},
                     {"asr", m.asr}};
}

void from_json(const nlohmann::json& j, MetricsReport& m) {
  m.context = j.value("context", std::string{});
  m.trigger = j.value("trigger", std::string{});
  m.n_total = j.at("n_total").get<std::size_t>();
  m.n_correct = j.at("n_correct").get<std::size_t>();
  m.n_att = j.at("n_att").get<std::size_t>();
  m.acc = j.at("acc").get<double>();
  m.asr = j.at("asr").get<double>();
}

MetricsReport accuracy_from_predictions(std::span<const int> predicted,
                                        std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw DataError("accuracy: empty dataset");
  MetricsReport m;
  m.n_total = labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) m.n_correct += predicted[i] == labels[i];
  m.acc = static_cast<double>(m.n_correct) / static_cast<double>(m.n_total);
  return m;
}

MetricsReport asr_from_predictions(std::span<const int> clean_predicted,
                                   std::span<const int> poisoned_predicted, int trigger_class,
                                   int target_class) {
  if (clean_predicted.size() != poisoned_predicted.size()) {
    throw ShapeError("asr: prediction lists differ in length");
  }
  MetricsReport m;
  m.n_total = clean_predicted.size();
  for (std::size_t i = 0; i < m.n_total; ++i) {
    if (clean_predicted[i] != trigger_class) continue;
    ++m.n_correct;
    m.n_att += poisoned_predicted[i] == target_class;
  }
  if (m.n_correct == 0) {
    throw ZeroDenominatorError("asr: the clean reference recognises none of the " +
                               std::to_string(m.n_total) + " triggers as class " +
                               std::to_string(trigger_class));
  }
  m.acc = static_cast<double>(m.n_correct) / static_cast<double>(m.n_total);
  m.asr = static_cast<double>(m.n_att) / static_cast<double>(m.n_correct);
  return m;
}

MetricsReport compute_acc(const ClassifierModel& model, const LabeledDataset& data) {
  if (data.size() == 0) throw DataError("compute_acc: empty dataset '" + data.name + "'");
  const auto predicted = predict_labels(model, data.images);
  return accuracy_from_predictions(predicted, data.labels);
}

MetricsReport compute_asr(const ClassifierModel& poisoned_model,
                          const ClassifierModel& clean_reference, const Tensor& triggers,
                          int trigger_class, int target_class, std::string trigger) {
  if (!triggers.defined() || triggers.dim(0) == 0) {
    throw DataError("compute_asr: empty trigger set");
  }
  const auto clean = predict_labels(clean_reference, triggers);
  const auto poisoned = predict_labels(poisoned_model, triggers);
  MetricsReport m = asr_from_predictions(clean, poisoned, trigger_class, target_class);
  m.context = "poisoned_model";
  m.trigger = std::move(trigger);
  return m;
}

}  // namespace poisonforge
