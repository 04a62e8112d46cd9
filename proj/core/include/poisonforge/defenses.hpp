#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/data.hpp"
#include "poisonforge/metrics.hpp"
#include "poisonforge/models.hpp"
#include "poisonforge/training.hpp"

namespace poisonforge {

enum class DefenseMethod { none, autoencoder, dbscan };

std::string to_string(DefenseMethod method);
DefenseMethod defense_method_from_string(const std::string& text);

enum class ThresholdRule { quantile, mean_k_sigma };

struct ThresholdSpec {
  ThresholdRule rule = ThresholdRule::quantile;
  double fraction = 0.05;  // quantile rule: flag the top fraction
  double k = 2.0;          // mean_k_sigma rule: flag score >= mean + k * sd
};

struct AnomalyReport {
  DefenseMethod method = DefenseMethod::none;
  std::vector<double> scores;
  double threshold = 0.0;
  std::vector<bool> flagged;

  std::size_t flagged_count() const;
};

void to_json(nlohmann::json& j, const AnomalyReport& r);

// Quantile: exactly round(fraction * N) highest scores (ties to the lower
// index), threshold = largest unflagged score, so flagged iff score >
// threshold when there are no ties. mean_k_sigma: population sd, flagged iff
// score >= threshold.
std::vector<bool> apply_threshold(const std::vector<double>& scores, const ThresholdSpec& spec,
                                  double& threshold);

struct AutoencoderScanSpec {
  std::size_t epochs = 2;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t bottleneck = 16;
  ThresholdSpec threshold;
};

// Trains an autoencoder on the suspect images and scores each sample by its
// mean squared reconstruction error.
AnomalyReport autoencoder_scan(const LabeledDataset& data, const AutoencoderScanSpec& spec,
                               std::uint64_t seed);

constexpr int kNoise = -1;

struct ClusterLabels {
  std::vector<int> labels;  // cluster id >= 0 or kNoise
  double eps = 0.0;
  std::size_t min_pts = 0;
  std::size_t cluster_count = 0;
};

// Points are rows of a row-major [n, dim] matrix. Neighbourhoods include the
// point itself and are inclusive (distance <= eps). A border point joins the
// earliest-created cluster among its core neighbours.
ClusterLabels dbscan_cluster(const std::vector<double>& points, std::size_t dim, double eps,
                             std::size_t min_pts);

// Distance from each point to its k-th nearest neighbour, the point itself
// counting as the first.
std::vector<double> k_distances(const std::vector<double>& points, std::size_t dim, std::size_t k);

struct ClusterScanSpec {
  std::size_t min_pts = 4;
  double eps = 0.0;             // <= 0 selects the k-distance rule per class
  double eps_quantile = 0.9;    // percentile of the min_pts-distances
  double min_cluster_fraction = 0.05;
};

// Per class: DBSCAN over the classifier's features; noise points and members
// of clusters smaller than min_cluster_fraction of the class are flagged.
// Scores are k-distance / eps of the class, threshold is 1.
AnomalyReport cluster_scan(const LabeledDataset& data, const ClassifierModel& classifier,
                           const ClusterScanSpec& spec);

struct DefenseOutcome {
  DefenseMethod method = DefenseMethod::none;
  double asr_before = 0.0;
  double asr_after = 0.0;
  double acc_before = 0.0;
  double acc_after = 0.0;
  double detection_precision = 0.0;  // 0 when nothing is flagged
  double detection_recall = 0.0;     // 0 when there are no poisons
  std::size_t removed_count = 0;
  MetricsReport acc_report_after;
  MetricsReport asr_report_after;
};

void to_json(nlohmann::json& j, const DefenseOutcome& d);

struct EvalBundle {
  const LabeledDataset* test = nullptr;
  Tensor triggers;
  std::string trigger_description;
  int trigger_class = 9;
  int target_class = 4;
  const ClassifierModel* clean_reference = nullptr;
  TrainRecipe recipe;
  std::uint64_t train_seed = 0;
  MetricsReport acc_before;
  MetricsReport asr_before;
};

// Removes flagged rows, retrains a fresh classifier with the bundle's recipe
// and seed, and re-measures acc and ASR.
DefenseOutcome filter_retrain_evaluate(const PoisonedDataset& train, const AnomalyReport& report,
                                       const EvalBundle& bundle);

struct DetectionScore {
  double precision = 0.0;
  double recall = 0.0;
};
DetectionScore detection_score(const std::vector<bool>& flagged, const std::vector<bool>& truth);

}  // namespace poisonforge
