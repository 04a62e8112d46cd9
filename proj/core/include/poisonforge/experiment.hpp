#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/attacks.hpp"
#include "poisonforge/data.hpp"
#include "poisonforge/defenses.hpp"
#include "poisonforge/evaluation.hpp"
#include "poisonforge/metrics.hpp"
#include "poisonforge/models.hpp"
#include "poisonforge/training.hpp"

namespace poisonforge {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kConfigSchema = 1;

struct DefenseConfig {
  DefenseMethod method = DefenseMethod::autoencoder;
  AutoencoderScanSpec autoencoder;
  ClusterScanSpec cluster;
};

struct EvaluationConfig {
  std::vector<double> ratios{0.01, 0.03, 0.05, 0.07, 0.10};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<int> donor_classes{0, 1, 7, 9, 5};
  SimilarityMode similarity = SimilarityMode::mean_image;
  std::size_t ttest_samples = 1000;
  std::size_t grid_samples = 10;
};

/// Everything that determines a run. The hash of the canonical JSON names it.
struct ExperimentConfig {
  std::string data_dir;         // empty: POISONFORGE_DATA
  std::size_t train_subset = 0; // 0: full training split
  TrainRecipe recipe{2, 64, 1e-3};
  int target_class = 4;
  int donor_class = 9;
  double ratio = 0.07;
  RatioBasis basis = RatioBasis::target_class_subset;
  std::string label_mode = "auto";  // auto: relabel for patch, clean_label otherwise
  AttackConfig attack;
  DefenseConfig defense;
  EvaluationConfig evaluation;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::size_t parallel = 1;

  LabelMode effective_label_mode() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
// Hex sha256 of the canonical serialization, without output_dir and parallel
// (they do not change results).
std::string config_hash(const ExperimentConfig& config);
std::string sha256_hex(const std::string& bytes);

/// Files written by a command, with per-stage wall time.
class RunManifest {
 public:
  RunManifest(std::string command, const ExperimentConfig& config);

  void add_file(const std::filesystem::path& path);
  void add_stage(const std::string& stage, double seconds);
  void set_metrics(const std::string& key, nlohmann::json value);
  nlohmann::json to_json() const;
  // Writes <dir>/manifest-<command>.json and lists it.
  std::filesystem::path write(const std::filesystem::path& dir);
  const std::vector<std::string>& files() const noexcept { return files_; }

 private:
  std::string command_;
  std::string hash_;
  std::uint64_t seed_;
  std::vector<std::string> files_;
  std::vector<std::pair<std::string, double>> stages_;
  nlohmann::json metrics_ = nlohmann::json::object();
  mutable std::mutex mutex_;
};

struct Workspace {
  LabeledDataset train;
  LabeledDataset test;
  nlohmann::json data_manifest;
};

// Loads MNIST from the configured directory and applies train_subset.
Workspace load_workspace(const ExperimentConfig& config);

// Trigger-class test images, with the attack's pattern for patch and blend.
Tensor make_triggers(const ExperimentConfig& config, const LabeledDataset& test);
std::string trigger_description(const ExperimentConfig& config);

struct CleanRun {
  ClassifierModel model;
  MetricsReport acc;
};

CleanRun train_clean(const ExperimentConfig& config, const Workspace& ws);

struct AttackRun {
  PoisonPlan plan;
  CraftResult craft;  // indices are dataset rows
  PoisonedDataset poisoned;
  ClassifierModel victim;
  MetricsReport acc_clean;
  MetricsReport acc_poisoned;
  MetricsReport asr;
  double clean_confusion = 0.0;  // share of triggers the clean model labels target_class
  double mean_abs_delta = 0.0;   // over poisoned rows, relative to the base images
  double max_abs_delta = 0.0;
};

/// Trained generators keyed by craft seed, reused across sweep cells.
class GeneratorCache {
 public:
  std::shared_ptr<const DeepPoisonModels> get_or_train(const std::string& key,
                                                       const std::function<DeepPoisonModels()>& train);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<std::once_flag>> once_;
  std::map<std::string, std::shared_ptr<const DeepPoisonModels>> models_;
};

// Crafts, injects, trains the victim and measures acc/ASR. `clean` must be the
// reference model trained on the same workspace.
AttackRun run_attack(const ExperimentConfig& config, const Workspace& ws,
                     const ClassifierModel& clean, GeneratorCache* cache = nullptr);

struct DefenseRun {
  AnomalyReport report;
  DefenseOutcome outcome;
};

DefenseRun run_defense(const ExperimentConfig& config, const Workspace& ws,
                       const ClassifierModel& clean, const AttackRun& attack);

// ---- commands: each writes artifacts under config.output_dir ----

struct CommandResult {
  nlohmann::json summary;
  std::filesystem::path manifest;
};

CommandResult cmd_train_clean(const ExperimentConfig& config);
CommandResult cmd_attack(const ExperimentConfig& config);
CommandResult cmd_defend(const ExperimentConfig& config);
CommandResult cmd_sweep(const ExperimentConfig& config);
CommandResult cmd_study(const ExperimentConfig& config);
CommandResult cmd_report(const ExperimentConfig& config);

}  // namespace poisonforge
