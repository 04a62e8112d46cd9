#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/data.hpp"

namespace poisonforge {

// 64-bit difference hash: box-average to 8 rows x 9 columns, then bit
// (r*8 + c) is set iff cell(r, c) < cell(r, c+1).
std::uint64_t dhash64(std::span<const float> pixels, std::size_t height, std::size_t width);
int hamming(std::uint64_t a, std::uint64_t b);

// Area-weighted box average of a row-major image.
std::vector<double> box_downscale(std::span<const float> pixels, std::size_t height,
                                  std::size_t width, std::size_t out_height, std::size_t out_width);

enum class SimilarityMode { mean_image, pairwise_average };

// 1 - hamming/64 between class dHashes; 0 when c1 == c2. pairwise_average
// averages over up to `sample` images per class drawn with `seed`.
double class_similarity(const LabeledDataset& data, int c1, int c2,
                        SimilarityMode mode = SimilarityMode::mean_image, std::size_t sample = 200,
                        std::uint64_t seed = 0);

struct SimilarityMatrix {
  std::size_t num_classes = 0;
  std::vector<double> values;  // row-major, symmetric, zero diagonal

  double at(std::size_t a, std::size_t b) const { return values[a * num_classes + b]; }
};

SimilarityMatrix similarity_matrix(const LabeledDataset& data,
                                   SimilarityMode mode = SimilarityMode::mean_image);

struct TTestResult {
  double t_statistic = 0.0;
  double degrees_of_freedom = 0.0;
  double p_value = 1.0;
  std::string sidedness = "two_sided";
  std::size_t n_a = 0;
  std::size_t n_b = 0;
};

void to_json(nlohmann::json& j, const TTestResult& r);

// Welch's unequal-variance two-sample t-test, two-sided.
TTestResult ttest_two_sample(std::span<const double> a, std::span<const double> b);

// Spearman rank correlation with average ranks for ties; nullopt when either
// ranking is constant.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct SweepRow {
  std::string attack;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  double acc_clean = 0.0;
  double acc_poisoned = 0.0;
  double asr = 0.0;
  double wall_seconds = 0.0;
  bool ok = true;
  std::string error;
};

struct SweepSummaryRow {
  double ratio = 0.0;
  double mean_acc_clean = 0.0;
  double mean_acc_poisoned = 0.0;
  double mean_asr = 0.0;
  std::size_t cells_ok = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ratio-major, then seed, in input order
  std::vector<SweepSummaryRow> summary;  // one per input ratio
};

// Fills acc_clean, acc_poisoned and asr for one (ratio, seed) cell.
using SweepCell = std::function<SweepRow(double ratio, std::uint64_t seed)>;

// Runs every (ratio, seed) cell; a throwing cell is marked failed and the rest
// continue. Up to `parallel` cells run at once. Ratios must be ascending.
SweepResult run_sweep(const std::string& attack, const std::vector<double>& ratios,
                      const std::vector<std::uint64_t>& seeds, const SweepCell& cell,
                      std::size_t parallel = 1);

struct StudyRow {
  int donor_class = 0;
  double similarity = 0.0;
  double asr = 0.0;
  bool ok = true;
  std::string error;
};

// Per donor class: class_similarity(t, s) and the ASR returned by `attack`.
std::vector<StudyRow> interclass_study(const LabeledDataset& data, int target_class,
                                       const std::vector<int>& donor_classes,
                                       const std::function<double(int donor)>& attack,
                                       SimilarityMode mode = SimilarityMode::mean_image,
                                       std::size_t parallel = 1);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sweep_summary_csv(const std::vector<SweepSummaryRow>& rows);
std::string study_csv(const std::vector<StudyRow>& rows);

}  // namespace poisonforge
