#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonforge/tensor.hpp"

namespace poisonforge {

/// Images [N,1,H,W] in [0,1] with integer class labels.
struct LabeledDataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const { return images.dim(2); }
  std::size_t pixels_per_image() const { return images.dim(2) * images.dim(3); }

  std::span<const float> image(std::size_t index) const;
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> indices_of_class(int label) const;
  std::vector<std::size_t> class_counts() const;

  // Throws DataError unless counts agree, pixels lie in [0,1] and labels are in range.
  void validate() const;
};

// Stacks images given as flat pixel rows into an [N,1,size,size] tensor.
Tensor stack_images(const std::vector<std::vector<float>>& rows, std::size_t size);

// Reads an IDX image/label file pair (big-endian headers, magic 0x803 / 0x801).
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::string name = "mnist");

struct MnistSplits {
  LabeledDataset train;
  LabeledDataset test;
};
// Loads the canonical train/t10k files from a directory.
MnistSplits load_mnist(const std::filesystem::path& directory);
// Resolves the dataset root from an explicit path or the POISONFORGE_DATA variable.
std::filesystem::path resolve_data_dir(const std::string& explicit_dir = {});

LabeledDataset subset(const LabeledDataset& data, std::span<const std::size_t> indices,
                      std::string name);
// n samples drawn uniformly without replacement, kept in ascending index order.
LabeledDataset random_subset(const LabeledDataset& data, std::size_t n, std::uint64_t seed);

// {name, paths, sha256, counts}
nlohmann::json dataset_manifest(const LabeledDataset& data,
                                const std::vector<std::filesystem::path>& paths);
std::string sha256_file(const std::filesystem::path& path);

enum class RatioBasis { target_class_subset, whole_set };

std::string to_string(RatioBasis basis);
RatioBasis ratio_basis_from_string(const std::string& text);

// clean_label poisons target-class samples and keeps their labels; relabel
// poisons donor-class samples and assigns them the target label.
enum class LabelMode { clean_label, relabel };

std::string to_string(LabelMode mode);
LabelMode label_mode_from_string(const std::string& text);

struct PoisonPlan {
  int target_class = 4;  // label the triggers should receive
  int donor_class = 9;   // feature donor and test-time trigger class
  double ratio = 0.0;
  RatioBasis basis = RatioBasis::target_class_subset;
  LabelMode label_mode = LabelMode::clean_label;
  std::uint64_t seed = 0;
  std::vector<std::size_t> selected_indices;  // ascending; all target_class under clean_label
};

// Selects round(ratio * population) samples uniformly without replacement,
// from the target class (clean_label) or the donor class (relabel). The
// population is the target-class count, or the whole set size for
// RatioBasis::whole_set.
PoisonPlan make_poison_plan(const LabeledDataset& data, int target_class, int donor_class,
                            double ratio, RatioBasis basis, std::uint64_t seed,
                            LabelMode mode = LabelMode::clean_label);

struct PoisonedDataset {
  LabeledDataset data;
  std::vector<bool> poison_mask;

  std::vector<std::size_t> poison_indices() const;
};

// Positional replacement of plan.selected_indices by crafted rows. Labels are
// untouched unless the plan relabels.
PoisonedDataset apply_poison(const LabeledDataset& data, const PoisonPlan& plan,
                             const Tensor& crafted);

// Filters out flagged rows. Mask and labels follow the kept rows.
PoisonedDataset remove_flagged(const PoisonedDataset& data, const std::vector<bool>& flagged);

}  // namespace poisonforge
