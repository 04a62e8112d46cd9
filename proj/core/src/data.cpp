#include "poisonforge/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "poisonforge/errors.hpp"
#include "poisonforge/random.hpp"

namespace poisonforge {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path, const char* what) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (in.gcount() != 4) {
    throw DataError("idx: truncated header (" + std::string(what) + ") in " + path.string());
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open " + path.string());
  return in;
}

}  // namespace

std::span<const float> LabeledDataset::image(std::size_t index) const {
  if (index >= size()) throw DataError("dataset: index " + std::to_string(index) + " out of range");
  const std::size_t p = pixels_per_image();
  return images.values().subspan(index * p, p);
}

Tensor LabeledDataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("dataset: empty gather");
  const std::size_t p = pixels_per_image();
  std::vector<float> out(indices.size() * p);
  const auto all = images.values();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) {
      throw DataError("dataset: index " + std::to_string(indices[k]) + " out of range");
    }
    std::copy_n(all.data() + indices[k] * p, p, out.data() + k * p);
  }
  return Tensor({indices.size(), 1, images.dim(2), images.dim(3)}, std::move(out));
}

std::vector<int> LabeledDataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> LabeledDataset::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) out.push_back(i);
  return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

void LabeledDataset::validate() const {
  if (labels.empty()) {
    if (images.defined()) throw DataError("dataset '" + name + "': images without labels");
    return;
  }
  if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size()) {
    throw DataError("dataset '" + name + "': image count does not match " +
                    std::to_string(labels.size()) + " labels");
  }
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("dataset '" + name + "': pixel outside [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw DataError("dataset '" + name + "': label " + std::to_string(l) + " out of range");
    }
  }
}

Tensor stack_images(const std::vector<std::vector<float>>& rows, std::size_t size) {
  if (rows.empty()) throw DataError("stack_images: no rows");
  std::vector<float> flat;
  flat.reserve(rows.size() * size * size);
  for (const auto& r : rows) {
    if (r.size() != size * size) throw ShapeError("stack_images: row has wrong pixel count");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), 1, size, size}, std::move(flat));
}

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::string name) {
  auto img = open_binary(images_path);
  const std::uint32_t img_magic = read_be32(img, images_path, "magic");
  if (img_magic != kImageMagic) {
    throw DataError("idx: bad magic " + hex32(img_magic) + " in " + images_path.string() +
                    ", expected " + hex32(kImageMagic));
  }
  const std::uint32_t count = read_be32(img, images_path, "count");
  const std::uint32_t rows = read_be32(img, images_path, "rows");
  const std::uint32_t cols = read_be32(img, images_path, "cols");
  if (rows != cols || rows == 0) {
    throw DataError("idx: only square images are supported, got " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }

  auto lab = open_binary(labels_path);
  const std::uint32_t lab_magic = read_be32(lab, labels_path, "magic");
  if (lab_magic != kLabelMagic) {
    throw DataError("idx: bad magic " + hex32(lab_magic) + " in " + labels_path.string() +
                    ", expected " + hex32(kLabelMagic));
  }
  const std::uint32_t label_count = read_be32(lab, labels_path, "count");
  if (label_count != count) {
    throw DataError("idx: " + images_path.string() + " holds " + std::to_string(count) +
                    " images but " + labels_path.string() + " holds " +
                    std::to_string(label_count) + " labels");
  }

  const std::size_t pixels = std::size_t{count} * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (static_cast<std::size_t>(img.gcount()) != pixels) {
    throw DataError("idx: truncated pixel data in " + images_path.string() + " (expected " +
                    std::to_string(pixels) + " bytes, got " + std::to_string(img.gcount()) + ")");
  }
  std::vector<unsigned char> raw_labels(count);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), count);
  if (static_cast<std::size_t>(lab.gcount()) != count) {
    throw DataError("idx: truncated label data in " + labels_path.string());
  }

  LabeledDataset out;
  out.name = std::move(name);
  if (count > 0) {
    std::vector<float> values(pixels);
    for (std::size_t i = 0; i < pixels; ++i) values[i] = static_cast<float>(raw[i]) / 255.0f;
    out.images = Tensor({count, 1, rows, cols}, std::move(values));
  }
  int max_label = 0;
  out.labels.reserve(count);
  for (unsigned char l : raw_labels) {
    out.labels.push_back(l);
    max_label = std::max<int>(max_label, l);
  }
  out.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  return out;
}

std::filesystem::path resolve_data_dir(const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv("POISONFORGE_DATA"); env != nullptr && *env != '\0') {
    return env;
  }
  throw ConfigError("dataset root not given: pass a path or set POISONFORGE_DATA");
}

MnistSplits load_mnist(const std::filesystem::path& dir) {
  return {load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "mnist-train"),
          load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "mnist-test")};
}

LabeledDataset subset(const LabeledDataset& data, std::span<const std::size_t> indices,
                      std::string name) {
  LabeledDataset out;
  out.name = std::move(name);
  out.num_classes = data.num_classes;
  if (indices.empty()) return out;
  out.images = data.gather(indices);
  out.labels = data.gather_labels(indices);
  return out;
}

LabeledDataset random_subset(const LabeledDataset& data, std::size_t n, std::uint64_t seed) {
  if (n >= data.size()) return subset(data, [&] {
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }(), data.name);
  Rng rng(seed);
  auto idx = rng.sample_without_replacement(data.size(), n);
  std::sort(idx.begin(), idx.end());
  return subset(data, idx, data.name + "-subset" + std::to_string(n));
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("sha256: cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

nlohmann::json dataset_manifest(const LabeledDataset& data,
                                const std::vector<std::filesystem::path>& paths) {
  nlohmann::json j;
  j["name"] = data.name;
  j["paths"] = nlohmann::json::array();
  j["sha256"] = nlohmann::json::array();
  for (const auto& p : paths) {
    j["paths"].push_back(p.string());
    j["sha256"].push_back(sha256_file(p));
  }
  j["counts"] = {{"total", data.size()}, {"per_class", data.class_counts()}};
  return j;
}

std::string to_string(RatioBasis basis) {
  return basis == RatioBasis::whole_set ? "whole_set" : "target_class_subset";
}

RatioBasis ratio_basis_from_string(const std::string& text) {
  if (text == "target_class_subset") return RatioBasis::target_class_subset;
  if (text == "whole_set") return RatioBasis::whole_set;
  throw ConfigError("unknown ratio basis '" + text + "'");
}

std::string to_string(LabelMode mode) {
  return mode == LabelMode::clean_label ? "clean_label" : "relabel";
}

LabelMode label_mode_from_string(const std::string& text) {
  if (text == "clean_label") return LabelMode::clean_label;
  if (text == "relabel") return LabelMode::relabel;
  throw ConfigError("unknown label mode '" + text + "'");
}

PoisonPlan make_poison_plan(const LabeledDataset& data, int target_class, int donor_class,
                            double ratio, RatioBasis basis, std::uint64_t seed, LabelMode mode) {
  if (target_class == donor_class) {
    throw ConfigError("poison plan: target and donor class must differ (both " +
                      std::to_string(target_class) + ")");
  }
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError("poison plan: ratio " + std::to_string(ratio) + " outside [0,1]");
  }
  const auto target_rows = data.indices_of_class(target_class);
  if (target_rows.empty()) {
    throw DataError("poison plan: no samples of target class " + std::to_string(target_class));
  }
  const int source_class = mode == LabelMode::clean_label ? target_class : donor_class;
  const auto candidates =
      mode == LabelMode::clean_label ? target_rows : data.indices_of_class(donor_class);
  const std::size_t population =
      basis == RatioBasis::target_class_subset ? target_rows.size() : data.size();
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(population)));
  if (count > candidates.size()) {
    throw ConfigError("poison plan: " + std::to_string(count) + " poisons requested but class " +
                      std::to_string(source_class) + " has only " +
                      std::to_string(candidates.size()) + " samples");
  }
  Rng rng(seed);
  const auto picks = rng.sample_without_replacement(candidates.size(), count);
  PoisonPlan plan{target_class, donor_class, ratio, basis, mode, seed, {}};
  plan.selected_indices.reserve(count);
  for (std::size_t p : picks) plan.selected_indices.push_back(candidates[p]);
  std::sort(plan.selected_indices.begin(), plan.selected_indices.end());
  return plan;
}

std::vector<std::size_t> PoisonedDataset::poison_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < poison_mask.size(); ++i)
    if (poison_mask[i]) out.push_back(i);
  return out;
}

PoisonedDataset apply_poison(const LabeledDataset& data, const PoisonPlan& plan,
                             const Tensor& crafted) {
  const std::size_t k = plan.selected_indices.size();
  PoisonedDataset out;
  out.poison_mask.assign(data.size(), false);
  if (k == 0) {
    out.data = data;
    out.data.images = data.images.defined() ? data.images.clone() : Tensor{};
    return out;
  }
  if (!crafted.defined() || crafted.rank() != 4 || crafted.dim(0) != k) {
    throw DataError("apply_poison: plan selects " + std::to_string(k) + " samples but " +
                    (crafted.defined() ? std::to_string(crafted.dim(0)) : std::string("0")) +
                    " crafted images were supplied");
  }
  const std::size_t p = data.pixels_per_image();
  if (crafted.numel() != k * p) {
    throw ShapeError("apply_poison: crafted images " + shape_to_string(crafted.shape()) +
                     " do not match dataset images " + shape_to_string(data.images.shape()));
  }
  out.data = data;
  out.data.name = data.name + "-poisoned";
  out.data.images = data.images.clone();
  auto dst = out.data.images.mutable_values();
  const auto src = crafted.values();
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t row = plan.selected_indices[j];
    if (row >= data.size()) throw DataError("apply_poison: selected index out of range");
    std::copy_n(src.data() + j * p, p, dst.data() + row * p);
    if (plan.label_mode == LabelMode::relabel) out.data.labels[row] = plan.target_class;
    out.poison_mask[row] = true;
  }
  return out;
}

PoisonedDataset remove_flagged(const PoisonedDataset& data, const std::vector<bool>& flagged) {
  if (flagged.size() != data.data.size()) {
    throw DataError("remove_flagged: report covers " + std::to_string(flagged.size()) +
                    " samples, dataset has " + std::to_string(data.data.size()));
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < flagged.size(); ++i)
    if (!flagged[i]) keep.push_back(i);
  PoisonedDataset out;
  out.data = subset(data.data, keep, data.data.name + "-filtered");
  for (std::size_t i : keep) out.poison_mask.push_back(data.poison_mask[i]);
  return out;
}

}  // namespace poisonforge
