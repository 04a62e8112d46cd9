#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "poisonforge/data.hpp"

namespace pftest {

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Writes an IDX image/label pair of `rows`x`cols` bytes per image.
inline void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                      const std::vector<std::vector<unsigned char>>& pixels,
                      const std::vector<unsigned char>& label_bytes, std::uint32_t rows,
                      std::uint32_t cols) {
  std::filesystem::create_directories(images.parent_path());
  std::ofstream img(images, std::ios::binary);
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(pixels.size()));
  put_be32(img, rows);
  put_be32(img, cols);
  for (const auto& p : pixels) img.write(reinterpret_cast<const char*>(p.data()), p.size());
  std::ofstream lab(labels, std::ios::binary);
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(label_bytes.size()));
  lab.write(reinterpret_cast<const char*>(label_bytes.data()), label_bytes.size());
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("poisonforge-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Ten-class 28x28 toy data: class c is a bright vertical bar at column 2c+4
// plus a little noise, so a small classifier separates it quickly.
inline poisonforge::LabeledDataset toy_digits(std::size_t per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.15f);
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < 10; ++c) {
      std::vector<float> img(784);
      for (auto& v : img) v = noise(rng);
      const std::size_t col = 4 + 2 * static_cast<std::size_t>(c);
      for (std::size_t y = 4; y < 24; ++y) {
        img[y * 28 + col] = 0.9f;
        img[y * 28 + col + 1] = 0.9f;
      }
      rows.push_back(std::move(img));
      labels.push_back(c);
    }
  }
  poisonforge::LabeledDataset d;
  d.name = "toy";
  d.images = poisonforge::stack_images(rows, 28);
  d.labels = std::move(labels);
  return d;
}

// MNIST directory for data-dependent tests, or empty when unavailable.
inline std::filesystem::path mnist_dir() {
  const char* env = std::getenv("POISONFORGE_DATA");
  std::filesystem::path dir = env && *env ? env : "";
#ifdef POISONFORGE_TEST_DATA_DIR
  if (dir.empty()) dir = POISONFORGE_TEST_DATA_DIR;
#endif
  if (dir.empty() || !std::filesystem::exists(dir / "train-images-idx3-ubyte")) return {};
  return dir;
}

}  // namespace pftest
