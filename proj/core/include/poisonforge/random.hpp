#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "poisonforge/tensor.hpp"

namespace poisonforge {

// Derives an independent stream seed from a root seed and a stage name
// ("data-split", "craft", "train", "defense", ...).
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view stream) : engine_(derive_seed(root, stream)) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);  // uniform in [0, n)

  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  std::vector<std::size_t> permutation(std::size_t n);
  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace poisonforge
