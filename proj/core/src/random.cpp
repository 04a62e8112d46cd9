#include "poisonforge/random.hpp"

#include <numeric>

#include "poisonforge/errors.hpp"

namespace poisonforge {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(root) ^ h);
}

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ConfigError("rng: index() over an empty range");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  std::vector<float> v(shape_numel(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : v) x = static_cast<float>(dist(engine_));
  return Tensor(std::move(shape), std::move(v));
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  std::vector<float> v(shape_numel(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : v) x = static_cast<float>(dist(engine_));
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Fisher-Yates with our own index draw so the order is library-independent.
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n) throw ConfigError("rng: cannot draw " + std::to_string(k) + " of " + std::to_string(n));
  auto p = permutation(n);
  p.resize(k);
  return p;
}

}  // namespace poisonforge
