#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "poisonforge/tensor.hpp"

namespace poisonforge {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// PFW1 container: magic "PFW1", then per tensor
//   u32 name_len | name bytes (UTF-8) | u32 rank | u32 dims[rank] | f32 values[prod(dims)]
// All integers and floats little-endian.
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace poisonforge
