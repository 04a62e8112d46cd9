#include "poisonforge/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "poisonforge/errors.hpp"

namespace poisonforge {
namespace {

constexpr std::array<char, 4> kMagic{'P', 'F', 'W', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), b.size());
}

bool get_u32(std::istream& in, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), b.size());
  if (in.gcount() != 4) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

std::uint32_t checked_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!get_u32(in, v)) throw DataError(std::string("checkpoint: truncated ") + what);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kMagic.data(), kMagic.size());
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw DataError("checkpoint: write failed");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMagic) throw DataError("checkpoint: bad magic, expected PFW1");
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t name_len = checked_u32(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (static_cast<std::uint32_t>(in.gcount()) != name_len) {
      throw DataError("checkpoint: truncated name");
    }
    const std::uint32_t rank = checked_u32(in, "rank");
    if (rank == 0) throw DataError("checkpoint: tensor '" + name + "' has rank 0");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(checked_u32(in, "dims"));
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<float>(checked_u32(in, "values"));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(out, tensors);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

}  // namespace poisonforge
