#include "minidrive/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "minidrive/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "blob format is little-endian; big-endian hosts unsupported");

namespace md::blob {

namespace {
constexpr char kMagic[4] = {'C', 'D', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
}  // namespace

std::uint64_t byte_size(const std::vector<int>& shape) {
  std::uint64_t n = 1;
  for (int e : shape) n *= static_cast<std::uint64_t>(e);
  return 4 + 4 + 4ull * shape.size() + 8ull * n;
}

void write(std::ostream& os, const std::vector<int>& shape, const double* data) {
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  std::uint64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ContractError("blob: non-positive extent");
    put_u32(os, static_cast<std::uint32_t>(e));
    n *= static_cast<std::uint64_t>(e);
  }
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(8 * n));
}

Blob read(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw ContractError("blob: bad magic");
  std::uint32_t rank = get_u32(is);
  if (rank > 8) throw ContractError("blob: implausible rank");
  Blob b;
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t e = get_u32(is);
    b.shape.push_back(static_cast<int>(e));
    n *= e;
  }
  b.data.resize(n);
  is.read(reinterpret_cast<char*>(b.data.data()), static_cast<std::streamsize>(8 * n));
  if (!is) throw ContractError("blob: truncated payload");
  return b;
}

void write_file(const std::string& path, const std::vector<int>& shape, const double* data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("blob: cannot open " + path);
  write(os, shape, data);
}

Blob read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("blob: cannot open " + path);
  return read(is);
}

}  // namespace md::blob
