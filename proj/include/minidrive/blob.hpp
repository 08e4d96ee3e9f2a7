#pragma once
// Tensor blob format: magic "CDT1", u32 rank, u32 extents (little-endian),
// raw f64 payload. Used by datasets and checkpoints.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace md::blob {

struct Blob {
  std::vector<int> shape;
  std::vector<double> data;
};

void write(std::ostream& os, const std::vector<int>& shape, const double* data);
Blob read(std::istream& is);

void write_file(const std::string& path, const std::vector<int>& shape, const double* data);
Blob read_file(const std::string& path);

// Size in bytes a blob with this shape occupies on disk.
std::uint64_t byte_size(const std::vector<int>& shape);

}  // namespace md::blob
