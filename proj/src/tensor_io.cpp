#include "se2/tensor_io.hpp"

#include <cstring>
#include <fstream>

namespace se2 {

namespace {

constexpr char kMagic[4] = {'S', 'E', '2', 'T'};

void put_u32_le(std::ofstream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t get_u32_le(std::ifstream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_se2t(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  const auto rank = static_cast<unsigned char>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : t.shape()) put_u32_le(os, static_cast<std::uint32_t>(e));
  static_assert(sizeof(float) == 4);
  // Little-endian host assumed; payload is float32 LE.
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw DataError("write failed: " + path.string());
}

Tensor read_se2t(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("not an SE2T file: " + path.string());
  unsigned char rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 1);
  std::vector<int> shape(rank);
  for (auto& e : shape) e = static_cast<int>(get_u32_le(is));
  if (!is) throw DataError("truncated SE2T header: " + path.string());
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!is) throw DataError("truncated SE2T payload: " + path.string());
  return t;
}

}  // namespace se2
