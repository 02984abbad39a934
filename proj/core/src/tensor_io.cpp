#include "sparseloc/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace sparseloc {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'E', 'N'};
constexpr std::uint32_t kMaxRank = 16;

void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f64_le(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  if (!t.defined()) throw IoError("save_tensor: tensor is undefined");
  std::string buffer;
  buffer.reserve(8 + 4 * t.shape().size() + 8 * static_cast<std::size_t>(t.size()));
  buffer.append(kMagic, 4);
  put_u32_le(buffer, static_cast<std::uint32_t>(t.rank()));
  for (const int e : t.shape()) put_u32_le(buffer, static_cast<std::uint32_t>(e));
  for (const double v : t.data()) put_f64_le(buffer, v);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_tensor: cannot open " + tmp);
    out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (!out) throw IoError("save_tensor: short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_tensor: rename to " + path + " failed: " + ec.message());
}

Tensor load_tensor(const std::string& path, bool requires_grad) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_tensor: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("load_tensor: " + path + " is not a STEN file");
  }
  const std::uint32_t rank = get_u32_le(bytes.data() + 4);
  if (rank == 0 || rank > kMaxRank) {
    throw IoError("load_tensor: " + path + " has implausible rank " + std::to_string(rank));
  }
  if (bytes.size() < 8 + 4ULL * rank) throw IoError("load_tensor: truncated header in " + path);

  Shape shape(rank);
  std::int64_t count = 1;
  for (std::uint32_t d = 0; d < rank; ++d) {
    const std::uint32_t e = get_u32_le(bytes.data() + 8 + 4 * d);
    if (e == 0) throw IoError("load_tensor: zero extent in " + path);
    shape[d] = static_cast<int>(e);
    count *= e;
  }
  const std::size_t expected = 8 + 4ULL * rank + 8ULL * static_cast<std::size_t>(count);
  if (bytes.size() != expected) {
    throw IoError("load_tensor: " + path + " payload size mismatch (expected " +
                  std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()) + ")");
  }
  std::vector<double> data(static_cast<std::size_t>(count));
  const unsigned char* p = bytes.data() + 8 + 4ULL * rank;
  for (std::int64_t i = 0; i < count; ++i) data[i] = get_f64_le(p + 8 * i);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace sparseloc
