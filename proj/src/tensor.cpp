#include "crowdtree/tensor.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace crowdtree {

namespace {

constexpr std::array<char, 4> kMagic = {'T', 'G', 'E', '1'};
constexpr std::uint8_t kDtypeF64 = 1;

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw std::runtime_error("tensor archive: truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.ndim() > 255) throw std::invalid_argument("tensor archive: too many dims");
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, kDtypeF64);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.dims()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error("tensor archive: bad magic");
  const auto dtype = get_le<std::uint8_t>(in);
  if (dtype != kDtypeF64) {
    throw std::runtime_error("tensor archive: unsupported dtype tag " + std::to_string(dtype));
  }
  const auto ndim = get_le<std::uint8_t>(in);
  Shape dims(ndim);
  for (auto& d : dims) d = get_le<std::uint32_t>(in);
  Tensor t(dims);
  for (double& v : t.values()) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return read_tensor(in);
}

}  // namespace crowdtree
