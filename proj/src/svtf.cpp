#include "sendvae/svtf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sendvae::svtf {
namespace {

static_assert(std::endian::native == std::endian::little, "SVTF writer assumes a little-endian host");

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <typename U>
U get(std::span<const std::uint8_t> bytes, std::size_t& off, const char* what) {
  if (off + sizeof(U) > bytes.size())
    throw FormatError(std::string("truncated header: missing ") + what, off);
  U v;
  std::memcpy(&v, bytes.data() + off, sizeof(U));
  off += sizeof(U);
  return v;
}

std::size_t elem_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
  }
  return 0;
}

template <typename T>
Tensor<T> payload(std::span<const std::uint8_t> bytes, std::size_t off, Shape shape) {
  Tensor<T> t(std::move(shape));
  std::memcpy(t.ptr(), bytes.data() + off, static_cast<std::size_t>(t.size()) * sizeof(T));
  return t;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  if (t.ndim() > kMaxDims) throw FormatError("tensor rank exceeds 6", 9);
  std::vector<std::uint8_t> out{'S', 'V', 'T', 'F'};
  put<std::uint32_t>(out, kVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (Index d : t.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
  out.insert(out.end(), p, p + static_cast<std::size_t>(t.size()) * sizeof(T));
  return out;
}

AnyTensor decode(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SVTF", 4) != 0) throw FormatError("bad magic", 0);
  off = 4;
  const auto version = get<std::uint32_t>(bytes, off, "version");
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
  const auto dt = get<std::uint8_t>(bytes, off, "dtype");
  if (dt > 2) throw FormatError("unknown dtype " + std::to_string(dt), 8);
  const auto ndim = get<std::uint8_t>(bytes, off, "ndim");
  if (ndim > kMaxDims) throw FormatError("ndim " + std::to_string(ndim) + " exceeds 6", 9);
  Shape shape;
  for (int i = 0; i < ndim; ++i) shape.push_back(static_cast<Index>(get<std::uint64_t>(bytes, off, "dims")));
  const auto dtype = static_cast<DType>(dt);
  const std::size_t expected = static_cast<std::size_t>(numel(shape)) * elem_size(dtype);
  const std::size_t actual = bytes.size() - off;
  if (actual != expected)
    throw FormatError("payload length mismatch: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(actual),
                      off + std::min(actual, expected));
  switch (dtype) {
    case DType::F32: return payload<float>(bytes, off, shape);
    case DType::F64: return payload<double>(bytes, off, shape);
    case DType::U8: return payload<std::uint8_t>(bytes, off, shape);
  }
  throw FormatError("unknown dtype", 8);
}

template <typename T>
void write(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write failed for " + path.string());
}

AnyTensor read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

template <typename T>
Tensor<T> read_as(const std::filesystem::path& path) {
  auto any = read(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(path.string() + ": unexpected dtype", 8);
}

template std::vector<std::uint8_t> encode(const Tensor<float>&);
template std::vector<std::uint8_t> encode(const Tensor<double>&);
template std::vector<std::uint8_t> encode(const Tensor<std::uint8_t>&);
template void write(const std::filesystem::path&, const Tensor<float>&);
template void write(const std::filesystem::path&, const Tensor<double>&);
template void write(const std::filesystem::path&, const Tensor<std::uint8_t>&);
template Tensor<float> read_as(const std::filesystem::path&);
template Tensor<double> read_as(const std::filesystem::path&);
template Tensor<std::uint8_t> read_as(const std::filesystem::path&);

}  // namespace sendvae::svtf
