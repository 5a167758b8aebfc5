#pragma once

// SVTF tensor files: "SVTF" magic, u32 LE version (1), u8 dtype (0=f32, 1=f64,
// 2=u8), u8 ndim, ndim x u64 LE dims, then the row-major LE payload.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sendvae/core/tensor.hpp"

namespace sendvae::svtf {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

inline constexpr std::uint32_t kVersion = 1;
inline constexpr int kMaxDims = 6;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::U8; }

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t);

AnyTensor decode(std::span<const std::uint8_t> bytes);

template <typename T>
void write(const std::filesystem::path& path, const Tensor<T>& t);

AnyTensor read(const std::filesystem::path& path);

// Reads and requires the stored dtype to be T.
template <typename T>
Tensor<T> read_as(const std::filesystem::path& path);

}  // namespace sendvae::svtf
