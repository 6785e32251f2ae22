// SPDX-License-Identifier: Apache-2.0
#pragma once

// Named-tensor container.
//
// Byte layout:
//   "XPTC"                     4 bytes magic
//   version                    u32 little-endian, major in the high 16 bits
//   header_length              u64 little-endian
//   header                     UTF-8 JSON, header_length bytes
//   payload                    concatenated raw tensors
//
// The header is {"metadata": {string: string}, "tensors": {name: {"dtype",
// "shape", "offset", "length"}}} with offsets relative to the payload start.
// Floats are little-endian IEEE-754; u8 tensors hold {0,1} masks only.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "xpert/errors.hpp"
#include "xpert/matrix.hpp"

namespace xpert {

inline constexpr std::uint32_t kContainerVersion = 0x00010000;  // 1.0

enum class DType { f64, f32, u8 };

std::string to_string(DType d);
std::size_t dtype_size(DType d);

struct NamedTensor {
  Matrix value;  // 1-D tensors are held as a single row
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;  // empty means {rows, cols} of value

  static NamedTensor f64(Matrix m) { return {std::move(m), DType::f64, {}}; }
  static NamedTensor mask(Matrix m) { return {std::move(m), DType::u8, {}}; }
  static NamedTensor vector(const std::vector<double>& v);
};

struct TensorContainer {
  std::map<std::string, NamedTensor> tensors;
  std::map<std::string, std::string> metadata;

  const Matrix& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

class ContainerError : public ValidationError {
 public:
  enum class Code {
    io,
    bad_magic,
    unsupported_version,
    malformed_header,
    overlapping_offsets,
    truncated_payload,
    invalid_tensor,
  };

  ContainerError(Code code, const std::string& what);
  Code code() const noexcept { return code_; }
  const char* kind() const noexcept override;

 private:
  Code code_;
};

std::string encode_container(const TensorContainer& c);
TensorContainer decode_container(std::string_view bytes);

void save_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer load_container(const std::filesystem::path& path);

}  // namespace xpert
