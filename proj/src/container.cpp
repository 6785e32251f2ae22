// SPDX-License-Identifier: Apache-2.0
#include "xpert/container.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

namespace xpert {

using json = nlohmann::json;
using Code = ContainerError::Code;

std::string to_string(DType d) {
  switch (d) {
    case DType::f64: return "f64";
    case DType::f32: return "f32";
    case DType::u8: return "u8";
  }
  return "?";
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f64: return 8;
    case DType::f32: return 4;
    case DType::u8: return 1;
  }
  return 0;
}

NamedTensor NamedTensor::vector(const std::vector<double>& v) {
  return {Matrix::row_vector(v), DType::f64, {v.size()}};
}

const Matrix& TensorContainer::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ValidationError("container has no tensor '" + name + "'");
  return it->second.value;
}

ContainerError::ContainerError(Code code, const std::string& what)
    : ValidationError(what), code_(code) {}

const char* ContainerError::kind() const noexcept {
  switch (code_) {
    case Code::io: return "io";
    case Code::bad_magic: return "bad_magic";
    case Code::unsupported_version: return "unsupported_version";
    case Code::malformed_header: return "malformed_header";
    case Code::overlapping_offsets: return "overlapping_offsets";
    case Code::truncated_payload: return "truncated_payload";
    case Code::invalid_tensor: return "invalid_tensor";
  }
  return "container";
}

namespace {

constexpr char kMagic[4] = {'X', 'P', 'T', 'C'};
constexpr std::size_t kPreamble = 4 + 4 + 8;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

template <typename U>
U get_le(std::string_view in, std::size_t pos) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  }
  return v;
}

bool valid_name(const std::string& name) {
  return !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
    return c >= 0x20 && c <= 0x7E;
  });
}

std::vector<std::uint64_t> effective_shape(const NamedTensor& t) {
  if (!t.shape.empty()) return t.shape;
  return {t.value.rows(), t.value.cols()};
}

void encode_values(std::string& out, const NamedTensor& t, const std::string& name) {
  for (double v : t.value.data()) {
    switch (t.dtype) {
      case DType::f64:
        put_le(out, std::bit_cast<std::uint64_t>(v));
        break;
      case DType::f32:
        put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        break;
      case DType::u8:
        if (v != 0.0 && v != 1.0) {
          throw ContainerError(Code::invalid_tensor, "tensor '" + name + "': u8 masks must be 0 or 1");
        }
        out.push_back(static_cast<char>(v == 1.0 ? 1 : 0));
        break;
    }
  }
}

DType parse_dtype(const std::string& s) {
  if (s == "f64") return DType::f64;
  if (s == "f32") return DType::f32;
  if (s == "u8") return DType::u8;
  throw ContainerError(Code::malformed_header, "unknown dtype '" + s + "'");
}

struct Entry {
  std::string name;
  DType dtype;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset;
  std::uint64_t length;
};

}  // namespace

std::string encode_container(const TensorContainer& c) {
  json header;
  header["metadata"] = json::object();
  for (const auto& [k, v] : c.metadata) header["metadata"][k] = v;
  header["tensors"] = json::object();

  std::string payload;
  for (const auto& [name, t] : c.tensors) {
    if (!valid_name(name)) {
      throw ContainerError(Code::malformed_header, "tensor names must be nonempty printable ASCII");
    }
    const auto shape = effective_shape(t);
    std::uint64_t elems = 1;
    for (auto d : shape) elems *= d;
    if (elems != t.value.size()) {
      throw ContainerError(Code::invalid_tensor, "tensor '" + name + "': shape does not match data");
    }
    const std::uint64_t offset = payload.size();
    encode_values(payload, t, name);
    header["tensors"][name] = {{"dtype", to_string(t.dtype)},
                               {"shape", shape},
                               {"offset", offset},
                               {"length", payload.size() - offset}};
  }
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

TensorContainer decode_container(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ContainerError(Code::bad_magic, "not a tensor container (missing XPTC magic)");
  }
  if (bytes.size() < kPreamble) {
    throw ContainerError(Code::malformed_header, "container preamble is truncated");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if ((version >> 16) != (kContainerVersion >> 16)) {
    throw ContainerError(Code::unsupported_version,
                         "unsupported container major version " + std::to_string(version >> 16));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreamble) {
    throw ContainerError(Code::malformed_header, "header length exceeds file size");
  }
  const std::string_view header_text = bytes.substr(kPreamble, header_len);
  const std::string_view payload = bytes.substr(kPreamble + header_len);

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw ContainerError(Code::malformed_header, std::string("header is not valid JSON: ") + e.what());
  }

  TensorContainer out;
  std::vector<Entry> entries;
  try {
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
      throw ContainerError(Code::malformed_header, "header lacks a 'tensors' object");
    }
    if (header.contains("metadata")) {
      for (const auto& [k, v] : header["metadata"].items()) out.metadata[k] = v.get<std::string>();
    }
    for (const auto& [name, spec] : header["tensors"].items()) {
      if (!valid_name(name)) {
        throw ContainerError(Code::malformed_header, "invalid tensor name in header");
      }
      Entry e{name, parse_dtype(spec.at("dtype").get<std::string>()),
              spec.at("shape").get<std::vector<std::uint64_t>>(),
              spec.at("offset").get<std::uint64_t>(), spec.at("length").get<std::uint64_t>()};
      if (e.shape.empty() || e.shape.size() > 2) {
        throw ContainerError(Code::malformed_header, "tensor '" + name + "' must be 1-D or 2-D");
      }
      std::uint64_t elems = 1;
      for (auto d : e.shape) {
        if (d == 0) throw ContainerError(Code::malformed_header, "tensor '" + name + "' has a zero dimension");
        elems *= d;
      }
      if (e.length != elems * dtype_size(e.dtype)) {
        throw ContainerError(Code::malformed_header,
                             "tensor '" + name + "': byte length does not match shape and dtype");
      }
      entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ContainerError(Code::malformed_header, std::string("header schema error: ") + e.what());
  }

  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (std::size_t k = 1; k < by_offset.size(); ++k) {
    if (by_offset[k - 1]->offset + by_offset[k - 1]->length > by_offset[k]->offset) {
      throw ContainerError(Code::overlapping_offsets, "tensors '" + by_offset[k - 1]->name +
                                                          "' and '" + by_offset[k]->name +
                                                          "' overlap");
    }
  }

  for (const auto& e : entries) {
    if (e.offset > payload.size() || e.length > payload.size() - e.offset) {
      throw ContainerError(Code::truncated_payload, "tensor '" + e.name + "' extends past the payload");
    }
    const std::size_t rows = e.shape.size() == 2 ? e.shape[0] : 1;
    const std::size_t cols = e.shape.back();
    Matrix m(rows, cols);
    auto d = m.data();
    const std::size_t sz = dtype_size(e.dtype);
    for (std::size_t k = 0; k < d.size(); ++k) {
      const std::size_t pos = e.offset + k * sz;
      switch (e.dtype) {
        case DType::f64:
          d[k] = std::bit_cast<double>(get_le<std::uint64_t>(payload, pos));
          break;
        case DType::f32:
          d[k] = std::bit_cast<float>(get_le<std::uint32_t>(payload, pos));
          break;
        case DType::u8: {
          const auto v = static_cast<unsigned char>(payload[pos]);
          if (v > 1) {
            throw ContainerError(Code::invalid_tensor, "mask '" + e.name + "' holds a value other than 0/1");
          }
          d[k] = v;
          break;
        }
      }
      if (!std::isfinite(d[k])) {
        throw ContainerError(Code::invalid_tensor, "tensor '" + e.name + "' holds a non-finite value");
      }
    }
    out.tensors.emplace(e.name, NamedTensor{std::move(m), e.dtype, e.shape});
  }
  return out;
}

void save_container(const std::filesystem::path& path, const TensorContainer& c) {
  const std::string bytes = encode_container(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContainerError(Code::io, "cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ContainerError(Code::io, "failed writing '" + path.string() + "'");
}

TensorContainer load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ContainerError(Code::io, "cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace xpert
