// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

// LORAFUS1 tensor container.
//
//   offset 0   8 bytes   magic "LORAFUS1"
//   offset 8   u32 LE    header length N
//   offset 12  N bytes   UTF-8 JSON header
//   ...        payload   little-endian IEEE-754 float32 tensors, row-major,
//                        laid out contiguously in header "tensors" order
//   ...        u32 LE    CRC32 of the payload bytes
//
// The JSON header always carries "format_version" (currently 1), "section"
// ("ADAPTER" or "BASE"), "payload_bytes" and a "tensors" table of
// {name, rows, cols, offset}. Section-specific metadata sits alongside.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <json.hpp>
#include <zlib.h>

#include "lorafuse/adapter.hpp"
#include "lorafuse/error.hpp"
#include "lorafuse/matrix.hpp"

namespace lorafuse {

inline constexpr std::string_view kContainerMagic = "LORAFUS1";
inline constexpr int kContainerVersion = 1;
inline constexpr std::string_view kSectionAdapter = "ADAPTER";
inline constexpr std::string_view kSectionBase = "BASE";

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Container {
  std::string section;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(n)));
}

inline std::vector<std::uint8_t> encode_f32(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> payload;
  for (const auto& t : tensors) {
    for (double v : t.value.data()) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) {
        throw FormatError(FormatErrorKind::validation,
                          "tensor '" + t.name + "' has a value not representable as float32");
      }
      put_u32(payload, std::bit_cast<std::uint32_t>(f));
    }
  }
  return payload;
}

inline nlohmann::json tensor_table(const std::vector<NamedTensor>& tensors) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    table.push_back({{"name", t.name},
                     {"rows", t.value.rows()},
                     {"cols", t.value.cols()},
                     {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.value.size()) * 4;
  }
  return table;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::vector<std::uint8_t>::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  const std::size_t pad = static_cast<std::size_t>(std::count(text.begin(), text.end(), '='));
  std::replace(text.begin(), text.end(), '=', 'A');
  std::vector<std::uint8_t> out;
  try {
    for (It it(text.begin()), end(text.end()); it != end; ++it)
      out.push_back(static_cast<std::uint8_t>(*it));
  } catch (const std::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, std::string("bad base64: ") + e.what());
  }
  out.resize(out.size() - std::min(pad, out.size()));
  return out;
}

/// Reads the tensors table and returns the total payload size it describes.
inline std::uint64_t checked_payload_size(const nlohmann::json& table) {
  if (!table.is_array()) throw FormatError(FormatErrorKind::malformed_header, "missing tensors table");
  std::uint64_t expected_offset = 0;
  for (const auto& entry : table) {
    if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string() ||
        !entry.contains("rows") || !entry["rows"].is_number_unsigned() ||
        !entry.contains("cols") || !entry["cols"].is_number_unsigned() ||
        !entry.contains("offset") || !entry["offset"].is_number_unsigned()) {
      throw FormatError(FormatErrorKind::malformed_header, "bad tensors table entry");
    }
    const auto rows = entry["rows"].get<std::uint64_t>();
    const auto cols = entry["cols"].get<std::uint64_t>();
    if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
      throw FormatError(FormatErrorKind::malformed_header,
                        "tensor '" + entry["name"].get<std::string>() + "' has invalid shape");
    }
    if (entry["offset"].get<std::uint64_t>() != expected_offset) {
      throw FormatError(FormatErrorKind::malformed_header,
                        "tensor '" + entry["name"].get<std::string>() + "' offset is not contiguous");
    }
    expected_offset += rows * cols * 4;
  }
  return expected_offset;
}

inline std::vector<NamedTensor> decode_tensors(const nlohmann::json& table, const std::uint8_t* payload) {
  std::vector<NamedTensor> out;
  for (const auto& entry : table) {
    const auto rows = entry["rows"].get<std::size_t>();
    const auto cols = entry["cols"].get<std::size_t>();
    const auto offset = entry["offset"].get<std::size_t>();
    std::vector<double> values(rows * cols);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float f = std::bit_cast<float>(get_u32(payload + offset + 4 * i));
      if (!std::isfinite(f)) {
        throw FormatError(FormatErrorKind::validation,
                          "tensor '" + entry["name"].get<std::string>() + "' holds a non-finite value");
      }
      values[i] = f;
    }
    out.push_back({entry["name"].get<std::string>(), Matrix(rows, cols, std::move(values))});
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  nlohmann::json header = c.meta;
  header["format_version"] = kContainerVersion;
  header["section"] = c.section;
  header["tensors"] = detail::tensor_table(c.tensors);
  const auto payload = detail::encode_f32(c.tensors);
  header["payload_bytes"] = payload.size();
  const std::string header_text = header.dump();

  std::vector<std::uint8_t> out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.insert(out.end(), header_text.begin(), header_text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  detail::put_u32(out, detail::crc32_of(payload.data(), payload.size()));
  return out;
}

inline Container decode_container(std::span<const std::uint8_t> bytes) {
  const std::size_t magic_len = kContainerMagic.size();
  const auto prefix = std::min(bytes.size(), magic_len);
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(prefix),
                  kContainerMagic.begin())) {
    throw FormatError(FormatErrorKind::bad_magic, "file does not start with LORAFUS1");
  }
  if (bytes.size() < magic_len + 4) {
    throw FormatError(FormatErrorKind::truncated, "file ends before the header length");
  }
  const std::size_t header_len = detail::get_u32(bytes.data() + magic_len);
  const std::size_t header_begin = magic_len + 4;
  if (bytes.size() < header_begin + header_len) {
    throw FormatError(FormatErrorKind::truncated, "file ends inside the JSON header");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_begin),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(header_begin + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, e.what());
  }
  if (!header.is_object() || !header.contains("format_version") ||
      !header["format_version"].is_number_integer()) {
    throw FormatError(FormatErrorKind::malformed_header, "missing integer format_version");
  }
  if (header["format_version"].get<int>() != kContainerVersion) {
    throw FormatError(FormatErrorKind::unsupported_version,
                      "version " + header["format_version"].dump() + " (expected 1)");
  }
  if (!header.contains("section") || !header["section"].is_string()) {
    throw FormatError(FormatErrorKind::malformed_header, "missing section tag");
  }
  const std::uint64_t payload_len = detail::checked_payload_size(header.value("tensors", nlohmann::json()));
  if (!header.contains("payload_bytes") || header["payload_bytes"] != payload_len) {
    throw FormatError(FormatErrorKind::malformed_header, "payload_bytes disagrees with tensors table");
  }

  const std::size_t payload_begin = header_begin + header_len;
  const std::size_t expected_size = payload_begin + payload_len + 4;
  if (bytes.size() < expected_size) {
    throw FormatError(FormatErrorKind::truncated,
                      "expected " + std::to_string(expected_size) + " bytes, found " +
                          std::to_string(bytes.size()));
  }
  if (bytes.size() > expected_size) {
    throw FormatError(FormatErrorKind::malformed_header, "trailing bytes after checksum");
  }
  const std::uint8_t* payload = bytes.data() + payload_begin;
  const std::uint32_t stored = detail::get_u32(payload + payload_len);
  const std::uint32_t actual = detail::crc32_of(payload, payload_len);
  if (stored != actual) throw FormatError(FormatErrorKind::checksum_mismatch, "payload CRC32 differs");

  Container c;
  c.section = header["section"].get<std::string>();
  c.tensors = detail::decode_tensors(header["tensors"], payload);
  c.meta = std::move(header);
  for (const char* key : {"format_version", "section", "tensors", "payload_bytes"}) c.meta.erase(key);
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::io, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Adapters

inline Container adapter_container(const LoraAdapter& adapter) {
  if (auto findings = validate_adapter(adapter); has_errors(findings)) {
    for (const auto& f : findings)
      if (f.severity == Severity::error) throw FormatError(FormatErrorKind::validation, f.to_string());
  }
  Container c;
  c.section = std::string(kSectionAdapter);
  int top_rank = 1;
  double top_alpha = 1.0;
  if (!adapter.layers.empty()) {
    top_rank = adapter.layers.begin()->second.rank;
    top_alpha = adapter.layers.begin()->second.alpha;
  }
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [id, layer] : adapter.layers) {
    layers.push_back({{"id", id}, {"rank", layer.rank}, {"alpha", layer.alpha}});
    c.tensors.push_back({id + ".a", layer.a});
    c.tensors.push_back({id + ".b", layer.b});
  }
  c.meta = {{"name", adapter.name}, {"rank", top_rank}, {"alpha", top_alpha}, {"layers", layers}};
  return c;
}

inline LoraAdapter adapter_from_container(const Container& c) {
  if (c.section != kSectionAdapter) {
    throw FormatError(FormatErrorKind::malformed_header, "section '" + c.section + "' is not ADAPTER");
  }
  const auto& m = c.meta;
  try {
    if (m.at("rank").get<int>() < 1) throw FormatError(FormatErrorKind::validation, "header rank must be >= 1");
    if (!(m.at("alpha").get<double>() > 0.0))
      throw FormatError(FormatErrorKind::validation, "header alpha must be positive");
    LoraAdapter adapter{m.at("name").get<std::string>(), {}};
    const auto& layers = m.at("layers");
    if (c.tensors.size() != 2 * layers.size()) {
      throw FormatError(FormatErrorKind::malformed_header, "layer table and tensor table disagree");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto id = layers[i].at("id").get<std::string>();
      if (c.tensors[2 * i].name != id + ".a" || c.tensors[2 * i + 1].name != id + ".b") {
        throw FormatError(FormatErrorKind::malformed_header, "tensor names do not match layer '" + id + "'");
      }
      LoraLayer layer{c.tensors[2 * i].value, c.tensors[2 * i + 1].value,
                      layers[i].at("rank").get<int>(), layers[i].at("alpha").get<double>()};
      if (!adapter.layers.emplace(id, std::move(layer)).second) {
        throw FormatError(FormatErrorKind::validation, "duplicate target module '" + id + "'");
      }
    }
    for (const auto& f : validate_adapter(adapter))
      if (f.severity == Severity::error) throw FormatError(FormatErrorKind::validation, f.to_string());
    return adapter;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, e.what());
  }
}

inline std::vector<std::uint8_t> encode_adapter(const LoraAdapter& adapter) {
  return encode_container(adapter_container(adapter));
}

inline LoraAdapter decode_adapter(std::span<const std::uint8_t> bytes) {
  return adapter_from_container(decode_container(bytes));
}

inline void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  write_file_bytes(path, encode_adapter(adapter));
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) {
  return decode_adapter(read_file_bytes(path));
}

/// Debug export: container metadata plus the float32 payload as base64.
inline nlohmann::json adapter_to_json(const LoraAdapter& adapter) {
  const Container c = adapter_container(adapter);
  nlohmann::json j = c.meta;
  j["format_version"] = kContainerVersion;
  j["section"] = c.section;
  j["tensors"] = detail::tensor_table(c.tensors);
  j["payload_base64"] = detail::base64_encode(detail::encode_f32(c.tensors));
  return j;
}

inline LoraAdapter adapter_from_json(const nlohmann::json& j) {
  try {
    const auto payload = detail::base64_decode(j.at("payload_base64").get<std::string>());
    if (payload.size() != detail::checked_payload_size(j.at("tensors"))) {
      throw FormatError(FormatErrorKind::truncated, "base64 payload size disagrees with tensors table");
    }
    Container c;
    c.section = j.at("section").get<std::string>();
    c.tensors = detail::decode_tensors(j.at("tensors"), payload.data());
    c.meta = j;
    return adapter_from_container(c);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, e.what());
  }
}

/// Rounds every factor entry to the nearest float32, matching what a
/// save/load cycle produces.
inline LoraAdapter round_to_f32(LoraAdapter adapter) {
  for (auto& [id, layer] : adapter.layers) {
    for (double& v : layer.a.data()) v = static_cast<float>(v);
    for (double& v : layer.b.data()) v = static_cast<float>(v);
  }
  return adapter;
}

}  // namespace lorafuse
