#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/sha256.hpp"

namespace pcct {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kHuConventionTag = "water=0,air=-1000";

/// Raw float32 array plus the metadata carried by its JSON sidecar.
struct RawArray {
  GridGeometry geometry;
  std::vector<float> values;
  std::string id;
  std::string hu_convention = kHuConventionTag;
  json extra = json::object();
};

inline fs::path sidecar_path(const fs::path& raw) {
  fs::path p = raw;
  p.replace_extension(".json");
  return p;
}

namespace detail {

inline std::vector<std::byte> encode_le(std::span<const float> v) {
  std::vector<std::byte> out(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<std::byte>((u >> (8 * b)) & 0xFF);
  }
  return out;
}

inline std::vector<float> decode(std::span<const std::byte> bytes, bool little) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) {
      int shift = little ? 8 * b : 8 * (3 - b);
      u |= static_cast<std::uint32_t>(std::to_integer<unsigned>(bytes[4 * i + b])) << shift;
    }
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << s;
}

}  // namespace detail

inline void write_json(const fs::path& p, const json& j) { detail::write_text(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

/// Writes `<path>` (little-endian float32 payload) and `<path stem>.json`.
inline void save_raw(const RawArray& a, const fs::path& path) {
  a.geometry.validate();
  if (a.values.size() != a.geometry.size()) throw ConfigError("payload length does not match shape");
  auto bytes = detail::encode_le(a.values);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  json meta = {
      {"id", a.id},
      {"shape", {a.geometry.rows, a.geometry.cols}},
      {"spacing_mm", {a.geometry.dy, a.geometry.dx}},
      {"origin_mm", {a.geometry.y0, a.geometry.x0}},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"hu_convention", a.hu_convention},
      {"sha256", sha256_hex(bytes)},
  };
  if (!a.extra.empty()) meta["extra"] = a.extra;
  write_json(sidecar_path(path), meta);
}

inline RawArray load_raw(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  if (!fs::exists(path)) throw FormatError("missing payload " + path.string());
  if (!fs::exists(side)) throw FormatError("missing sidecar " + side.string());
  json meta = read_json(side);
  RawArray a;
  try {
    a.id = meta.value("id", std::string{});
    a.geometry.rows = meta.at("shape").at(0).get<int>();
    a.geometry.cols = meta.at("shape").at(1).get<int>();
    a.geometry.dy = meta.at("spacing_mm").at(0).get<double>();
    a.geometry.dx = meta.at("spacing_mm").at(1).get<double>();
    a.geometry.y0 = meta.at("origin_mm").at(0).get<double>();
    a.geometry.x0 = meta.at("origin_mm").at(1).get<double>();
    a.hu_convention = meta.at("hu_convention").get<std::string>();
    if (meta.contains("extra")) a.extra = meta["extra"];
  } catch (const json::exception& e) {
    throw FormatError(side.string() + ": malformed sidecar (" + e.what() + ")");
  }
  if (meta.value("dtype", "") != "float32") throw FormatError(side.string() + ": unsupported dtype");
  const std::string endian = meta.value("endianness", "");
  if (endian != "little" && endian != "big") throw FormatError(side.string() + ": unknown endianness");
  try {
    a.geometry.validate();
  } catch (const ConfigError& e) {
    throw FormatError(side.string() + ": " + e.what());
  }

  std::ifstream in(path, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() != a.geometry.size() * 4) {
    throw FormatError(path.string() + ": payload holds " + std::to_string(raw.size()) + " bytes but sidecar shape " +
                      std::to_string(a.geometry.rows) + "x" + std::to_string(a.geometry.cols) + " needs " +
                      std::to_string(a.geometry.size() * 4));
  }
  auto bytes = std::as_bytes(std::span<const char>(raw));
  // The digest is always taken over the little-endian encoding of the values.
  a.values = detail::decode(bytes, endian == "little");
  const std::string digest = sha256_hex(std::span<const std::byte>(detail::encode_le(a.values)));
  if (digest != meta.value("sha256", "")) {
    throw FormatError(path.string() + ": checksum mismatch (payload does not match declared " + endian +
                      "-endian float32 data)");
  }
  return a;
}

inline void save_grid(const ImageGrid& img, const fs::path& path, const json& extra = json::object()) {
  RawArray a{img.geometry(), {img.values().begin(), img.values().end()}, img.id(), kHuConventionTag, extra};
  save_raw(a, path);
}

inline ImageGrid load_grid(const fs::path& path) {
  RawArray a = load_raw(path);
  if (a.hu_convention != kHuConventionTag) {
    throw FormatError(path.string() + ": not an HU image (hu_convention '" + a.hu_convention + "')");
  }
  return ImageGrid(a.geometry, std::move(a.values), a.id);
}

}  // namespace pcct
