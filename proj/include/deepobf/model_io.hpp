#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepobf/model_graph.hpp"

namespace deepobf {

/// Model file layout (all integers little-endian):
///
///   "DOBF" | u32 version | u64 n | n bytes UTF-8 structure text |
///   u32 entry count | per entry: u32 id length, id bytes, u32 rank,
///   rank x u32 extents, f32 values | u32 CRC32 of every preceding byte
///
/// Entries are parameter arrays keyed "<node>.<field>", sorted by key.
inline constexpr std::uint32_t kModelFormatVersion = 1;

class ModelFileError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, checksum, malformed };
  ModelFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Human-readable structure description (input extent, class count, blocks,
/// nodes, frozen set). Contains no parameter values.
std::string structure_text(const ModelGraph& m);
/// Parses structure_text() output; the result has an empty parameter store.
ModelGraph parse_structure(const std::string& text);

std::vector<std::uint8_t> serialize(const ModelGraph& m);
ModelGraph deserialize(std::span<const std::uint8_t> bytes);

void save(const ModelGraph& m, const std::filesystem::path& path);
ModelGraph load(const std::filesystem::path& path);
/// Reads only the structure section of a model file.
std::string read_structure_section(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}
/// Digest of the serialized model (structure and parameters).
std::uint64_t model_hash(const ModelGraph& m);
std::string hex64(std::uint64_t v);

}  // namespace deepobf
