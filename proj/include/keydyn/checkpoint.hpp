#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "keydyn/encoder.hpp"

namespace keydyn {

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

nlohmann::json config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const nlohmann::json& j);

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kTensorFile = "tensors.bin";

/// Writes <dir>/manifest.json (config, normalization stats, tensor index) and
/// <dir>/tensors.bin (little-endian float32, row-major, concatenated in index
/// order). `metadata` is stored verbatim under the "metadata" key.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object());

/// Throws ConfigError for unknown modes or invalid configs and CorruptionError
/// when the tensor file or index disagrees with the config.
EncoderModel load_checkpoint(const std::filesystem::path& dir);

nlohmann::json read_manifest(const std::filesystem::path& dir);

/// Hash of the manifest bytes; the manifest embeds a checksum of the tensor
/// file, so this identifies the weights too.
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace keydyn
