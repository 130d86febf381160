#include "keydyn/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "keydyn/errors.hpp"

namespace keydyn {

namespace fs = std::filesystem;

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

nlohmann::json config_to_json(const EncoderConfig& c) {
  return {{"max_len", c.max_len},   {"key_embed_dim", c.key_embed_dim},
          {"hidden", c.hidden},     {"layers", c.layers},
          {"heads", c.heads},       {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout},   {"out_dim", c.out_dim},
          {"mode", to_string(c.mode)}, {"norm", to_string(c.norm)}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.max_len = j.at("max_len").get<std::size_t>();
    c.key_embed_dim = j.at("key_embed_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.out_dim = j.at("out_dim").get<std::size_t>();
    c.mode = parse_encoder_mode(j.at("mode").get<std::string>());
    c.norm = parse_norm_placement(j.value("norm", std::string("post")));
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid encoder config: ") + ex.what());
  }
  c.validate();
  return c;
}

namespace {

void put_f32(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char buf[4];
  std::memcpy(buf, &bits, 4);
  out.append(buf, 4);
}

double get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const fs::path& dir,
                     const nlohmann::json& metadata) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& t : tensor_views(model.weights)) {
    index.push_back({{"name", t.name},
                     {"offset", blob.size()},
                     {"shape", {t.rows, t.cols}},
                     {"dtype", "f32"}});
    // Eigen storage is column-major; emit row-major.
    for (Eigen::Index r = 0; r < t.rows; ++r) {
      for (Eigen::Index c = 0; c < t.cols; ++c) put_f32(blob, t.data[c * t.rows + r]);
    }
  }

  nlohmann::json manifest = {
      {"format", "keydyn-checkpoint"},
      {"version", 1},
      {"config", config_to_json(model.config)},
      {"sequence_length", model.sequence_length},
      {"norm_stats", {{"mean", model.norm.mean}, {"stddev", model.norm.stddev}}},
      {"tensor_file", kTensorFile},
      {"byte_order", "little"},
      {"total_bytes", blob.size()},
      {"tensor_checksum", hex64(fnv1a64(blob))},
      {"tensors", std::move(index)},
      {"metadata", metadata},
  };

  {
    std::ofstream out(dir / kTensorFile, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("failed writing " + (dir / kTensorFile).string());
  }
  {
    std::ofstream out(dir / kManifestFile, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + (dir / kManifestFile).string());
  }
}

nlohmann::json read_manifest(const fs::path& dir) {
  const auto text = read_file(dir / kManifestFile);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& ex) {
    throw CorruptionError(std::string("manifest is not valid JSON: ") + ex.what());
  }
}

EncoderModel load_checkpoint(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  if (manifest.value("format", std::string()) != "keydyn-checkpoint") {
    throw CorruptionError("not a keydyn checkpoint: " + dir.string());
  }
  EncoderModel model;
  model.config = config_from_json(manifest.at("config"));
  model.weights = zero_weights(model.config);
  try {
    model.sequence_length = manifest.at("sequence_length").get<std::size_t>();
    const auto& ns = manifest.at("norm_stats");
    model.norm.mean = ns.at("mean").get<std::array<double, kTemporalChannels>>();
    model.norm.stddev = ns.at("stddev").get<std::array<double, kTemporalChannels>>();
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptionError(std::string("manifest fields: ") + ex.what());
  }
  if (model.sequence_length < 2 || model.sequence_length > model.config.max_len) {
    throw CorruptionError("sequence_length outside [2, max_len]");
  }

  const auto blob = read_file(dir / manifest.value("tensor_file", std::string(kTensorFile)));
  const auto total = manifest.value("total_bytes", std::size_t{0});
  if (blob.size() != total) {
    throw CorruptionError("tensor file has " + std::to_string(blob.size()) + " bytes, manifest says " +
                          std::to_string(total));
  }
  if (manifest.contains("tensor_checksum") &&
      manifest["tensor_checksum"].get<std::string>() != hex64(fnv1a64(blob))) {
    throw CorruptionError("tensor checksum mismatch");
  }

  auto views = tensor_views(model.weights);
  const auto& index = manifest.at("tensors");
  if (!index.is_array() || index.size() != views.size()) {
    throw CorruptionError("tensor index does not match the configured architecture");
  }
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto& t = views[i];
    const auto& entry = index[i];
    const auto name = entry.value("name", std::string());
    const auto shape = entry.value("shape", std::vector<Eigen::Index>{});
    const auto offset = entry.value("offset", std::size_t{0});
    if (name != t.name || shape != std::vector<Eigen::Index>{t.rows, t.cols}) {
      throw CorruptionError("tensor '" + name + "' shape/name mismatch (expected '" + t.name + "')");
    }
    const auto bytes = static_cast<std::size_t>(t.size()) * 4;
    if (offset + bytes > blob.size()) throw CorruptionError("tensor '" + name + "' out of range");
    const char* p = blob.data() + offset;
    for (Eigen::Index r = 0; r < t.rows; ++r) {
      for (Eigen::Index c = 0; c < t.cols; ++c, p += 4) t.data[c * t.rows + r] = get_f32(p);
    }
  }
  for (const auto& t : tensor_views(model.weights)) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!std::isfinite(t.data[i])) throw CorruptionError("non-finite value in " + t.name);
    }
  }
  return model;
}

std::string checkpoint_hash(const fs::path& dir) {
  return hex64(fnv1a64(read_file(dir / kManifestFile)));
}

}  // namespace keydyn
