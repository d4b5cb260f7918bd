#include "codedvtr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "codedvtr/config.hpp"
#include "codedvtr/error.hpp"

namespace cvtr {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

nlohmann::json slices_json(const ParamStore& store) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : store.slices())
    out.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.offset}, {"trainable", s.trainable}});
  return out;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

std::string checkpoint_bytes(const Model& model, const AdamConfig& adam, std::uint64_t seed,
                             const nlohmann::json& extra) {
  nlohmann::json header{{"format", "codedvtr-checkpoint"},
                        {"version", 1},
                        {"model", model.config().to_json()},
                        {"optimizer", adam_to_json(adam)},
                        {"seed", seed},
                        {"slices", slices_json(model.store())},
                        {"payload", "f32le"},
                        {"values", model.store().size()},
                        {"extra", extra}};
  if (model.config().kind == BlockKind::coded) {
    const std::string cb = model.codebook().dump();
    header["codebook"] = model.codebook().to_json();
    header["codebook_hash"] = hex64(fnv1a64(cb));
  }
  const std::string text = header.dump();
  std::string out;
  put_u64(out, text.size());
  out += text;
  for (double v : model.store().all_values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  return out;
}

void save_checkpoint(const std::string& path, const Model& model, const AdamConfig& adam, std::uint64_t seed,
                     const nlohmann::json& extra) {
  const std::string bytes = checkpoint_bytes(model, adam, seed, extra);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw IoError(path + ": truncated checkpoint");
  const std::uint64_t length = get_u64(bytes, 0);
  if (length > bytes.size() - 8) throw IoError(path + ": truncated checkpoint header");
  const nlohmann::json header = nlohmann::json::parse(bytes.substr(8, length), nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "codedvtr-checkpoint")
    throw IoError(path + ": not a checkpoint");

  const ModelConfig config = ModelConfig::from_json(header.at("model"));
  patterns::RegionCodebook codebook;
  if (header.contains("codebook")) {
    codebook = patterns::RegionCodebook::from_json(header["codebook"]);
    if (hex64(fnv1a64(codebook.dump())) != header.value("codebook_hash", ""))
      throw IoError(path + ": codebook hash mismatch");
  }
  LoadedCheckpoint out{Model(config, header.contains("codebook") ? &codebook : nullptr),
                       adam_from_json(header.at("optimizer")), header.value("seed", std::uint64_t{0}), header};
  if (slices_json(out.model.store()) != header.at("slices"))
    throw StructuralError(path + ": parameter layout does not match the model config");
  const std::size_t count = out.model.store().size();
  if (bytes.size() != 8 + length + 4 * count) throw IoError(path + ": payload size mismatch");
  auto values = out.model.store().all_values();
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + length + 4 * i + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace cvtr
