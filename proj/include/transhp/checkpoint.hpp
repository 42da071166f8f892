#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "transhp/config.hpp"
#include "transhp/model.hpp"

// Self-describing checkpoint: 8-byte magic "THPCKPT1", u32 version, a
// length-prefixed key=value text block holding the model configuration, then
// named parameter tensors (u32 name length, name, u32 rank, u32 dims,
// little-endian fp32 payload). Parameters appear in the model's canonical
// order, so identical models serialize to identical bytes.

namespace transhp {

namespace detail_ckpt {

constexpr char kMagic[8] = {'T', 'H', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

inline void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t take_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw ParseError("'" + path + "': truncated checkpoint");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline std::string spec_string(const std::vector<PromptingSpec>& specs) {
  std::string out;
  for (const auto& s : specs) {
    if (!out.empty()) out += ";";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d:%d:%d:%.17g", s.layer_index, s.level_id, s.coarse_count,
                  s.lambda);
    out += buf;
  }
  return out;
}

inline std::vector<PromptingSpec> parse_spec_string(const std::string& text) {
  std::vector<PromptingSpec> specs;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find(';', pos);
    if (end == std::string::npos) end = text.size();
    PromptingSpec s;
    if (std::sscanf(text.substr(pos, end - pos).c_str(), "%d:%d:%d:%lf", &s.layer_index,
                    &s.level_id, &s.coarse_count, &s.lambda) != 4)
      throw ParseError("malformed prompting spec entry '" + text.substr(pos, end - pos) + "'");
    specs.push_back(s);
    pos = end + 1;
  }
  return specs;
}

}  // namespace detail_ckpt

inline Config model_config_to_kv(const ModelConfig& c, Variant v, uint64_t seed) {
  Config kv;
  kv.set_int("image_size", c.image_size);
  kv.set_int("patch_size", c.patch_size);
  kv.set_int("embed_dim", c.embed_dim);
  kv.set_int("depth", c.depth);
  kv.set_int("heads", c.heads);
  kv.set_double("mlp_ratio", c.mlp_ratio);
  kv.set_int("fine_count", c.fine_count);
  kv.set("variant", variant_name(v));
  kv.set_int("seed", static_cast<long>(seed));
  kv.set("specs", detail_ckpt::spec_string(c.prompting_specs));
  return kv;
}

inline void model_config_from_kv(const Config& kv, ModelConfig& c, Variant& v, uint64_t& seed) {
  c.image_size = static_cast<int>(kv.get_int("image_size"));
  c.patch_size = static_cast<int>(kv.get_int("patch_size"));
  c.embed_dim = static_cast<int>(kv.get_int("embed_dim"));
  c.depth = static_cast<int>(kv.get_int("depth"));
  c.heads = static_cast<int>(kv.get_int("heads"));
  c.mlp_ratio = kv.get_double("mlp_ratio");
  c.fine_count = static_cast<int>(kv.get_int("fine_count"));
  c.prompting_specs = detail_ckpt::parse_spec_string(kv.get_or("specs", ""));
  v = variant_from_name(kv.get("variant"));
  seed = static_cast<uint64_t>(kv.get_int("seed"));
}

template <class S>
void save_checkpoint(const TransHPModel<S>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(detail_ckpt::kMagic, 8);
  detail_ckpt::put_u32(out, detail_ckpt::kVersion);
  const std::string cfg = model_config_to_kv(m.config, m.variant, m.seed).serialize();
  detail_ckpt::put_u32(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail_ckpt::put_u32(out, static_cast<uint32_t>(m.param_order.size()));
  for (const auto& name : m.param_order) {
    const auto& t = m.param(name);
    detail_ckpt::put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail_ckpt::put_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail_ckpt::put_u32(out, static_cast<uint32_t>(d));
    std::vector<float> payload(t.data().begin(), t.data().end());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

template <class S>
TransHPModel<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail_ckpt::kMagic, 8) != 0)
    throw ParseError("'" + path + "' is not a checkpoint (bad magic)");
  const uint32_t version = detail_ckpt::take_u32(in, path);
  if (version != detail_ckpt::kVersion)
    throw ParseError("'" + path + "' has checkpoint version " + std::to_string(version) +
                     ", expected " + std::to_string(detail_ckpt::kVersion));
  const uint32_t cfg_len = detail_ckpt::take_u32(in, path);
  std::string cfg_text(cfg_len, '\0');
  if (!in.read(cfg_text.data(), cfg_len)) throw ParseError("'" + path + "': truncated config block");

  TransHPModel<S> m;
  model_config_from_kv(Config::parse_text(cfg_text), m.config, m.variant, m.seed);

  const uint32_t n_params = detail_ckpt::take_u32(in, path);
  for (uint32_t i = 0; i < n_params; ++i) {
    const uint32_t name_len = detail_ckpt::take_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw ParseError("'" + path + "': truncated entry name");
    const uint32_t rank = detail_ckpt::take_u32(in, path);
    std::vector<int> shape(rank);
    long numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<int>(detail_ckpt::take_u32(in, path));
      numel *= shape[r];
    }
    std::vector<float> payload(static_cast<size_t>(numel));
    if (!in.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size() * sizeof(float))))
      throw ParseError("'" + path + "': truncated payload for '" + name + "'");
    std::vector<S> values(payload.begin(), payload.end());
    if (m.params.count(name))
      throw ParseError("'" + path + "': duplicate parameter '" + name + "'");
    m.add_param(name, Tensor<S>::from(std::move(shape), std::move(values)));
  }
  return m;
}

// A checkpoint must structurally match a freshly assembled model of its own
// configuration (the hierarchy supplies the level shapes).
template <class S>
void validate_checkpoint_structure(const TransHPModel<S>& loaded, const LabelHierarchy& hierarchy) {
  auto fresh = assemble<S>(loaded.config, hierarchy, loaded.seed);
  TransHPModel<S> shaped =
      loaded.variant == Variant::baseline
          ? (loaded.config.prompting_specs.empty() ? fresh : make_baseline(fresh))
          : (loaded.variant == Variant::transhp ? fresh : make_variant(fresh, loaded.variant));
  if (shaped.param_order != loaded.param_order)
    throw ConfigError("checkpoint parameters do not match its declared configuration");
  for (const auto& name : shaped.param_order)
    if (shaped.param(name).shape() != loaded.param(name).shape())
      throw ConfigError("checkpoint parameter '" + name + "' has shape " +
                        shape_str(loaded.param(name).shape()) + ", expected " +
                        shape_str(shaped.param(name).shape()));
}

}  // namespace transhp
