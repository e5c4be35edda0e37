#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

namespace moelab {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
  buf.push_back(static_cast<char>((v >> 16) & 0xFF));
  buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f32_array(std::string& buf, const std::vector<float>& v) {
  static_assert(sizeof(float) == 4);
  if constexpr (std::endian::native == std::endian::little) {
    size_t off = buf.size();
    buf.resize(off + v.size() * 4);
    std::memcpy(buf.data() + off, v.data(), v.size() * 4);
  } else {
    for (float f : v) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(buf, bits);
    }
  }
}

struct Reader {
  const std::string& data;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > data.size())
      throw CorruptCheckpoint(std::string("checkpoint truncated while reading ") + what);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
    pos += 4;
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string out = data.substr(pos, n);
    pos += n;
    return out;
  }
  void f32_array(std::vector<float>& out, size_t count, const char* what) {
    need(count * 4, what);
    out.resize(count);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data.data() + pos, count * 4);
      pos += count * 4;
    } else {
      for (size_t i = 0; i < count; ++i) {
        uint32_t bits = u32(what);
        std::memcpy(&out[i], &bits, 4);
      }
    }
  }
};

// Expected dims for each canonical tensor name under a config.
std::map<std::string, std::vector<uint32_t>> expected_dims(const ModelConfig& cfg) {
  std::map<std::string, std::vector<uint32_t>> dims;
  auto V = static_cast<uint32_t>(cfg.vocab_size);
  auto d = static_cast<uint32_t>(cfg.width);
  auto N = static_cast<uint32_t>(cfg.experts_per_layer);
  auto H = static_cast<uint32_t>(cfg.expert_hidden);
  auto T = static_cast<uint32_t>(cfg.max_context);
  dims["tok_embed"] = {V, d};
  dims["pos_embed"] = {T, d};
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string pre = "blocks." + std::to_string(b) + ".";
    if (cfg.attention_enabled) {
      dims[pre + "attn_wq"] = {d, d};
      dims[pre + "attn_wk"] = {d, d};
      dims[pre + "attn_wv"] = {d, d};
      dims[pre + "attn_wo"] = {d, d};
      dims[pre + "norm_attn_gain"] = {d};
    }
    dims[pre + "norm_moe_gain"] = {d};
    dims[pre + "router_w"] = {N, d};
    dims[pre + "router_b"] = {N};
    for (int e = 0; e < cfg.experts_per_layer; ++e) {
      std::string ep = pre + "experts." + std::to_string(e) + ".";
      dims[ep + "w1"] = {d, H};
      dims[ep + "w2"] = {H, d};
    }
    for (int e = 0; e < cfg.shared_experts; ++e) {
      std::string ep = pre + "shared." + std::to_string(e) + ".";
      dims[ep + "w1"] = {d, H};
      dims[ep + "w2"] = {H, d};
    }
  }
  dims["unembed"] = {d, V};
  return dims;
}

}  // namespace

void save_checkpoint(const Params& params, const std::string& path) {
  params.cfg.validate();
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put_u32(buf, kVersion);
  const ModelConfig& c = params.cfg;
  for (int v : {c.vocab_size, c.width, c.blocks, c.experts_per_layer, c.active_experts,
                c.shared_experts, c.expert_hidden, c.max_context,
                c.attention_enabled ? 1 : 0})
    put_u32(buf, static_cast<uint32_t>(v));

  auto refs = tensor_refs(const_cast<Params&>(params));
  auto dims = expected_dims(c);
  put_u32(buf, static_cast<uint32_t>(refs.size()));
  for (auto& r : refs) {
    const auto& dm = dims.at(r.name);
    size_t numel = 1;
    for (uint32_t x : dm) numel *= x;
    if (numel != r.data->size())
      throw InternalInvariant("save_checkpoint: tensor size mismatch for " + r.name);
    put_u32(buf, static_cast<uint32_t>(r.name.size()));
    buf.append(r.name);
    put_u32(buf, static_cast<uint32_t>(dm.size()));
    for (uint32_t x : dm) put_u32(buf, x);
    put_f32_array(buf, *r.data);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw InvalidInput("save_checkpoint: write failed for " + path);
}

Params load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptCheckpoint("load_checkpoint: cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{data};

  std::string magic = r.bytes(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
    throw CorruptCheckpoint("load_checkpoint: bad magic");
  uint32_t version = r.u32("version");
  if (version != kVersion)
    throw CorruptCheckpoint("load_checkpoint: unsupported version " + std::to_string(version));

  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(r.u32("config"));
  cfg.width = static_cast<int>(r.u32("config"));
  cfg.blocks = static_cast<int>(r.u32("config"));
  cfg.experts_per_layer = static_cast<int>(r.u32("config"));
  cfg.active_experts = static_cast<int>(r.u32("config"));
  cfg.shared_experts = static_cast<int>(r.u32("config"));
  cfg.expert_hidden = static_cast<int>(r.u32("config"));
  cfg.max_context = static_cast<int>(r.u32("config"));
  cfg.attention_enabled = r.u32("config") != 0;
  try {
    cfg.validate();
  } catch (const InvalidConfig& e) {
    throw CorruptCheckpoint(std::string("load_checkpoint: bad config: ") + e.what());
  }

  Params params = make_params<float>(cfg);
  auto refs = tensor_refs(params);
  std::map<std::string, std::vector<float>*> by_name;
  for (auto& ref : refs) by_name[ref.name] = ref.data;
  auto dims = expected_dims(cfg);

  uint32_t count = r.u32("tensor count");
  if (count != refs.size())
    throw CorruptCheckpoint("load_checkpoint: tensor count mismatch");
  std::map<std::string, bool> seen;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CorruptCheckpoint("load_checkpoint: unknown tensor " + name);
    if (seen[name]) throw CorruptCheckpoint("load_checkpoint: duplicate tensor " + name);
    seen[name] = true;
    uint32_t rank = r.u32("tensor rank");
    const auto& want = dims.at(name);
    if (rank != want.size())
      throw CorruptCheckpoint("load_checkpoint: rank mismatch for " + name);
    size_t numel = 1;
    for (uint32_t j = 0; j < rank; ++j) {
      uint32_t dim = r.u32("tensor dim");
      if (dim != want[j])
        throw CorruptCheckpoint("load_checkpoint: shape mismatch for " + name);
      numel *= dim;
    }
    r.f32_array(*it->second, numel, name.c_str());
  }
  if (r.pos != data.size())
    throw CorruptCheckpoint("load_checkpoint: trailing bytes after last tensor");
  return params;
}

}  // namespace moelab
