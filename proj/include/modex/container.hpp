#pragma once

// EXQ1 tensor container.
//
//   "EXQ1" | u32 version | u32 count
//   count × { u16 name_len | name | u8 dtype | u8 rank | rank × u64 dim | u64 offset }
//   data blocks, each starting on a 64-byte boundary (offsets are absolute)
//
// All integers and floats are little-endian. dtype: 0 f64, 1 f32, 2 u32,
// 3 packed 4-bit (two codes per byte, low nibble first), 4 u8.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "modex/errors.hpp"
#include "modex/model_graph.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"

namespace modex {

enum class DType : std::uint8_t { f64 = 0, f32 = 1, u32 = 2, packed4 = 3, u8 = 4 };

inline constexpr std::array<std::uint8_t, 4> exq_magic = {0x45, 0x58, 0x51, 0x31};
inline constexpr std::uint32_t exq_version = 1;
inline constexpr std::size_t exq_alignment = 64;

struct ContainerEntry {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t pos, int width) {
  if (pos + width > in.size()) throw io_error("container: truncated data");
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= std::uint64_t(in[pos + i]) << (8 * i);
  return v;
}

inline std::size_t expected_bytes(DType t, std::uint64_t n) {
  switch (t) {
    case DType::f64: return 8 * n;
    case DType::f32: return 4 * n;
    case DType::u32: return 4 * n;
    case DType::packed4: return (n + 1) / 2;
    case DType::u8: return n;
  }
  throw io_error("container: unknown dtype");
}

}  // namespace detail

/// Ordered collection of named tensors.
class Container {
 public:
  const std::vector<ContainerEntry>& entries() const { return entries_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ContainerEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw io_error("container: missing tensor '" + name + "'");
    return entries_[it->second];
  }

  void add(ContainerEntry e) {
    if (e.name.empty() || e.name.size() > 0xFFFF) throw invalid_argument("container: bad tensor name");
    if (contains(e.name)) throw invalid_argument("container: duplicate tensor '" + e.name + "'");
    if (e.dims.size() > 0xFF) throw invalid_argument("container: rank too large");
    if (e.bytes.size() != detail::expected_bytes(e.dtype, e.element_count()))
      throw invalid_argument("container: payload size does not match dims for '" + e.name + "'");
    index_.emplace(e.name, entries_.size());
    entries_.push_back(std::move(e));
  }

  void add_f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> v) {
    ContainerEntry e{name, DType::f64, std::move(dims), {}};
    e.bytes.reserve(v.size() * 8);
    for (double x : v) detail::put_le(e.bytes, std::bit_cast<std::uint64_t>(x), 8);
    add(std::move(e));
  }
  void add_tensor(const std::string& name, const Tensor& t) { add_f64(name, {t.rows(), t.cols()}, t.data()); }
  void add_vector(const std::string& name, std::span<const double> v) { add_f64(name, {v.size()}, v); }

  void add_f32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> v) {
    ContainerEntry e{name, DType::f32, std::move(dims), {}};
    for (double x : v) detail::put_le(e.bytes, std::bit_cast<std::uint32_t>(static_cast<float>(x)), 4);
    add(std::move(e));
  }
  void add_u32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const std::uint32_t> v) {
    ContainerEntry e{name, DType::u32, std::move(dims), {}};
    for (auto x : v) detail::put_le(e.bytes, x, 4);
    add(std::move(e));
  }
  void add_u8(const std::string& name, std::vector<std::uint64_t> dims, std::span<const std::uint8_t> v) {
    add({name, DType::u8, std::move(dims), std::vector<std::uint8_t>(v.begin(), v.end())});
  }
  void add_packed4(const std::string& name, std::vector<std::uint64_t> dims, std::span<const std::uint8_t> packed) {
    add({name, DType::packed4, std::move(dims), std::vector<std::uint8_t>(packed.begin(), packed.end())});
  }

  std::vector<double> f64(const std::string& name) const {
    const auto& e = expect(name, DType::f64);
    std::vector<double> out(e.element_count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<double>(detail::get_le(e.bytes, 8 * i, 8));
    return out;
  }
  Tensor tensor(const std::string& name) const {
    const auto& e = at(name);
    if (e.dims.size() != 2) throw io_error("container: '" + name + "' is not rank 2");
    return Tensor(e.dims[0], e.dims[1], f64(name));
  }
  std::vector<double> f32(const std::string& name) const {
    const auto& e = expect(name, DType::f32);
    std::vector<double> out(e.element_count());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(e.bytes, 4 * i, 4)));
    return out;
  }
  std::vector<std::uint32_t> u32(const std::string& name) const {
    const auto& e = expect(name, DType::u32);
    std::vector<std::uint32_t> out(e.element_count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint32_t>(detail::get_le(e.bytes, 4 * i, 4));
    return out;
  }
  std::vector<std::uint8_t> u8(const std::string& name) const { return expect(name, DType::u8).bytes; }
  std::vector<std::uint8_t> packed4(const std::string& name) const { return expect(name, DType::packed4).bytes; }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(exq_magic.begin(), exq_magic.end());
    detail::put_le(out, exq_version, 4);
    detail::put_le(out, entries_.size(), 4);
    std::size_t header = out.size();
    for (const auto& e : entries_) header += 2 + e.name.size() + 2 + 8 * e.dims.size() + 8;
    std::vector<std::uint64_t> offsets;
    std::uint64_t pos = header;
    for (const auto& e : entries_) {
      pos = (pos + exq_alignment - 1) / exq_alignment * exq_alignment;
      offsets.push_back(pos);
      pos += e.bytes.size();
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      detail::put_le(out, e.name.size(), 2);
      out.insert(out.end(), e.name.begin(), e.name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) detail::put_le(out, d, 8);
      detail::put_le(out, offsets[i], 8);
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      out.resize(offsets[i], 0);
      out.insert(out.end(), entries_[i].bytes.begin(), entries_[i].bytes.end());
    }
    return out;
  }

  static Container parse(std::span<const std::uint8_t> in) {
    if (in.size() < 12 || !std::equal(exq_magic.begin(), exq_magic.end(), in.begin()))
      throw io_error("container: bad magic");
    if (detail::get_le(in, 4, 4) != exq_version) throw io_error("container: unsupported version");
    const std::uint64_t count = detail::get_le(in, 8, 4);
    std::size_t pos = 12;
    Container c;
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::size_t len = detail::get_le(in, pos, 2);
      pos += 2;
      if (pos + len + 2 > in.size()) throw io_error("container: truncated header");
      ContainerEntry e;
      e.name.assign(reinterpret_cast<const char*>(in.data() + pos), len);
      pos += len;
      const std::uint8_t dt = in[pos++];
      if (dt > static_cast<std::uint8_t>(DType::u8)) throw io_error("container: unknown dtype " + std::to_string(dt));
      e.dtype = static_cast<DType>(dt);
      const std::size_t rank = in[pos++];
      for (std::size_t r = 0; r < rank; ++r, pos += 8) e.dims.push_back(detail::get_le(in, pos, 8));
      const std::uint64_t offset = detail::get_le(in, pos, 8);
      pos += 8;
      if (offset % exq_alignment != 0) throw io_error("container: misaligned data for '" + e.name + "'");
      const std::size_t n = detail::expected_bytes(e.dtype, e.element_count());
      if (offset + n > in.size()) throw io_error("container: data for '" + e.name + "' out of bounds");
      e.bytes.assign(in.begin() + offset, in.begin() + offset + n);
      c.add(std::move(e));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + path.string());
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(bytes);
  }

 private:
  const ContainerEntry& expect(const std::string& name, DType t) const {
    const auto& e = at(name);
    if (e.dtype != t) throw io_error("container: '" + name + "' has unexpected dtype");
    return e;
  }

  std::vector<ContainerEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Token files: raw u32 little-endian ids
// ---------------------------------------------------------------------------

inline void write_tokens(const std::filesystem::path& path, std::span<const std::uint32_t> tokens) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(tokens.size() * 4);
  for (auto t : tokens) detail::put_le(bytes, t, 4);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint32_t> read_tokens(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open token file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw io_error("token file size is not a multiple of 4: " + path.string());
  std::vector<std::uint32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint32_t>(detail::get_le(bytes, 4 * i, 4));
  return out;
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TinyLlmConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_kv_heads", c.n_kv_heads}, {"head_dim", c.head_dim},     {"d_ffn", c.d_ffn},
          {"vocab_size", c.vocab_size}, {"rope_theta", c.rope_theta}, {"tied_embeddings", c.tied_embeddings}};
}

inline TinyLlmConfig config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"n_layers", "d_model",    "n_heads",   "n_kv_heads",     "head_dim",
                                "d_ffn",    "vocab_size", "rope_theta", "tied_embeddings"};
  for (const auto& [k, _] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known))
      throw invalid_argument("model config: unknown field '" + k + "'");
  TinyLlmConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.tied_embeddings = j.value("tied_embeddings", c.tied_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw invalid_argument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

namespace detail {

inline void put_scheme(Container& c, const std::string& name, const QuantScheme& s) {
  const std::uint32_t v[3] = {static_cast<std::uint32_t>(s.kind), static_cast<std::uint32_t>(s.axis),
                              static_cast<std::uint32_t>(s.group_size)};
  c.add_u32(name, {3}, v);
}

inline QuantScheme get_scheme(const Container& c, const std::string& name) {
  const auto v = c.u32(name);
  if (v.size() != 3 || v[0] > 2 || v[1] > 1) throw io_error("container: bad scheme record '" + name + "'");
  QuantScheme s;
  s.kind = static_cast<QuantKind>(v[0]);
  s.axis = static_cast<GroupAxis>(v[1]);
  s.group_size = v[2];
  return s;
}

inline void put_high_precision(Container& c, const ModelGraph& m, bool with_linears) {
  c.add_tensor("embedding", m.embedding);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& L = m.layers[i];
    c.add_vector(layer_key(i, "attn_norm"), L.attn_norm);
    c.add_vector(layer_key(i, "mlp_norm"), L.mlp_norm);
    if (with_linears)
      for (std::string_view n : linear_names) c.add_tensor(layer_key(i, n), m.linear(i, n));
  }
  c.add_vector("final_norm", m.final_norm);
  if (m.lm_head) c.add_tensor("lm_head", *m.lm_head);
  if (m.plan.r1) c.add_tensor("plan.r1", *m.plan.r1);
  if (m.plan.r2) {
    const std::uint32_t v[2] = {static_cast<std::uint32_t>(m.plan.r2->n()), static_cast<std::uint32_t>(m.plan.r2->m())};
    c.add_u32("plan.r2", {2}, v);
  }
  if (m.plan.r4) {
    const std::uint32_t v[2] = {static_cast<std::uint32_t>(m.plan.r4->n()), static_cast<std::uint32_t>(m.plan.r4->m())};
    c.add_u32("plan.r4", {2}, v);
  }
  if (m.act_quant) put_scheme(c, "plan.act_quant", *m.act_quant);
}

inline ModelGraph get_high_precision(const Container& c, const TinyLlmConfig& cfg) {
  ModelGraph m;
  m.config = cfg;
  m.embedding = c.tensor("embedding");
  m.layers.resize(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    m.layers[i].attn_norm = c.f64(layer_key(i, "attn_norm"));
    m.layers[i].mlp_norm = c.f64(layer_key(i, "mlp_norm"));
  }
  m.final_norm = c.f64("final_norm");
  if (c.contains("lm_head")) m.lm_head = c.tensor("lm_head");
  if (c.contains("plan.r1")) m.plan.r1 = c.tensor("plan.r1");
  auto rot = [&](const char* name) -> std::optional<ExpandedRotation> {
    if (!c.contains(name)) return std::nullopt;
    const auto v = c.u32(name);
    if (v.size() != 2) throw io_error(std::string("container: bad rotation record ") + name);
    return ExpandedRotation(v[0], v[1]);
  };
  m.plan.r2 = rot("plan.r2");
  m.plan.r4 = rot("plan.r4");
  if (c.contains("plan.act_quant")) m.act_quant = get_scheme(c, "plan.act_quant");
  return m;
}

}  // namespace detail

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw invalid_argument(path.string() + ": " + e.what());
  }
}

inline constexpr const char* model_config_file = "config.json";
inline constexpr const char* model_weights_file = "weights.exq";

/// A model directory holds config.json and weights.exq (all tensors f64).
inline void save_model(const std::filesystem::path& dir, const ModelGraph& m) {
  m.check_shapes();
  std::filesystem::create_directories(dir);
  write_json(dir / model_config_file, to_json(m.config));
  Container c;
  detail::put_high_precision(c, m, true);
  c.save(dir / model_weights_file);
}

/// Loads a float model directory or a quantized artifact directory (the
/// latter is dequantized).
inline ModelGraph load_model(const std::filesystem::path& dir) {
  const TinyLlmConfig cfg = config_from_json(read_json(dir / model_config_file));
  const Container c = Container::load(dir / model_weights_file);
  ModelGraph m = detail::get_high_precision(c, cfg);
  for (std::size_t i = 0; i < cfg.n_layers; ++i)
    for (std::string_view n : linear_names) {
      const std::string key = layer_key(i, n);
      if (c.contains(key)) {
        m.linear(i, n) = c.tensor(key);
        continue;
      }
      const QuantScheme s = detail::get_scheme(c, key + ".scheme");
      const auto& codes = c.at(key + ".codes");
      if (codes.dims.size() != 2) throw io_error("container: bad codes for " + key);
      QuantizedTensor q(codes.dims[0], codes.dims[1], s);
      const auto packed = c.packed4(key + ".codes");
      std::copy(packed.begin(), packed.end(), q.packed_codes().begin());
      if (s.kind == QuantKind::mxfp4) {
        const auto e = c.u8(key + ".exponents");
        if (e.size() != q.exponents().size()) throw io_error("container: bad exponents for " + key);
        std::copy(e.begin(), e.end(), q.exponents().begin());
      } else {
        const auto sc = c.f32(key + ".scales");
        if (sc.size() != q.scales().size()) throw io_error("container: bad scales for " + key);
        std::copy(sc.begin(), sc.end(), q.scales().begin());
        if (s.kind == QuantKind::int4_asym_per_token) {
          const auto zp = c.u8(key + ".zero_points");
          std::copy(zp.begin(), zp.end(), q.zero_points().begin());
        }
      }
      m.linear(i, n) = dequantize(q);
    }
  m.check_shapes();
  return m;
}

/// Quantized artifact: linears as packed codes plus scales/exponents, the
/// rest in f64, and the rotation/activation plan.
inline void save_quantized(const std::filesystem::path& dir, const QuantizedModel& qm) {
  std::filesystem::create_directories(dir);
  write_json(dir / model_config_file, to_json(qm.model.config));
  Container c;
  detail::put_high_precision(c, qm.model, false);
  for (const auto& [key, q] : qm.weights) {
    detail::put_scheme(c, key + ".scheme", q.scheme());
    c.add_packed4(key + ".codes", {q.rows(), q.cols()}, q.packed_codes());
    if (q.scheme().kind == QuantKind::mxfp4) {
      c.add_u8(key + ".exponents", {q.exponents().size()}, q.exponents());
    } else {
      c.add_f32(key + ".scales", {q.scales().size()}, q.scales());
      if (q.scheme().kind == QuantKind::int4_asym_per_token) {
        std::vector<std::uint8_t> zp(q.zero_points().begin(), q.zero_points().end());
        c.add_u8(key + ".zero_points", {zp.size()}, zp);
      }
    }
  }
  c.save(dir / model_weights_file);
}

}  // namespace modex
