#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "elb/binio.hpp"
#include "elb/error.hpp"
#include "elb/netir.hpp"
#include "elb/quant.hpp"

namespace elb {

enum class TensorKind : std::uint8_t {
  Weight = 0,
  Bias = 1,
  BnGamma = 2,
  BnBeta = 3,
  BnMean = 4,
  BnVar = 5,
};

struct FloatTensor {
  std::string name;  // owning layer
  TensorKind kind = TensorKind::Weight;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  bool operator==(const FloatTensor&) const = default;
};

/// Contents of a `.elbw` file: float tensors keyed by (layer name, kind).
struct WeightFile {
  std::vector<FloatTensor> tensors;

  const FloatTensor* find(const std::string& name, TensorKind kind) const {
    for (const auto& t : tensors)
      if (t.name == name && t.kind == kind) return &t;
    return nullptr;
  }
  bool operator==(const WeightFile&) const = default;
};

inline constexpr char kElbwMagic[4] = {'E', 'L', 'B', 'W'};
inline constexpr std::uint32_t kElbwVersion = 1;

inline std::vector<std::uint8_t> encode_elbw(const WeightFile& wf) {
  ByteWriter w;
  w.bytes(std::string_view(kElbwMagic, 4));
  w.u32(kElbwVersion);
  w.u32(static_cast<std::uint32_t>(wf.tensors.size()));
  for (const auto& t : wf.tensors) {
    if (t.name.size() > 0xFFFF) throw IoError("tensor name too long");
    if (t.dims.size() > 0xFF) throw IoError("too many dims");
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    if (n != t.data.size()) throw IoError(t.name + ": dims do not match payload");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.kind));
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.data) w.f32(v);
  }
  return w.data();
}

inline WeightFile decode_elbw(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.str(4) != std::string(kElbwMagic, 4)) throw IoError("not an ELBW file");
  if (const auto v = r.u32(); v != kElbwVersion) throw IoError("unsupported ELBW version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  WeightFile wf;
  for (std::uint32_t i = 0; i < count; ++i) {
    FloatTensor t;
    t.name = r.str(r.u16());
    const auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(TensorKind::BnVar)) throw IoError("unknown tensor kind");
    t.kind = static_cast<TensorKind>(kind);
    const auto nd = r.u8();
    std::size_t n = 1;
    for (int d = 0; d < nd; ++d) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    if (n * 4 > r.remaining()) throw IoError("truncated binary file");
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    wf.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("trailing bytes in ELBW file");
  return wf;
}

inline WeightFile load_elbw(const std::string& path) { return decode_elbw(read_file_bytes(path)); }
inline void save_elbw(const std::string& path, const WeightFile& wf) { write_file_bytes(path, encode_elbw(wf)); }

/// Float parameters of one fused stage, pulled out of a WeightFile.
struct StageParams {
  std::vector<float> weights;  // [out][in/group][kh][kw]
  std::vector<double> bias;    // empty when the core has no bias
  std::optional<BnParams> bn;
};

inline std::vector<int> weight_dims(const FusedStage& s) {
  const auto& c = s.core;
  if (s.is_fc()) return {c.out_channels, c.in_channels};
  return {c.out_channels, c.in_channels / c.group, c.kernel_h, c.kernel_w};
}

inline StageParams stage_params(const FusedStage& s, const WeightFile& wf) {
  StageParams p;
  const auto* w = wf.find(s.core.name, TensorKind::Weight);
  if (!w) throw IoError("missing weights for layer '" + s.core.name + "'");
  if (static_cast<std::int64_t>(w->data.size()) != s.weight_count())
    throw IoError(s.core.name + ": expected " + std::to_string(s.weight_count()) + " weights, got " +
                  std::to_string(w->data.size()));
  p.weights = w->data;
  const auto oc = static_cast<std::size_t>(s.core.out_channels);
  if (s.core.bias) {
    const auto* b = wf.find(s.core.name, TensorKind::Bias);
    if (b) {
      if (b->data.size() != oc) throw IoError(s.core.name + ": bias length mismatch");
      p.bias.assign(b->data.begin(), b->data.end());
    } else {
      p.bias.assign(oc, 0.0);
    }
  }
  if (s.bn) {
    BnParams bn;
    bn.eps = s.bn->eps;
    auto get = [&](TensorKind k, std::vector<double>& dst) {
      const auto* t = wf.find(s.bn->name, k);
      if (!t) throw IoError("missing BN tensor for layer '" + s.bn->name + "'");
      if (t->data.size() != oc) throw IoError(s.bn->name + ": BN length mismatch");
      dst.assign(t->data.begin(), t->data.end());
    };
    get(TensorKind::BnGamma, bn.gamma);
    get(TensorKind::BnBeta, bn.beta);
    get(TensorKind::BnMean, bn.mean);
    get(TensorKind::BnVar, bn.var);
    p.bn = std::move(bn);
  }
  return p;
}

namespace detail {

// Bit-level helpers so synthetic data is identical on every platform
// (std distributions are implementation-defined).
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Sum of four uniforms (the 16-bit fields of one draw) rescaled to unit
// variance. Close enough to a normal for synthetic weights and free of libm
// calls, whose last-ulp results differ between platforms.
inline double std_normal(std::mt19937_64& rng) {
  const std::uint64_t r = rng();
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) sum += (static_cast<double>((r >> (16 * i)) & 0xFFFF) + 0.5) * 0x1.0p-16;
  return (sum - 2.0) * 1.7320508075688772;
}

}  // namespace detail

/// Deterministic He-style random weights plus mildly perturbed BN statistics
/// for every stage of a graph.
inline WeightFile synthesize_weights(const NetworkGraph& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightFile wf;
  for (const auto& s : g.stages) {
    FloatTensor w;
    w.name = s.core.name;
    w.kind = TensorKind::Weight;
    for (int d : weight_dims(s)) w.dims.push_back(static_cast<std::uint32_t>(d));
    const double sd = std::sqrt(2.0 / static_cast<double>(s.kernel_elems()));
    w.data.resize(static_cast<std::size_t>(s.weight_count()));
    for (auto& v : w.data) v = static_cast<float>(sd * detail::std_normal(rng));
    wf.tensors.push_back(std::move(w));
    const auto oc = static_cast<std::uint32_t>(s.core.out_channels);
    if (s.core.bias) {
      FloatTensor b{s.core.name, TensorKind::Bias, {oc}, std::vector<float>(oc)};
      for (auto& v : b.data) v = static_cast<float>(0.1 * detail::std_normal(rng));
      wf.tensors.push_back(std::move(b));
    }
    if (s.bn) {
      auto add = [&](TensorKind k, auto gen) {
        FloatTensor t{s.bn->name, k, {oc}, std::vector<float>(oc)};
        for (auto& v : t.data) v = static_cast<float>(gen());
        wf.tensors.push_back(std::move(t));
      };
      add(TensorKind::BnGamma, [&] { return 0.8 + 0.4 * detail::unit_uniform(rng); });
      add(TensorKind::BnBeta, [&] { return 0.1 * detail::std_normal(rng); });
      add(TensorKind::BnMean, [&] { return 0.05 * detail::std_normal(rng); });
      add(TensorKind::BnVar, [&] { return 0.8 + 0.4 * detail::unit_uniform(rng); });
    }
  }
  return wf;
}

}  // namespace elb
