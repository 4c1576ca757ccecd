#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elb/binio.hpp"
#include "elb/emu.hpp"
#include "elb/error.hpp"
#include "elb/quant.hpp"

namespace elb {

// Tensor kinds in a .elbq file; disjoint from the float kinds of .elbw.
enum class CodeKind : std::uint8_t { Binary = 16, Ternary = 17, Fixed = 18 };

/// LSB-first bit stream of fixed-width two's-complement fields.
inline std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits) {
  std::vector<std::uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  std::size_t bit = 0;
  for (auto c : codes) {
    const std::uint64_t v = static_cast<std::uint64_t>(static_cast<std::int64_t>(c)) & mask;
    for (int i = 0; i < bits; ++i, ++bit)
      if ((v >> i) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return out;
}

inline std::vector<std::int32_t> unpack_codes(const std::vector<std::uint8_t>& bytes, std::size_t n, int bits) {
  if (bytes.size() * 8 < n * static_cast<std::size_t>(bits)) throw IoError("packed code stream too short");
  std::vector<std::int32_t> out(n);
  std::size_t bit = 0;
  for (auto& c : out) {
    std::uint64_t v = 0;
    for (int i = 0; i < bits; ++i, ++bit) v |= static_cast<std::uint64_t>((bytes[bit / 8] >> (bit % 8)) & 1u) << i;
    if (bits < 64 && ((v >> (bits - 1)) & 1u)) v |= ~std::uint64_t{0} << bits;  // sign extend
    c = static_cast<std::int32_t>(static_cast<std::int64_t>(v));
  }
  return out;
}

/// Binary codes store the sign bit only: 0 = +1, 1 = -1.
inline std::vector<std::uint8_t> pack_weight_codes(const QuantizedTensor& q) {
  if (std::holds_alternative<BinaryCodec>(q.codec)) {
    std::vector<std::int32_t> bits(q.codes.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = q.codes[i] < 0 ? 1 : 0;
    std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    return out;
  }
  return pack_codes(q.codes, codec_bits(q.codec));
}

inline std::vector<std::int32_t> unpack_weight_codes(const std::vector<std::uint8_t>& bytes, std::size_t n,
                                                     const WeightCodec& codec) {
  if (std::holds_alternative<BinaryCodec>(codec)) {
    if (bytes.size() * 8 < n) throw IoError("packed code stream too short");
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = ((bytes[i / 8] >> (i % 8)) & 1u) ? -1 : 1;
    return out;
  }
  auto out = unpack_codes(bytes, n, codec_bits(codec));
  if (std::holds_alternative<TernaryCodec>(codec))
    for (auto v : out)
      if (v == -2) throw IoError("invalid ternary code 10");
  return out;
}

inline constexpr char kElbqMagic[4] = {'E', 'L', 'B', 'Q'};
inline constexpr std::uint32_t kElbqVersion = 1;

namespace detail {

inline void put_format(ByteWriter& w, const FixedPointFormat& f) {
  w.u8(static_cast<std::uint8_t>(f.total_bits));
  w.i8(static_cast<std::int8_t>(f.frac_bits));
  w.u8(f.is_signed ? 1 : 0);
}
inline FixedPointFormat get_format(ByteReader& r, bool check = true) {
  FixedPointFormat f;
  f.total_bits = r.u8();
  f.frac_bits = r.i8();
  f.is_signed = r.u8() != 0;
  if (check) f.validate();
  return f;
}

}  // namespace detail

/// Layout: magic, version, scheme block, then one record per stage holding
/// the packed weight codes, codec metadata, folded affine (float and
/// realized) and the stage's activation formats. Names must match the graph.
inline std::vector<std::uint8_t> encode_elbq(const QuantizedModel& m, const NetworkGraph& g) {
  if (m.stages.size() != g.stages.size()) throw QuantError("model/graph stage count mismatch");
  ByteWriter w;
  w.bytes(std::string_view(kElbqMagic, 4));
  w.u32(kElbqVersion);
  const auto& sc = m.scheme;
  w.u16(static_cast<std::uint16_t>(sc.name.size()));
  w.bytes(sc.name);
  for (int v : {sc.act_bits, sc.w_first, sc.w_midconv, sc.w_midfc, sc.w_last, sc.input_bits, sc.output_bits})
    w.u8(static_cast<std::uint8_t>(v));
  w.u16(static_cast<std::uint16_t>(sc.overrides.size()));
  for (const auto& [name, bits] : sc.overrides) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(bits));
  }
  w.u8(m.rounding == RoundingMode::HalfAway ? 0 : 1);
  detail::put_format(w, m.input_format);
  w.u32(static_cast<std::uint32_t>(m.stages.size()));
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    const auto& q = m.stages[i];
    const auto& name = g.stages[i].core.name;
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    double e = 0.0, thr = 0.0;
    FixedPointFormat ff{0, 0, true};
    CodeKind kind = CodeKind::Fixed;
    if (auto* b = std::get_if<BinaryCodec>(&q.weights.codec)) {
      kind = CodeKind::Binary;
      e = b->scale;
      ff = {1, 0, true};
    } else if (auto* t = std::get_if<TernaryCodec>(&q.weights.codec)) {
      kind = CodeKind::Ternary;
      e = t->scale;
      thr = t->threshold;
      ff = {2, 0, true};
    } else {
      ff = std::get<FixedCodec>(q.weights.codec).format;
      e = ff.step();
    }
    w.u8(static_cast<std::uint8_t>(kind));
    w.u8(static_cast<std::uint8_t>(q.weights.dims.size()));
    for (int d : q.weights.dims) w.u32(static_cast<std::uint32_t>(d));
    w.f64(e);
    w.f64(thr);
    detail::put_format(w, ff);
    const auto packed = pack_weight_codes(q.weights);
    w.u32(static_cast<std::uint32_t>(packed.size()));
    w.bytes(packed);

    const auto c = q.affine.scale.size();
    w.u32(static_cast<std::uint32_t>(c));
    for (double v : q.affine.scale) w.f64(v);
    for (double v : q.affine.bias) w.f64(v);
    w.i8(static_cast<std::int8_t>(q.realized.frac_bits));
    for (auto v : q.realized.scale_codes) w.i64(v);
    for (auto v : q.realized.bias_codes) w.i64(v);
    detail::put_format(w, q.in_format);
    detail::put_format(w, q.out_format);
    w.u8(static_cast<std::uint8_t>(q.acc_bits));
  }
  return w.data();
}

inline QuantizedModel decode_elbq(const std::vector<std::uint8_t>& bytes, const NetworkGraph& g) {
  ByteReader r(bytes);
  if (r.str(4) != std::string(kElbqMagic, 4)) throw IoError("not an ELBQ file");
  if (const auto v = r.u32(); v != kElbqVersion) throw IoError("unsupported ELBQ version " + std::to_string(v));
  QuantizedModel m;
  auto& sc = m.scheme;
  sc.name = r.str(r.u16());
  for (int* v : {&sc.act_bits, &sc.w_first, &sc.w_midconv, &sc.w_midfc, &sc.w_last, &sc.input_bits, &sc.output_bits})
    *v = r.u8();
  const auto n_over = r.u16();
  for (int i = 0; i < n_over; ++i) {
    std::string name = r.str(r.u16());
    sc.overrides[name] = r.u8();
  }
  sc.validate();
  m.rounding = r.u8() == 0 ? RoundingMode::HalfAway : RoundingMode::Truncate;
  m.input_format = detail::get_format(r);
  const auto n = r.u32();
  if (n != g.stages.size()) throw IoError("ELBQ stage count does not match the model");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& s = g.stages[i];
    QuantizedStage q;
    const std::string name = r.str(r.u16());
    if (name != s.core.name) throw IoError("ELBQ stage '" + name + "' does not match layer '" + s.core.name + "'");
    const auto kind = r.u8();
    const auto nd = r.u8();
    std::size_t count = 1;
    for (int d = 0; d < nd; ++d) {
      q.weights.dims.push_back(static_cast<int>(r.u32()));
      count *= static_cast<std::size_t>(q.weights.dims.back());
    }
    if (static_cast<std::int64_t>(count) != s.weight_count()) throw IoError(name + ": weight count mismatch");
    const double e = r.f64();
    const double thr = r.f64();
    const FixedPointFormat ff = detail::get_format(r, static_cast<CodeKind>(kind) == CodeKind::Fixed);
    switch (static_cast<CodeKind>(kind)) {
      case CodeKind::Binary: q.weights.codec = BinaryCodec{e}; break;
      case CodeKind::Ternary: q.weights.codec = TernaryCodec{e, thr}; break;
      case CodeKind::Fixed: q.weights.codec = FixedCodec{ff}; break;
      default: throw IoError(name + ": unknown code kind " + std::to_string(kind));
    }
    q.weights.codes = unpack_weight_codes(r.raw(r.u32()), count, q.weights.codec);
    const auto c = r.u32();
    if (c != static_cast<std::uint32_t>(s.core.out_channels)) throw IoError(name + ": affine channel mismatch");
    q.affine.scale.resize(c);
    q.affine.bias.resize(c);
    for (auto& v : q.affine.scale) v = r.f64();
    for (auto& v : q.affine.bias) v = r.f64();
    q.realized.frac_bits = r.i8();
    q.realized.scale_codes.resize(c);
    q.realized.bias_codes.resize(c);
    for (auto& v : q.realized.scale_codes) v = r.i64();
    for (auto& v : q.realized.bias_codes) v = r.i64();
    q.in_format = detail::get_format(r);
    q.out_format = detail::get_format(r);
    q.acc_bits = r.u8();
    m.stages.push_back(std::move(q));
  }
  if (!r.done()) throw IoError("trailing bytes in ELBQ file");
  return m;
}

/// Raw image: u32 c, h, w then c*h*w bytes in CHW order.
inline std::vector<std::uint8_t> encode_image(const ActivationTensor& img) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(img.dims.c));
  w.u32(static_cast<std::uint32_t>(img.dims.h));
  w.u32(static_cast<std::uint32_t>(img.dims.w));
  for (auto v : img.codes) {
    if (v < 0 || v > 255) throw IoError("image code out of byte range");
    w.u8(static_cast<std::uint8_t>(v));
  }
  return w.data();
}

inline ActivationTensor decode_image(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  ActivationTensor img;
  img.dims.c = static_cast<int>(r.u32());
  img.dims.h = static_cast<int>(r.u32());
  img.dims.w = static_cast<int>(r.u32());
  if (img.dims.c < 1 || img.dims.h < 1 || img.dims.w < 1) throw IoError("image has an empty dimension");
  if (r.remaining() != static_cast<std::size_t>(img.dims.size())) throw IoError("image payload size does not match its header");
  img.format = FixedPointFormat{8, 8, false};
  img.codes.resize(img.dims.size());
  for (auto& v : img.codes) v = r.u8();
  return img;
}

/// Output codes as int16 little-endian.
inline std::vector<std::uint8_t> encode_logits(const ActivationTensor& out) {
  ByteWriter w;
  for (auto v : out.codes) {
    if (v < -32768 || v > 32767) throw IoError("output code does not fit 16 bits");
    w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
  }
  return w.data();
}

}  // namespace elb
