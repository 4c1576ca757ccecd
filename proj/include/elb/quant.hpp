#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "elb/error.hpp"

namespace elb {

/// Round half away from zero; the only rounding mode used in the datapath.
inline std::int64_t round_half_away(double x) { return std::llround(x); }

/// Integer division by 2^shift, rounded half away from zero.
inline std::int64_t rshift_round(std::int64_t v, int shift) {
  if (shift <= 0) return v << -shift;
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
}

struct FixedPointFormat {
  int total_bits = 8;
  int frac_bits = 0;
  bool is_signed = true;

  std::int64_t min_code() const { return is_signed ? -(std::int64_t{1} << (total_bits - 1)) : 0; }
  std::int64_t max_code() const {
    return is_signed ? (std::int64_t{1} << (total_bits - 1)) - 1 : (std::int64_t{1} << total_bits) - 1;
  }
  double step() const { return std::ldexp(1.0, -frac_bits); }
  double min_value() const { return static_cast<double>(min_code()) * step(); }
  double max_value() const { return static_cast<double>(max_code()) * step(); }

  void validate() const {
    if (total_bits < 1 || total_bits > 32) throw QuantError("fixed-point width must be in [1, 32]");
    if (is_signed && total_bits < 2) throw QuantError("signed fixed point needs at least 2 bits");
  }
  bool operator==(const FixedPointFormat&) const = default;
};

/// code = clamp(round(x * 2^frac)); saturates at the format bounds.
inline std::int64_t quantize_value(double x, const FixedPointFormat& fmt) {
  if (std::isnan(x)) throw QuantError("cannot quantize NaN");
  const double scaled = std::ldexp(x, fmt.frac_bits);
  const double lo = static_cast<double>(fmt.min_code());
  const double hi = static_cast<double>(fmt.max_code());
  if (scaled <= lo) return fmt.min_code();
  if (scaled >= hi) return fmt.max_code();
  return std::clamp(round_half_away(scaled), fmt.min_code(), fmt.max_code());
}

/// Largest fraction position whose range still covers max_abs.
inline int frac_bits_for_range(double max_abs, int total_bits, bool is_signed) {
  const double top = is_signed ? std::ldexp(1.0, total_bits - 1) - 1.0 : std::ldexp(1.0, total_bits) - 1.0;
  if (!(max_abs > 0.0) || !std::isfinite(max_abs)) return is_signed ? total_bits - 1 : total_bits;
  int frac = static_cast<int>(std::floor(std::log2(top / max_abs)));
  // log2 can land one off at exact powers of two.
  while (max_abs * std::ldexp(1.0, frac) > top) --frac;
  while (max_abs * std::ldexp(1.0, frac + 1) <= top) ++frac;
  return std::clamp(frac, -32, 48);
}

struct BinaryCodec {
  double scale = 1.0;  // E = mean |w|
  bool operator==(const BinaryCodec&) const = default;
};
struct TernaryCodec {
  double scale = 1.0;      // mean |w| over the surviving entries
  double threshold = 0.0;  // 0.7 * mean |w|
  bool operator==(const TernaryCodec&) const = default;
};
struct FixedCodec {
  FixedPointFormat format;
  bool operator==(const FixedCodec&) const = default;
};
using WeightCodec = std::variant<BinaryCodec, TernaryCodec, FixedCodec>;

inline bool is_multiplier_free(const WeightCodec& c) { return !std::holds_alternative<FixedCodec>(c); }

/// Real value of one code step.
inline double codec_unit(const WeightCodec& c) {
  if (auto* b = std::get_if<BinaryCodec>(&c)) return b->scale;
  if (auto* t = std::get_if<TernaryCodec>(&c)) return t->scale;
  return std::get<FixedCodec>(c).format.step();
}

/// Largest code magnitude a weight may carry (weights are symmetric).
inline std::int64_t codec_max_abs_code(const WeightCodec& c) {
  if (auto* f = std::get_if<FixedCodec>(&c)) return f->format.max_code();
  return 1;
}

/// Storage width of one code in bits (1 binary, 2 ternary, w fixed).
inline int codec_bits(const WeightCodec& c) {
  if (std::holds_alternative<BinaryCodec>(c)) return 1;
  if (std::holds_alternative<TernaryCodec>(c)) return 2;
  return std::get<FixedCodec>(c).format.total_bits;
}

inline std::string codec_name(const WeightCodec& c) {
  if (std::holds_alternative<BinaryCodec>(c)) return "binary";
  if (std::holds_alternative<TernaryCodec>(c)) return "ternary";
  return "fixed";
}

struct QuantizedTensor {
  std::vector<int> dims;
  std::vector<std::int32_t> codes;
  WeightCodec codec;

  std::vector<double> dequantize() const {
    const double u = codec_unit(codec);
    std::vector<double> out(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) out[i] = codes[i] * u;
    return out;
  }
  bool operator==(const QuantizedTensor&) const = default;
};

namespace detail {

inline double mean_abs(std::span<const float> w) {
  double sum = 0.0;
  for (float v : w) {
    if (!std::isfinite(v)) throw QuantError("non-finite weight");
    sum += std::fabs(static_cast<double>(v));
  }
  return sum / static_cast<double>(w.size());
}

}  // namespace detail

/// code = sign(w) with sign(0) = +1, E = mean |w| over the tensor.
inline QuantizedTensor binarize(std::span<const float> w, std::vector<int> dims = {}) {
  if (w.empty()) throw QuantError("binarize: empty tensor");
  const double e = detail::mean_abs(w);
  if (!(e > 0.0)) throw QuantError("binarize: all-zero tensor has no scale");
  QuantizedTensor q;
  q.dims = dims.empty() ? std::vector<int>{static_cast<int>(w.size())} : std::move(dims);
  q.codes.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) q.codes[i] = w[i] < 0.0f ? -1 : 1;
  q.codec = BinaryCodec{e};
  return q;
}

/// Threshold 0.7 * mean |w|; entries strictly above keep their sign, the rest
/// become 0. E is the mean magnitude of the surviving entries.
inline QuantizedTensor ternarize(std::span<const float> w, std::vector<int> dims = {}) {
  if (w.empty()) throw QuantError("ternarize: empty tensor");
  const double threshold = 0.7 * detail::mean_abs(w);
  QuantizedTensor q;
  q.dims = dims.empty() ? std::vector<int>{static_cast<int>(w.size())} : std::move(dims);
  q.codes.resize(w.size());
  double kept = 0.0;
  std::size_t n_kept = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double a = std::fabs(static_cast<double>(w[i]));
    if (a > threshold) {
      q.codes[i] = w[i] < 0.0f ? -1 : 1;
      kept += a;
      ++n_kept;
    } else {
      q.codes[i] = 0;
    }
  }
  if (n_kept == 0) throw QuantError("ternarize: no entry above threshold");
  q.codec = TernaryCodec{kept / static_cast<double>(n_kept), threshold};
  return q;
}

inline QuantizedTensor quantize_fixed(std::span<const float> x, const FixedPointFormat& fmt,
                                      std::vector<int> dims = {}) {
  fmt.validate();
  QuantizedTensor q;
  q.dims = dims.empty() ? std::vector<int>{static_cast<int>(x.size())} : std::move(dims);
  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    q.codes[i] = static_cast<std::int32_t>(quantize_value(x[i], fmt));
  q.codec = FixedCodec{fmt};
  return q;
}

/// Dispatch on weight width: 1 binary, 2 ternary, wider signed fixed point
/// with the fraction position chosen to cover the largest magnitude.
inline QuantizedTensor quantize_weights(std::span<const float> w, int bits, std::vector<int> dims = {}) {
  if (bits == 1) return binarize(w, std::move(dims));
  if (bits == 2) return ternarize(w, std::move(dims));
  if (w.empty()) throw QuantError("quantize: empty tensor");
  double max_abs = 0.0;
  for (float v : w) max_abs = std::max(max_abs, std::fabs(static_cast<double>(v)));
  const FixedPointFormat fmt{bits, frac_bits_for_range(max_abs, bits, true), true};
  QuantizedTensor q = quantize_fixed(w, fmt, std::move(dims));
  // Weight codes use the symmetric range [-(2^(w-1)-1), 2^(w-1)-1].
  const auto lo = static_cast<std::int32_t>(fmt.min_code() + 1);
  for (auto& c : q.codes) c = std::max(c, lo);
  return q;
}

struct BnParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mean;
  std::vector<double> var;
  double eps = 1e-5;

  std::size_t channels() const { return gamma.size(); }
  static BnParams identity(std::size_t c, double eps = 0.0) {
    return {std::vector<double>(c, 1.0), std::vector<double>(c, 0.0), std::vector<double>(c, 0.0),
            std::vector<double>(c, 1.0), eps};
  }
};

/// Float form of the folded post-accumulation affine: y = scale * acc + bias,
/// with acc the integer dot product of weight codes and input values.
struct AffineStage {
  std::vector<double> scale;
  std::vector<double> bias;
};

/// alpha = gamma / sqrt(var + eps), beta' = beta - alpha * (mean - conv_bias);
/// the codec scale E is folded into alpha.
inline AffineStage fold_bn(const BnParams& bn, double codec_scale, std::span<const double> conv_bias = {}) {
  const std::size_t c = bn.channels();
  if (bn.beta.size() != c || bn.mean.size() != c || bn.var.size() != c)
    throw QuantError("fold_bn: inconsistent BN parameter lengths");
  if (!conv_bias.empty() && conv_bias.size() != c) throw QuantError("fold_bn: bias length mismatch");
  AffineStage a;
  a.scale.resize(c);
  a.bias.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double denom = bn.var[i] + bn.eps;
    if (!(denom > 0.0)) throw QuantError("fold_bn: non-positive variance + eps");
    const double alpha = bn.gamma[i] / std::sqrt(denom);
    const double b = conv_bias.empty() ? 0.0 : conv_bias[i];
    a.scale[i] = alpha * codec_scale;
    a.bias[i] = bn.beta[i] + alpha * (b - bn.mean[i]);
  }
  return a;
}

/// Integer realization of an AffineStage between an input activation step
/// and an output code step. Scales are 24-bit signed, biases 48-bit signed,
/// both at a per-stage fraction position.
struct RealizedAffine {
  static constexpr int kScaleBits = 24;
  static constexpr int kBiasBits = 48;

  int frac_bits = 0;
  std::vector<std::int64_t> scale_codes;
  std::vector<std::int64_t> bias_codes;

  bool operator==(const RealizedAffine&) const = default;
};

/// Output code (before clamping) = rshift_round(acc * scale + bias, frac),
/// where in_frac/out_frac are the binary points of the input activations and
/// of the output codes.
inline RealizedAffine realize_affine(const AffineStage& a, int in_frac, int out_frac) {
  const std::size_t c = a.scale.size();
  std::vector<double> s(c), b(c);
  double max_s = 0.0, max_b = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    s[i] = std::ldexp(a.scale[i], out_frac - in_frac);
    b[i] = std::ldexp(a.bias[i], out_frac);
    if (!std::isfinite(s[i]) || !std::isfinite(b[i])) throw QuantError("affine stage is not finite");
    max_s = std::max(max_s, std::fabs(s[i]));
    max_b = std::max(max_b, std::fabs(b[i]));
  }
  const double s_top = std::ldexp(1.0, RealizedAffine::kScaleBits - 1) - 1.0;
  const double b_top = std::ldexp(1.0, RealizedAffine::kBiasBits - 1) - 1.0;
  int frac = 48;
  while (frac > 0 && (std::ldexp(max_s, frac) > s_top || std::ldexp(max_b, frac) > b_top)) --frac;
  if (std::ldexp(max_s, frac) > s_top || std::ldexp(max_b, frac) > b_top)
    throw QuantError("affine scale/bias exceed the intermediate format");
  RealizedAffine r;
  r.frac_bits = frac;
  r.scale_codes.resize(c);
  r.bias_codes.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    r.scale_codes[i] = round_half_away(std::ldexp(s[i], frac));
    r.bias_codes[i] = round_half_away(std::ldexp(b[i], frac));
  }
  return r;
}

}  // namespace elb
