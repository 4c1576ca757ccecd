#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "elb/error.hpp"
#include "elb/netir.hpp"
#include "elb/precision.hpp"
#include "elb/quant.hpp"
#include "elb/weights.hpp"

namespace elb {

__extension__ using int128 = __int128;

enum class RoundingMode { HalfAway, Truncate };

inline std::string_view to_string(RoundingMode m) { return m == RoundingMode::HalfAway ? "half_away" : "truncate"; }

inline RoundingMode rounding_mode_from_string(std::string_view s) {
  if (s == "half_away") return RoundingMode::HalfAway;
  if (s == "truncate") return RoundingMode::Truncate;
  throw ParseError("unknown rounding mode '" + std::string(s) + "'");
}

/// CHW integer codes in a single fixed-point format.
struct ActivationTensor {
  Shape3 dims;
  std::vector<std::int32_t> codes;
  FixedPointFormat format{8, 0, false};

  std::int32_t at(int c, int y, int x) const {
    return codes[(static_cast<std::size_t>(c) * dims.h + y) * dims.w + x];
  }
  bool operator==(const ActivationTensor&) const = default;
};

struct FloatTensor3 {
  Shape3 dims;
  std::vector<double> data;
};

struct QuantizedStage {
  QuantizedTensor weights;
  AffineStage affine;
  RealizedAffine realized;
  FixedPointFormat in_format;
  FixedPointFormat out_format;
  int acc_bits = 0;
};

struct QuantizedModel {
  PrecisionScheme scheme;
  FixedPointFormat input_format{8, 8, false};
  RoundingMode rounding = RoundingMode::HalfAway;
  std::vector<QuantizedStage> stages;
};

/// Mux-based dot product of one CE: each code selects x, -x or 0 (binary and
/// ternary) or scales x (fixed point). Partial sums are reduced through a
/// balanced adder tree of the given fan-in before entering the accumulator.
inline std::int64_t ce_dot(std::span<const std::int32_t> acts, std::span<const std::int32_t> codes,
                           const WeightCodec& codec, int tree_width = 16) {
  if (acts.size() != codes.size()) throw ShapeError("ce_dot: window and code lengths differ");
  if (tree_width < 1) tree_width = 1;
  const bool mux = is_multiplier_free(codec);
  auto term = [&](std::size_t i) -> std::int64_t {
    const std::int64_t x = acts[i];
    if (!mux) return x * codes[i];
    switch (codes[i]) {
      case 1: return x;
      case -1: return -x;
      case 0: return 0;
      default: throw QuantError("ce_dot: code outside {-1, 0, +1} for a multiplier-free codec");
    }
  };
  std::int64_t acc = 0;
  std::vector<std::int64_t> level;
  for (std::size_t base = 0; base < acts.size(); base += static_cast<std::size_t>(tree_width)) {
    const std::size_t end = std::min(acts.size(), base + static_cast<std::size_t>(tree_width));
    level.clear();
    for (std::size_t i = base; i < end; ++i) level.push_back(term(i));
    while (level.size() > 1) {
      std::size_t half = 0;
      for (std::size_t i = 0; i + 1 < level.size(); i += 2) level[half++] = level[i] + level[i + 1];
      if (level.size() % 2) level[half++] = level.back();
      level.resize(half);
    }
    if (!level.empty()) acc += level.front();
  }
  return acc;
}

inline int ceil_log2(std::uint64_t v) {
  int b = 0;
  while (b < 64 && (std::uint64_t{1} << b) < v) ++b;
  return b;
}

/// Accumulator width that holds any dot product of the stage: one sign bit
/// plus enough magnitude bits for K * (2^a - 1) * maxcode.
inline int required_acc_bits(std::int64_t taps, int in_act_bits, std::int64_t max_code) {
  const std::uint64_t max_act = (std::uint64_t{1} << in_act_bits) - 1;
  const std::uint64_t bound = static_cast<std::uint64_t>(taps) * max_act * static_cast<std::uint64_t>(max_code);
  return 1 + ceil_log2(bound + 1);
}

inline std::int64_t max_weight_code(int weight_bits) {
  return weight_bits <= 2 ? 1 : (std::int64_t{1} << (weight_bits - 1)) - 1;
}

inline int required_acc_bits(const FusedStage& s, const PrecisionScheme& scheme) {
  return required_acc_bits(s.kernel_elems(), scheme.input_act_bits(s), max_weight_code(scheme.weight_bits_for(s)));
}

/// Folded affine on one accumulator value followed by saturated truncation
/// to the output format. For unsigned outputs the clamp at zero is the ReLU.
inline std::int32_t apply_affine_and_truncate(std::int64_t acc, const RealizedAffine& r, std::size_t channel,
                                              const FixedPointFormat& out, RoundingMode mode = RoundingMode::HalfAway) {
  const int128 v = static_cast<int128>(acc) * r.scale_codes[channel] + r.bias_codes[channel];
  int128 y;
  const int sh = r.frac_bits;
  if (sh == 0) {
    y = v;
  } else if (mode == RoundingMode::Truncate) {
    y = v >> sh;  // floor, as dropping low bits in hardware
  } else {
    const int128 half = static_cast<int128>(1) << (sh - 1);
    y = v >= 0 ? (v + half) >> sh : -((-v + half) >> sh);
  }
  const int128 lo = out.min_code(), hi = out.max_code();
  return static_cast<std::int32_t>(y < lo ? lo : (y > hi ? hi : y));
}

/// Max pooling on codes; padded taps are ignored.
template <class T>
std::vector<T> max_pool(const std::vector<T>& in, const Shape3& ind, const LayerSpec& p, const Shape3& outd) {
  std::vector<T> out(outd.size());
  for (int c = 0; c < outd.c; ++c)
    for (int oy = 0; oy < outd.h; ++oy)
      for (int ox = 0; ox < outd.w; ++ox) {
        T best = std::numeric_limits<T>::lowest();
        for (int ky = 0; ky < p.kernel_h; ++ky) {
          const int y = oy * p.stride - p.pad + ky;
          if (y < 0 || y >= ind.h) continue;
          for (int kx = 0; kx < p.kernel_w; ++kx) {
            const int x = ox * p.stride - p.pad + kx;
            if (x < 0 || x >= ind.w) continue;
            best = std::max(best, in[(static_cast<std::size_t>(c) * ind.h + y) * ind.w + x]);
          }
        }
        out[(static_cast<std::size_t>(c) * outd.h + oy) * outd.w + ox] = best;
      }
  return out;
}

namespace detail {

/// Shared conv/FC loop nest: gathers each group's receptive field once per
/// output pixel and hands it to `emit(oc, pixel, window, weight_row)`.
template <class T, class Emit>
void conv_loop(const FusedStage& s, const std::vector<T>& in, Emit&& emit) {
  const auto& c = s.core;
  const Shape3 ind = s.in_shape();
  const Shape3 od = s.core_shape();
  const std::size_t taps = static_cast<std::size_t>(s.kernel_elems());
  if (s.is_fc()) {
    for (int oc = 0; oc < c.out_channels; ++oc) emit(oc, 0, std::span<const T>(in), static_cast<std::size_t>(oc) * taps);
    return;
  }
  const int cin_g = c.in_channels / c.group;
  const int cout_g = c.out_channels / c.group;
  std::vector<T> window(taps);
  for (int g = 0; g < c.group; ++g) {
    for (int oy = 0; oy < od.h; ++oy)
      for (int ox = 0; ox < od.w; ++ox) {
        std::size_t k = 0;
        for (int ic = 0; ic < cin_g; ++ic) {
          const std::size_t plane = static_cast<std::size_t>(g * cin_g + ic) * ind.h;
          for (int ky = 0; ky < c.kernel_h; ++ky) {
            const int y = oy * c.stride - c.pad + ky;
            for (int kx = 0; kx < c.kernel_w; ++kx, ++k) {
              const int x = ox * c.stride - c.pad + kx;
              window[k] = (y < 0 || y >= ind.h || x < 0 || x >= ind.w) ? T{0} : in[(plane + y) * ind.w + x];
            }
          }
        }
        const std::size_t pixel = static_cast<std::size_t>(oy) * od.w + ox;
        for (int j = 0; j < cout_g; ++j) {
          const int oc = g * cout_g + j;
          emit(oc, pixel, std::span<const T>(window), static_cast<std::size_t>(oc) * taps);
        }
      }
  }
}

}  // namespace detail

struct StageStats {
  std::string name;
  std::int32_t min_code = 0;
  std::int32_t max_code = 0;
  double mean_code = 0.0;
  std::int64_t saturated = 0;  // outputs clamped at the top of the range
  std::int64_t max_abs_acc = 0;
};

/// Executes one fused stage on integer codes.
inline ActivationTensor run_stage(const FusedStage& s, const QuantizedStage& q, const ActivationTensor& input,
                                  RoundingMode mode = RoundingMode::HalfAway, StageStats* stats = nullptr) {
  if (input.dims != s.in_shape())
    throw ShapeError(s.core.name + ": input " + to_string(input.dims) + " does not match " + to_string(s.in_shape()));
  if (input.format != q.in_format) throw QuantError(s.core.name + ": input format mismatch");
  if (static_cast<std::int64_t>(q.weights.codes.size()) != s.weight_count())
    throw QuantError(s.core.name + ": weight count mismatch");
  if (q.realized.scale_codes.size() != static_cast<std::size_t>(s.core.out_channels))
    throw QuantError(s.core.name + ": affine channel count mismatch");
  if (is_multiplier_free(q.weights.codec)) {
    for (auto v : q.weights.codes)
      if (v < -1 || v > 1) throw QuantError(s.core.name + ": code outside {-1, 0, +1}");
  }

  const Shape3 od = s.core_shape();
  const std::size_t npix = static_cast<std::size_t>(od.h) * od.w;
  std::vector<std::int32_t> core(od.size());
  const std::int64_t acc_lim = q.acc_bits >= 63 ? std::numeric_limits<std::int64_t>::max()
                                                 : (std::int64_t{1} << (q.acc_bits - 1)) - 1;
  std::int64_t max_abs_acc = 0;
  const auto* w = q.weights.codes.data();
  detail::conv_loop<std::int32_t>(s, input.codes,
                                  [&](int oc, std::size_t pixel, std::span<const std::int32_t> win, std::size_t row) {
                                    std::int64_t acc = 0;
                                    const auto* wr = w + row;
                                    for (std::size_t i = 0; i < win.size(); ++i)
                                      acc += static_cast<std::int64_t>(win[i]) * wr[i];
                                    const std::int64_t mag = acc < 0 ? -acc : acc;
                                    if (mag > acc_lim)
                                      throw QuantError(s.core.name + ": accumulator overflow at " +
                                                       std::to_string(q.acc_bits) + " bits");
                                    max_abs_acc = std::max(max_abs_acc, mag);
                                    core[static_cast<std::size_t>(oc) * npix + pixel] =
                                        apply_affine_and_truncate(acc, q.realized, static_cast<std::size_t>(oc),
                                                                  q.out_format, mode);
                                  });
  if (s.relu && q.out_format.is_signed)
    for (auto& v : core) v = std::max(v, 0);

  ActivationTensor out;
  out.format = q.out_format;
  out.dims = s.out_shape();
  out.codes = s.pool ? max_pool(core, od, *s.pool, out.dims) : std::move(core);

  if (stats) {
    stats->name = s.core.name;
    stats->max_abs_acc = max_abs_acc;
    if (!out.codes.empty()) {
      const auto [mn, mx] = std::minmax_element(out.codes.begin(), out.codes.end());
      stats->min_code = *mn;
      stats->max_code = *mx;
      double sum = 0.0;
      std::int64_t sat = 0;
      const auto top = out.format.max_code();
      for (auto v : out.codes) {
        sum += v;
        sat += (v == top);
      }
      stats->mean_code = sum / static_cast<double>(out.codes.size());
      stats->saturated = sat;
    }
  }
  return out;
}

/// Float execution of one fused stage: conv, BN, optional ReLU, optional pool.
inline FloatTensor3 float_stage(const FusedStage& s, const StageParams& p, const FloatTensor3& input) {
  if (input.dims != s.in_shape()) throw ShapeError(s.core.name + ": float input shape mismatch");
  const Shape3 od = s.core_shape();
  const std::size_t npix = static_cast<std::size_t>(od.h) * od.w;
  std::vector<double> core(od.size());
  std::vector<double> w(p.weights.begin(), p.weights.end());
  detail::conv_loop<double>(s, input.data,
                            [&](int oc, std::size_t pixel, std::span<const double> win, std::size_t row) {
                              double acc = 0.0;
                              const double* wr = w.data() + row;
                              for (std::size_t i = 0; i < win.size(); ++i) acc += win[i] * wr[i];
                              core[static_cast<std::size_t>(oc) * npix + pixel] = acc;
                            });
  for (int oc = 0; oc < s.core.out_channels; ++oc) {
    const double b = p.bias.empty() ? 0.0 : p.bias[static_cast<std::size_t>(oc)];
    double scale = 1.0, shift = b;
    if (p.bn) {
      const auto i = static_cast<std::size_t>(oc);
      const double alpha = p.bn->gamma[i] / std::sqrt(p.bn->var[i] + p.bn->eps);
      scale = alpha;
      shift = p.bn->beta[i] + alpha * (b - p.bn->mean[i]);
    }
    for (std::size_t k = 0; k < npix; ++k) {
      double& v = core[static_cast<std::size_t>(oc) * npix + k];
      v = v * scale + shift;
      if (s.relu) v = std::max(v, 0.0);
    }
  }
  FloatTensor3 out;
  out.dims = s.out_shape();
  out.data = s.pool ? max_pool(core, od, *s.pool, out.dims) : std::move(core);
  return out;
}

/// Input bytes as real values under the model's input format.
inline FloatTensor3 image_to_float(const ActivationTensor& img) {
  FloatTensor3 t;
  t.dims = img.dims;
  t.data.resize(img.codes.size());
  const double step = img.format.step();
  for (std::size_t i = 0; i < img.codes.size(); ++i) t.data[i] = img.codes[i] * step;
  return t;
}

/// Float logits (or final activations) of the fused graph; every stage output
/// is appended to `trace` when given.
inline FloatTensor3 float_reference(const NetworkGraph& g, const WeightFile& wf, const ActivationTensor& image,
                                    std::vector<FloatTensor3>* trace = nullptr) {
  if (image.dims != g.input_shape) throw ShapeError("image shape does not match the network input");
  FloatTensor3 cur = image_to_float(image);
  for (const auto& s : g.stages) {
    cur = float_stage(s, stage_params(s, wf), cur);
    if (trace) trace->push_back(cur);
  }
  return cur;
}

struct NetworkResult {
  ActivationTensor output;
  std::vector<StageStats> stats;
};

inline NetworkResult run_network(const NetworkGraph& g, const QuantizedModel& m, const ActivationTensor& image) {
  if (image.dims != g.input_shape) throw ShapeError("image shape does not match the network input");
  if (m.stages.size() != g.stages.size()) throw QuantError("quantized model has a different stage count");
  NetworkResult r;
  ActivationTensor cur = image;
  cur.format = m.input_format;
  for (std::size_t i = 0; i < g.stages.size(); ++i) {
    StageStats st;
    cur = run_stage(g.stages[i], m.stages[i], cur, m.rounding, &st);
    r.stats.push_back(std::move(st));
  }
  r.output = std::move(cur);
  return r;
}

inline std::size_t argmax(std::span<const std::int32_t> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Deterministic uniform 8-bit image.
inline ActivationTensor synthetic_image(const Shape3& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ActivationTensor img;
  img.dims = dims;
  img.format = FixedPointFormat{8, 8, false};
  img.codes.resize(dims.size());
  for (auto& v : img.codes) v = static_cast<std::int32_t>(rng() >> 56);
  return img;
}

struct QuantizeOptions {
  int calib_images = 1;
  std::uint64_t calib_seed = 0x5eed;
  double percentile = 0.999;
  RoundingMode rounding = RoundingMode::HalfAway;
};

inline double percentile_abs(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  for (auto& x : v) x = std::fabs(x);
  const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
  const auto k = std::min(idx, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

/// Quantizes every stage under the scheme. Activation binary points come from
/// float-reference statistics on deterministic calibration images: the 99.9th
/// percentile for unsigned activations, the largest magnitude for the signed
/// output stage.
inline QuantizedModel quantize_model(const NetworkGraph& g, const WeightFile& wf, const PrecisionScheme& scheme,
                                     const QuantizeOptions& opt = {}) {
  scheme.validate();
  if (g.stages.empty()) throw QuantError("network has no stages");
  QuantizedModel m;
  m.scheme = scheme;
  m.rounding = opt.rounding;
  m.input_format = FixedPointFormat{scheme.input_bits, scheme.input_bits, false};

  std::vector<std::vector<double>> samples(g.stages.size());
  std::vector<double> out_max(g.stages.size(), 0.0);
  for (int i = 0; i < std::max(1, opt.calib_images); ++i) {
    ActivationTensor img = synthetic_image(g.input_shape, opt.calib_seed + static_cast<std::uint64_t>(i));
    img.format = m.input_format;
    std::vector<FloatTensor3> trace;
    float_reference(g, wf, img, &trace);
    for (std::size_t k = 0; k < trace.size(); ++k) {
      samples[k].insert(samples[k].end(), trace[k].data.begin(), trace[k].data.end());
      for (double v : trace[k].data) out_max[k] = std::max(out_max[k], std::fabs(v));
    }
  }

  FixedPointFormat in_fmt = m.input_format;
  for (std::size_t k = 0; k < g.stages.size(); ++k) {
    const auto& s = g.stages[k];
    const StageParams p = stage_params(s, wf);
    QuantizedStage q;
    std::vector<int> dims = weight_dims(s);
    q.weights = quantize_weights(p.weights, scheme.weight_bits_for(s), dims);
    const BnParams bn = p.bn ? *p.bn : BnParams::identity(static_cast<std::size_t>(s.core.out_channels), 0.0);
    q.affine = fold_bn(bn, codec_unit(q.weights.codec), p.bias);
    q.in_format = in_fmt;
    if (s.position == StagePosition::Last) {
      const int bits = scheme.output_bits;
      q.out_format = FixedPointFormat{bits, frac_bits_for_range(out_max[k], bits, true), true};
    } else {
      const int bits = scheme.act_bits;
      q.out_format = FixedPointFormat{bits, frac_bits_for_range(percentile_abs(samples[k], opt.percentile), bits, false),
                                      false};
    }
    q.realized = realize_affine(q.affine, q.in_format.frac_bits, q.out_format.frac_bits);
    q.acc_bits = required_acc_bits(s.kernel_elems(), q.in_format.total_bits, codec_max_abs_code(q.weights.codec));
    m.stages.push_back(std::move(q));
    in_fmt = m.stages.back().out_format;
    std::vector<double>().swap(samples[k]);
  }
  return m;
}

}  // namespace elb
