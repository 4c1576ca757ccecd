// Acceptance runner: one PASS/FAIL line per criterion; exits non-zero if
// any criterion fails.

#include <algorithm>
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "elb/config.hpp"
#include "elb/reference.hpp"
#include "elb/zoo.hpp"

using namespace elb;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
  void note(const std::string& what) { notes.push_back(what); }
};

int failures = 0;

void run(int id, const char* title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.check(false, std::string("exception: ") + e.what());
  }
  std::printf("%s %d %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, title, seconds_since(t0));
  for (const auto& n : o.notes) std::printf("       %s\n", n.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

bool within_rel(double got, double want, double rel) { return std::fabs(got - want) <= rel * std::fabs(want); }

Calibration shipped_calibration() {
  return parse_calibration(read_file_text(std::string(ELB_DATA_DIR) + "/calibration.cfg"));
}

ReferenceTable shipped_table() { return load_reference_table(std::string(ELB_DATA_DIR) + "/board_results.json"); }

// ---------------------------------------------------------------------------
// Independent counts over the un-fused layer list.

struct LayerCount {
  double macs = 0;
  double conv1_macs = 0;
  double conv_weights = 0;
  double conv_feature_elems = 0;  // input plus conv outputs before pooling
};

LayerCount count_layers(const LayerGraph& g) {
  LayerCount c;
  const Shape3 in = g.input_shape();
  c.conv_feature_elems = static_cast<double>(in.c) * in.h * in.w;
  bool first = true;
  for (const auto& l : g.layers) {
    double macs = 0;
    if (l.kind == LayerKind::Conv) {
      const double per_out = static_cast<double>(l.kernel_h) * l.kernel_w * (l.in_shape.c / l.group);
      macs = static_cast<double>(l.out_shape.c) * l.out_shape.h * l.out_shape.w * per_out;
      c.conv_weights += l.out_shape.c * per_out;
      c.conv_feature_elems += static_cast<double>(l.out_shape.c) * l.out_shape.h * l.out_shape.w;
    } else if (l.kind == LayerKind::FullyConnected) {
      macs = static_cast<double>(l.out_channels) * l.in_shape.c * l.in_shape.h * l.in_shape.w;
    } else {
      continue;
    }
    if (first) c.conv1_macs = macs;
    first = false;
    c.macs += macs;
  }
  return c;
}

// ---------------------------------------------------------------------------
// 1 - 5: complexity, shares, perf identity, bandwidth

void complexity(Outcome& o) {
  const auto t0 = Clock::now();
  struct Case {
    ZooModel m;
    double want, tol;
  };
  for (const Case& c : {Case{ZooModel::AlexNet, 1.45, 0.03}, Case{ZooModel::AlexNetExtended, 4.22, 0.05},
                        Case{ZooModel::VGG16, 31.0, 0.03}}) {
    const auto g = zoo_model(c.m);
    const double gop = network_gop(g).total;
    const double hand = 2 * count_layers(zoo_layers(c.m)).macs / 1e9;
    o.check(within_rel(gop, c.want, c.tol) && within_rel(gop, hand, 1e-12),
            fmt("%-17s %.4f GOP (hand count %.4f), reference %.2f +-%.0f%%", std::string(to_string(c.m)).c_str(), gop,
                hand, c.want, 100 * c.tol));
  }
  const auto ng = zoo_model(ZooModel::AlexNetNoGroup);
  const double gop = network_gop(ng).total;
  const double hand = 2 * count_layers(zoo_layers(ZooModel::AlexNetNoGroup)).macs / 1e9;
  o.check(within_rel(gop, hand, 1e-12) && within_rel(gop, 2.27, 0.01),
          fmt("alexnet_nogroup   %.4f GOP (hand count %.4f); the board table lists 2.61 (%+.1f%%), a known "
              "inconsistency",
              gop, hand, 100 * (gop / 2.61 - 1)));
  const double t = seconds_since(t0);
  o.check(t < 1.0, fmt("runtime %.3f s (< 1 s)", t));
}

void first_layer_share(Outcome& o) {
  const auto r = network_gop(zoo_model(ZooModel::AlexNet));
  const double share = 100 * r.stages.front().gop / r.total;
  const auto hand = count_layers(zoo_layers(ZooModel::AlexNet));
  const double hand_share = 100 * hand.conv1_macs / hand.macs;
  o.check(std::fabs(share - 14.5) <= 0.5 && std::fabs(share - hand_share) < 1e-12,
          fmt("conv1 %.2f%% of AlexNet GOP (hand count %.2f%%), target 14.5 +-0.5 points", share, hand_share));
}

void perf_identity(Outcome& o) {
  const auto table = shipped_table();
  for (const auto& row : table.rows) {
    const auto g = zoo_model(row.model);
    const auto r = report_from_speed(g, parse_precision_tag(row.scheme), row.speed);
    const bool exact = r.perf == r.speed * r.gop / 1000.0 && r.speed == row.speed;
    o.check(exact, fmt("%-26s %7.1f img/s x %.4f GOP = %.4f TOPS (exact)", row.label.c_str(), r.speed, r.gop, r.perf));
    const double listed = perf_tops(row.speed, row.gop);
    if (!within_rel(listed, row.perf, 0.01))
      o.note(fmt("  listed speed x listed GOP = %.3f, but the table prints %.3f TOPS", listed, row.perf));
  }
  const auto a = report_from_speed(zoo_model(ZooModel::AlexNet), parse_precision_tag("Alexnet-8-8218"), 856.1);
  const auto v = report_from_speed(zoo_model(ZooModel::VGG16), parse_precision_tag("VGG16-2-8118"), 332.2);
  o.check(std::round(a.perf * 100) == 124 && std::round(v.perf * 10) == 103,
          fmt("856.1 img/s -> %.3f TOPS; 332.2 img/s -> %.2f TOPS", a.perf, v.perf));
}

void data_volume_shares(Outcome& o) {
  struct Case {
    ZooModel m;
    double want, tol;
  };
  const auto scheme = parse_precision_tag("n-8-2222");
  for (const Case& c : {Case{ZooModel::AlexNet, 60, 7}, Case{ZooModel::VGG16, 80, 5}}) {
    const auto v = data_volume(zoo_model(c.m), scheme, 1);
    const auto hand = count_layers(zoo_layers(c.m));
    const double feat = 8 * hand.conv_feature_elems, wts = 2 * hand.conv_weights;
    const double hand_share = 100 * feat / (feat + wts);
    const double share = 100 * v.conv_feature_share;
    o.check(std::fabs(share - c.want) <= c.tol && std::fabs(share - hand_share) < 1e-9,
            fmt("%-8s conv feature share %.2f%% (hand count %.2f%%), target %.0f +-%.0f points",
                std::string(to_string(c.m)).c_str(), share, hand_share, c.want, c.tol));
  }
}

void bandwidth(Outcome& o) {
  const auto table = shipped_table();
  const auto cal = shipped_calibration();
  const auto dev = zc706();
  std::map<std::string, double> at_ref;
  for (const auto& row : table.rows) {
    if (row.model.rfind("alexnet", 0) != 0) continue;
    const auto g = zoo_model(row.model);
    const auto scheme = parse_precision_tag(row.scheme);
    const double bw = bandwidth_gbs(data_volume(g, scheme, row.batch), row.speed, cal);
    at_ref[row.label] = bw;
    o.check(within_rel(bw, row.bandwidth, 0.40),
            fmt("%-26s %.2f GB/s at batch %d, %.1f img/s; table %.2f (%+.0f%%, limit 40%%)", row.label.c_str(), bw,
                row.batch, row.speed, row.bandwidth, 100 * (bw / row.bandwidth - 1)));
    try {
      const auto e = estimate(balance_pipeline(g, scheme, dev, cal), g, scheme, dev, cal);
      o.note(fmt("  at the searched design point: %.2f GB/s, batch %d, %.1f img/s", e.bandwidth, e.batch, e.speed));
    } catch (const InfeasibleError& e) {
      o.note(std::string("  no feasible design point: ") + e.what());
    }
  }
  const double ratio = at_ref["Alexnet-8-8888"] / at_ref["Alexnet-8-8218"];
  o.check(within_rel(ratio, 10.8 / 3.35, 0.35),
          fmt("8888 / 8218 bandwidth ratio %.2f, reference %.2f +-35%%", ratio, 10.8 / 3.35));

  bool monotone = true;
  for (const char* tag : {"Alexnet-8-8888", "Alexnet-8-8218", "Alexnet-4-8218"}) {
    const auto g = zoo_model(ZooModel::AlexNet);
    const auto scheme = parse_precision_tag(tag);
    double prev = std::numeric_limits<double>::infinity();
    for (int b = 1; b <= 4096; b *= 2) {
      const auto v = data_volume(g, scheme, b);
      const double fc = v.traffic_bytes_per_frame - (v.conv_weight_bits + v.input_bits) / 8.0;
      monotone = monotone && fc < prev && fc > 0 && fc == v.fc_weight_bits / b / 8.0;
      prev = fc;
    }
    const auto lim = data_volume(g, scheme, 1e300);
    monotone = monotone && lim.traffic_bytes_per_frame == (lim.conv_weight_bits + lim.input_bits) / 8.0;
  }
  o.check(monotone, "FC weight traffic per frame strictly decreases with batch and vanishes in the limit");
}

// ---------------------------------------------------------------------------
// 6: quantizer laws

std::vector<float> random_tensor(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(1, 600);
  std::vector<float> w(static_cast<std::size_t>(len(rng)));
  std::normal_distribution<double> normal(0, 1);
  std::uniform_real_distribution<double> uni(-1, 1);
  const int kind = static_cast<int>(rng() % 4);
  const double scale = std::ldexp(1.0, static_cast<int>(rng() % 17) - 8) * (0.5 + uni(rng) * 0.25 + 0.25);
  for (auto& v : w) {
    double x = 0;
    switch (kind) {
      case 0: x = normal(rng); break;
      case 1: x = uni(rng); break;
      case 2: x = rng() % 4 == 0 ? 0.0 : normal(rng); break;              // exact zeros
      case 3: x = normal(rng) * (rng() % 16 == 0 ? 20.0 : 1.0); break;  // heavy tail
    }
    v = static_cast<float>(x * scale);
  }
  if (rng() % 8 == 0) w[0] = 0.0f;
  return w;
}

double in_order_mean_abs(const std::vector<float>& w) {
  double s = 0;
  for (float v : w) s += std::fabs(static_cast<double>(v));
  return s / static_cast<double>(w.size());
}

void quantizer_laws(Outcome& o) {
  std::mt19937_64 rng(20240601);
  const int n = 12000;
  long binary_bad = 0, ternary_bad = 0, threshold_bad = 0, zero_frac_bad = 0, scaling_bad = 0, fixed_bad = 0;
  long ambiguous = 0;
  for (int t = 0; t < n; ++t) {
    const auto w = random_tensor(rng);
    const double m = in_order_mean_abs(w);
    if (m == 0) {  // no scale exists; draw again
      --t;
      continue;
    }
    long double m_long = 0;
    for (float v : w) m_long += std::fabs(static_cast<long double>(v));
    m_long /= w.size();
    if (std::fabs(static_cast<long double>(m) - m_long) > 1e-12L * m_long) ++threshold_bad;

    // Binary: code = sign with sign(0) = +1, scale = mean |w|.
    const auto b = binarize(w);
    const auto& bc = std::get<BinaryCodec>(b.codec);
    bool ok = bc.scale == m;
    for (std::size_t i = 0; i < w.size(); ++i) ok = ok && b.codes[i] == (w[i] >= 0.0f ? 1 : -1);
    const auto bd = b.dequantize();
    for (std::size_t i = 0; i < w.size(); ++i) ok = ok && bd[i] == b.codes[i] * m;
    binary_bad += !ok;

    // Ternary: threshold, kept set, scale over the kept set, zero fraction.
    const auto q = ternarize(w);
    const auto& tc = std::get<TernaryCodec>(q.codec);
    const double thr = 0.7 * m;
    threshold_bad += tc.threshold != thr;
    ok = true;
    double kept = 0;
    std::size_t n_kept = 0, n_small = 0, n_zero = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double a = std::fabs(static_cast<double>(w[i]));
      const int want = a > thr ? (w[i] < 0 ? -1 : 1) : 0;
      ok = ok && q.codes[i] == want;
      if (a > thr) {
        kept += a;
        ++n_kept;
      } else {
        ++n_small;
      }
      n_zero += q.codes[i] == 0;
    }
    ok = ok && tc.scale == kept / static_cast<double>(n_kept);
    ternary_bad += !ok;
    zero_frac_bad += n_zero != n_small;

    // Positive scaling. Powers of two are exact in float, so every code must
    // survive; other factors can move an entry across the threshold only when
    // it sits within rounding distance of it.
    const int k = static_cast<int>(rng() % 9) - 4;
    std::vector<float> w2(w), w3(w);
    const double f = 0.3 + 3.0 * static_cast<double>(rng() % 1000) / 1000.0;
    for (auto& v : w2) v = std::ldexp(v, k);
    for (auto& v : w3) v = static_cast<float>(v * f);
    const auto b2 = binarize(w2), q2 = ternarize(w2), b3 = binarize(w3), q3 = ternarize(w3);
    ok = b2.codes == b.codes && q2.codes == q.codes && std::get<BinaryCodec>(b2.codec).scale == std::ldexp(m, k) &&
         std::get<TernaryCodec>(q2.codec).threshold == std::ldexp(thr, k) && b3.codes == b.codes;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (q3.codes[i] == q.codes[i]) continue;
      const double a = std::fabs(static_cast<double>(w[i]));
      if (std::fabs(a - thr) <= 1e-6 * thr)
        ++ambiguous;
      else
        ok = false;
    }
    for (int bits : {3, 4, 8}) {
      const auto fa = quantize_weights(w, bits), fb = quantize_weights(w2, bits);
      ok = ok && fa.codes == fb.codes;
    }
    scaling_bad += !ok;

    // Fixed point: symmetric codes, error within half a step, tightest range.
    const int bits = 3 + static_cast<int>(rng() % 6);
    const auto fq = quantize_weights(w, bits);
    const auto& ff = std::get<FixedCodec>(fq.codec).format;
    const std::int64_t top = (std::int64_t{1} << (bits - 1)) - 1;
    double max_abs = 0;
    for (float v : w) max_abs = std::max(max_abs, std::fabs(static_cast<double>(v)));
    ok = ff.total_bits == bits && ff.is_signed;
    if (max_abs > 0) ok = ok && max_abs * std::ldexp(1.0, ff.frac_bits) <= top &&
                          max_abs * std::ldexp(1.0, ff.frac_bits + 1) > top;
    for (std::size_t i = 0; i < w.size(); ++i)
      ok = ok && std::llabs(fq.codes[i]) <= top && std::fabs(fq.codes[i] * ff.step() - w[i]) <= ff.step() / 2;
    fixed_bad += !ok;
  }
  o.check(binary_bad == 0, fmt("binary: sign codes and mean-magnitude scale on %d tensors, %ld violations", n, binary_bad));
  o.check(threshold_bad == 0, fmt("ternary threshold == 0.7 x mean|w| bit for bit, %ld violations", threshold_bad));
  o.check(ternary_bad == 0, fmt("ternary: codes and kept-entry scale, %ld violations", ternary_bad));
  o.check(zero_frac_bad == 0, fmt("ternary zero count == #{|w| <= threshold}, %ld violations", zero_frac_bad));
  o.check(scaling_bad == 0,
          fmt("codes invariant under positive scaling, %ld violations (%ld threshold ties under inexact factors)",
              scaling_bad, ambiguous));
  o.check(fixed_bad == 0, fmt("fixed: symmetric codes, half-step error, tightest fraction, %ld violations", fixed_bad));
}

// ---------------------------------------------------------------------------
// 7: emulator against a scalar reference

struct Layer {
  NetworkGraph g;
  QuantizedStage q;
  ActivationTensor input;
  RoundingMode mode;
  std::string codec;
};

std::int64_t floor_div_pow2(std::int64_t v, int sh) {
  const std::int64_t d = std::int64_t{1} << sh;
  std::int64_t q = v / d;
  if (v % d != 0 && v < 0) --q;
  return q;
}

// Half away from zero: floor((2|v| + d) / 2d) with the sign reapplied.
std::int64_t round_div_pow2(std::int64_t v, int sh) {
  const std::int64_t a = v < 0 ? -v : v;
  const std::int64_t r = (2 * a + (std::int64_t{1} << sh)) / (std::int64_t{1} << (sh + 1));
  return v < 0 ? -r : r;
}

std::vector<std::int32_t> reference_stage(const Layer& L) {
  const auto& s = L.g.stages[0];
  const auto& c = s.core;
  const Shape3 in = s.in_shape();
  const Shape3 core = s.core_shape();
  const auto& w = L.q.weights.codes;
  const auto& r = L.q.realized;
  const auto lo = L.q.out_format.min_code(), hi = L.q.out_format.max_code();
  auto px = [&](int ch, int y, int x) -> std::int64_t {
    if (y < 0 || y >= in.h || x < 0 || x >= in.w) return 0;
    return L.input.codes[(static_cast<std::size_t>(ch) * in.h + y) * in.w + x];
  };
  std::vector<std::int32_t> out(core.size());
  const int cin_g = c.in_channels / c.group, cout_g = c.out_channels / c.group;
  for (int oc = 0; oc < core.c; ++oc)
    for (int oy = 0; oy < core.h; ++oy)
      for (int ox = 0; ox < core.w; ++ox) {
        std::int64_t acc = 0;
        if (s.is_fc()) {
          std::size_t k = 0;
          for (int ch = 0; ch < in.c; ++ch)
            for (int y = 0; y < in.h; ++y)
              for (int x = 0; x < in.w; ++x, ++k) acc += px(ch, y, x) * w[static_cast<std::size_t>(oc) * s.kernel_elems() + k];
        } else {
          const int g = oc / cout_g;
          for (int ic = 0; ic < cin_g; ++ic)
            for (int ky = 0; ky < c.kernel_h; ++ky)
              for (int kx = 0; kx < c.kernel_w; ++kx) {
                const std::size_t wi =
                    ((static_cast<std::size_t>(oc) * cin_g + ic) * c.kernel_h + ky) * c.kernel_w + kx;
                acc += px(g * cin_g + ic, oy * c.stride - c.pad + ky, ox * c.stride - c.pad + kx) * w[wi];
              }
        }
        const std::int64_t v = acc * r.scale_codes[oc] + r.bias_codes[oc];
        std::int64_t y = r.frac_bits == 0 ? v
                         : L.mode == RoundingMode::Truncate ? floor_div_pow2(v, r.frac_bits)
                                                            : round_div_pow2(v, r.frac_bits);
        y = std::clamp(y, lo, hi);
        if (s.relu) y = std::max<std::int64_t>(y, 0);
        out[(static_cast<std::size_t>(oc) * core.h + oy) * core.w + ox] = static_cast<std::int32_t>(y);
      }
  if (!s.pool) return out;
  const auto& p = *s.pool;
  const Shape3 od = s.out_shape();
  std::vector<std::int32_t> pooled(od.size());
  for (int ch = 0; ch < od.c; ++ch)
    for (int oy = 0; oy < od.h; ++oy)
      for (int ox = 0; ox < od.w; ++ox) {
        std::int32_t best = std::numeric_limits<std::int32_t>::min();
        for (int ky = 0; ky < p.kernel_h; ++ky)
          for (int kx = 0; kx < p.kernel_w; ++kx) {
            const int y = oy * p.stride - p.pad + ky, x = ox * p.stride - p.pad + kx;
            if (y >= 0 && y < core.h && x >= 0 && x < core.w)
              best = std::max(best, out[(static_cast<std::size_t>(ch) * core.h + y) * core.w + x]);
          }
        pooled[(static_cast<std::size_t>(ch) * od.h + oy) * od.w + ox] = best;
      }
  return pooled;
}

Layer random_layer(std::mt19937_64& rng, int index) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
  Layer L;
  const int groups = index % 2 + 1;
  const int h = pick(2, 8), w = pick(2, 8);
  const int cin = groups * pick(1, 16 / groups);
  const int cout = groups * pick(1, 16 / groups);
  const bool fc = index % 5 == 4;
  const bool relu = rng() % 2;
  detail::ChainBuilder b(cin, h, w);
  if (fc) {
    b.fc("f", cout);
    if (relu) b.bn_relu("f");
  } else {
    const int k = pick(1, std::min(3, std::min(h, w)));
    const int pad = pick(0, k - 1);
    const int stride = pick(1, 2);
    b.conv("c", cout, k, stride, pad, groups);
    if (relu) b.bn_relu("c");
    const int oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
    if (rng() % 3 == 0 && oh >= 2 && ow >= 2) b.pool("p", 2, pick(1, 2));
  }
  L.g = fuse(b.build(), "layer");
  const auto& s = L.g.stages[0];

  const int act_bits[] = {2, 4, 8};
  const int in_bits = act_bits[rng() % 3];
  L.input.dims = s.in_shape();
  L.input.format = {in_bits, pick(0, in_bits), false};
  L.input.codes.resize(L.input.dims.size());
  for (auto& v : L.input.codes) v = static_cast<std::int32_t>(rng() % (std::uint64_t{1} << in_bits));

  const int codec_kind = index % 3;
  const int wbits = codec_kind == 0 ? 1 : codec_kind == 1 ? 2 : pick(3, 8);
  std::vector<std::int32_t> codes(static_cast<std::size_t>(s.weight_count()));
  const std::int32_t wtop = wbits <= 2 ? 1 : (1 << (wbits - 1)) - 1;
  for (auto& c : codes) {
    if (wbits == 1) c = rng() % 2 ? 1 : -1;
    else c = static_cast<std::int32_t>(static_cast<std::int64_t>(rng() % (2 * wtop + 1)) - wtop);
  }
  L.q.weights.codes = codes;
  L.q.weights.dims = weight_dims(s);
  if (wbits == 1) L.q.weights.codec = BinaryCodec{0.5};
  else if (wbits == 2) L.q.weights.codec = TernaryCodec{0.5, 0.35};
  else L.q.weights.codec = FixedCodec{{wbits, wbits - 1, true}};
  L.codec = codec_name(L.q.weights.codec);

  const bool signed_out = rng() % 3 == 0;
  const int out_bits = signed_out ? 16 : act_bits[rng() % 3];
  L.q.in_format = L.input.format;
  L.q.out_format = {out_bits, pick(0, out_bits - 1), signed_out};
  L.q.acc_bits = required_acc_bits(s.kernel_elems(), in_bits, wtop);

  // Scales sized so the output range is exercised rather than pinned.
  const int acc_log = ceil_log2(static_cast<std::uint64_t>(s.kernel_elems()) << in_bits) + wbits;
  const int sh = std::clamp(acc_log + 23 - out_bits + pick(-3, 3), 0, 40);
  L.q.realized.frac_bits = sh;
  for (int oc = 0; oc < s.core.out_channels; ++oc) {
    L.q.realized.scale_codes.push_back(static_cast<std::int64_t>(rng() % (1u << 24)) - (1 << 23) + 1);
    const std::int64_t bias_top = std::int64_t{1} << std::min(sh + out_bits, 46);
    L.q.realized.bias_codes.push_back(static_cast<std::int64_t>(rng() % (2 * static_cast<std::uint64_t>(bias_top))) -
                                      bias_top);
  }
  L.mode = rng() % 4 == 0 ? RoundingMode::Truncate : RoundingMode::HalfAway;
  return L;
}

// Set of every accumulator value K products can reach, built one tap at a time.
std::set<std::int64_t> reachable_sums(int taps, int act_bits, const std::vector<std::int32_t>& code_set) {
  std::set<std::int64_t> products;
  for (std::int64_t a = 0; a < (std::int64_t{1} << act_bits); ++a)
    for (auto c : code_set) products.insert(a * c);
  std::set<std::int64_t> sums{0};
  for (int k = 0; k < taps; ++k) {
    std::set<std::int64_t> next;
    for (auto s : sums)
      for (auto p : products) next.insert(s + p);
    sums.swap(next);
  }
  return sums;
}

void emulator_equivalence(Outcome& o) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(77);
  int mismatches = 0;
  std::map<std::string, int> codecs;
  std::set<int> acts, groups;
  int fc = 0, pooled = 0, signed_out = 0, truncate = 0;
  std::int64_t outputs = 0, interior = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto L = random_layer(rng, i);
    const auto& s = L.g.stages[0];
    const auto got = run_stage(s, L.q, L.input, L.mode);
    if (got.codes != reference_stage(L) || got.dims != s.out_shape()) ++mismatches;
    for (auto v : got.codes) interior += v > L.q.out_format.min_code() && v < L.q.out_format.max_code() && v != 0;
    outputs += static_cast<std::int64_t>(got.codes.size());
    ++codecs[L.codec];
    acts.insert(L.q.in_format.total_bits);
    groups.insert(s.core.group);
    fc += s.is_fc();
    pooled += s.pool.has_value();
    signed_out += L.q.out_format.is_signed;
    truncate += L.mode == RoundingMode::Truncate;
  }
  o.check(mismatches == 0 && codecs.size() == 3 && acts.size() == 3 && groups.size() == 2,
          fmt("1000 random layers, %d mismatches (binary %d, ternary %d, fixed %d; %d fc, %d pooled, %d signed "
              "out, %d truncating)",
              mismatches, codecs["binary"], codecs["ternary"], codecs["fixed"], fc, pooled, signed_out, truncate));
  o.note(fmt("%.1f%% of %lld outputs fall strictly inside the clamp range", 100.0 * interior / outputs,
             static_cast<long long>(outputs)));

  // Exhaustive accumulator range for short reductions.
  int cases = 0, overflow = 0, loose = 0;
  const std::vector<std::pair<std::string, std::vector<std::int32_t>>> code_sets = {
      {"binary", {-1, 1}}, {"ternary", {-1, 0, 1}}, {"fixed3", {-3, -2, -1, 0, 1, 2, 3}},
      {"fixed4", {-7, -6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6, 7}}};
  for (const auto& [name, set] : code_sets) {
    for (int act = 1; act <= 3; ++act)
      for (int k = 1; k <= 8; ++k) {
        const auto sums = reachable_sums(k, act, set);
        const std::int64_t extreme = std::max(-*sums.begin(), *sums.rbegin());
        const int bits = required_acc_bits(k, act, set.back());
        overflow += extreme > (std::int64_t{1} << (bits - 1)) - 1;
        loose += extreme <= (std::int64_t{1} << (bits - 2)) - 1;  // one bit fewer would have sufficed
        ++cases;

        // Drive run_stage itself with the worst-case window.
        const auto g = fuse(detail::ChainBuilder(k, 1, 1).fc("f", 1).build(), "acc");
        QuantizedStage q;
        q.in_format = {act, 0, false};
        q.out_format = {16, 0, true};
        q.weights.codes.assign(static_cast<std::size_t>(k), set.back());
        q.weights.codec = set.size() == 2 ? WeightCodec{BinaryCodec{}}
                          : set.size() == 3 ? WeightCodec{TernaryCodec{}}
                                            : WeightCodec{FixedCodec{{set.size() == 7 ? 3 : 4, 0, true}}};
        q.realized.scale_codes = {1};
        q.realized.bias_codes = {0};
        q.acc_bits = bits;
        ActivationTensor in;
        in.dims = g.stages[0].in_shape();
        in.format = q.in_format;
        in.codes.assign(static_cast<std::size_t>(k), (1 << act) - 1);
        try {
          run_stage(g.stages[0], q, in);
        } catch (const QuantError&) {
          ++overflow;
        }
      }
  }
  o.check(overflow == 0 && loose == 0,
          fmt("exhaustive K <= 8, act <= 3 bits, 4 code sets: %d cases, %d overflows, %d widths one bit too wide",
              cases, overflow, loose));
  const double t = seconds_since(t0);
  o.check(t < 120, fmt("runtime %.2f s (< 120 s)", t));
}

// ---------------------------------------------------------------------------
// 8: DSE against exhaustive search

NetworkGraph random_chain(std::mt19937& rng, int stages) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo + 1)); };
  const int hw = pick(3, 8);
  const int cin = 2 * pick(1, 4);
  detail::ChainBuilder b(cin, hw, hw);
  bool spatial = true;
  int ch = cin;
  for (int i = 0; i < stages; ++i) {
    const std::string name = "s" + std::to_string(i);
    if (spatial && rng() % 3 != 0) {
      const int k = rng() % 2 ? 3 : 1;
      const int group = ch % 2 == 0 && rng() % 3 == 0 ? 2 : 1;
      ch = group * pick(1, 12);
      b.conv(name, ch, k, 1, k / 2, group);
    } else {
      b.fc(name, pick(1, 40));
      spatial = false;
    }
    if (rng() % 2) b.bn_relu(name);
  }
  return fuse(b.build(), "chain");
}

// Every combination of power-of-two parallelism per stage and every batch.
double exhaustive_speed(const NetworkGraph& g, const PrecisionScheme& sch, const DeviceBudget& d,
                        const Calibration& c) {
  const auto avail = available(d, c);
  struct Choice {
    std::int64_t cycles;
    StageCost cost;
  };
  std::vector<std::vector<Choice>> opts(g.stages.size());
  for (std::size_t i = 0; i < g.stages.size(); ++i) {
    const auto& s = g.stages[i];
    const std::int64_t k = s.kernel_elems(), m = s.core.out_channels / s.core.group;
    for (std::int64_t pi = 1; pi / 2 < k; pi *= 2)
      for (std::int64_t po = 1; po / 2 < m; po *= 2) {
        if (pi * po > c.max_parallel) continue;
        const std::int64_t cycles =
            s.out_pixels() * s.core.group * ((k + pi - 1) / pi) * ((m + po - 1) / po) + c.fill_cycles;
        opts[i].push_back({cycles, resource_cost(s, static_cast<int>(pi), static_cast<int>(po), sch, c)});
      }
  }
  double best = 0;
  for (int b = 1; b <= c.max_batch; ++b) {
    const auto dv = data_volume(g, sch, b);
    std::vector<std::size_t> idx(g.stages.size(), 0);
    for (;;) {
      Resources r;
      std::int64_t cyc = 0;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        r += opts[i][idx[i]].cost.total(b);
        cyc = std::max(cyc, opts[i][idx[i]].cycles);
      }
      const double speed = b * d.clock_mhz * 1e6 / static_cast<double>(cyc);
      if (r.lut <= avail.lut && r.ff <= avail.ff && r.dsp <= avail.dsp && r.bram <= avail.bram &&
          bandwidth_gbs(dv, speed, c) <= avail.bandwidth)
        best = std::max(best, speed);
      std::size_t k = 0;
      while (k < idx.size() && ++idx[k] == opts[k].size()) idx[k++] = 0;
      if (k == idx.size()) break;
    }
  }
  return best;
}

void dse_oracle(Outcome& o) {
  auto cal = shipped_calibration();
  auto small = cal;
  small.max_batch = 3;
  small.max_parallel = 64;
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  const char* tags[] = {"t-8-8218", "t-4-2228", "t-2-1111", "t-8-8888", "t-4-4448"};
  int chains = 0, feasible = 0, mismatch = 0, grouped = 0;
  std::map<std::string, int> bindings;
  for (int t = 0; t < 250; ++t) {
    const auto g = random_chain(rng, 1 + t % 4);
    const auto sch = parse_precision_tag(tags[t % 5]);
    const DeviceBudget d{"rand", 1500 + 30000 * u(rng), 2000 + 40000 * u(rng), 4 + 60 * u(rng), 2 + 60 * u(rng),
                         0.01 + 2 * u(rng), 100};
    for (const auto& s : g.stages) grouped += s.core.group > 1;
    ++chains;
    const double want = exhaustive_speed(g, sch, d, small);
    double got = 0;
    try {
      const auto p = balance_pipeline(g, sch, d, small);
      got = p.batch * d.clock_mhz * 1e6 / static_cast<double>(p.bottleneck_cycles);
      ++bindings[p.binding];
    } catch (const InfeasibleError&) {
    }
    feasible += want > 0;
    mismatch += got != want;
  }
  o.check(mismatch == 0 && feasible > chains / 2,
          fmt("%d random chains of 1-4 stages (%d grouped convs), parallelism <= 64: %d feasible, %d throughput "
              "mismatches, %zu distinct binding resources",
              chains, grouped, feasible, mismatch, bindings.size()));

  const auto g = zoo_model(ZooModel::AlexNet);
  struct Case {
    const char* tag;
    int batch;
    const char* binding;
  };
  for (const Case& c : {Case{"Alexnet-8-8218", 5, "bram"}, Case{"Alexnet-4-8218", 8, "dsp"}}) {
    const auto p = balance_pipeline(g, parse_precision_tag(c.tag), zc706(), cal);
    o.check(p.batch == c.batch && p.binding == c.binding,
            fmt("%s on zc706: batch %d, bound by %s (want %d, %s)", c.tag, p.batch, p.binding.c_str(), c.batch,
                c.binding));
  }
}

// ---------------------------------------------------------------------------
// 9: reproducibility

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

struct Artifacts {
  std::vector<std::uint8_t> elbq, config, logits;
};

Artifacts pipeline(const std::string& tag, std::uint64_t seed) {
  const auto g = fuse(parse_model(read_file_text(std::string(ELB_MODELS_DIR) + "/tiny.elbm")), "tiny");
  const auto scheme = parse_precision_tag(tag);
  const Calibration cal;  // built-in constants, so a refit does not move the digests
  const auto m = quantize_model(g, synthesize_weights(g, seed), scheme);
  Artifacts a;
  a.elbq = encode_elbq(m, g);
  const auto plan = balance_pipeline(g, scheme, zc706(), cal);
  a.config = as_bytes(emit_config(build_config(plan, g, decode_elbq(a.elbq, g), zc706(), cal)));
  const auto r = replay(parse_config(std::string(a.config.begin(), a.config.end())), a.elbq);
  a.logits = encode_logits(run_network(r.graph, r.model, synthetic_image(g.input_shape, seed + 1)).output);
  return a;
}

void reproducibility(Outcome& o) {
  // Digests recorded on the reference build; any platform must reproduce them.
  struct Case {
    const char* tag;
    std::uint64_t seed;
    std::uint64_t digest;
  };
  const Case cases[] = {{"tiny-4-8218", 5, 0x6a7109987f6d2c66ull},
                         {"tiny-8-8888", 6, 0x95ca99bc5f850678ull},
                         {"tiny-2-2121", 7, 0x220378cde402139eull}};
  for (const auto& c : cases) {
    const auto a = pipeline(c.tag, c.seed), b = pipeline(c.tag, c.seed);
    const bool same = a.elbq == b.elbq && a.config == b.config && a.logits == b.logits;
    const std::uint64_t d = fnv1a(a.logits, fnv1a(a.config, fnv1a(a.elbq)));
    o.check(same && d == c.digest,
            fmt("%s seed %llu: two runs %s; digest %016llx (recorded %016llx)", c.tag,
                static_cast<unsigned long long>(c.seed), same ? "byte-identical" : "DIFFER",
                static_cast<unsigned long long>(d), static_cast<unsigned long long>(c.digest)));
  }
}

}  // namespace

int main() {
  run(1, "complexity accounting", complexity);
  run(2, "first-layer share", first_layer_share);
  run(3, "perf identity", perf_identity);
  run(4, "conv data-volume shares", data_volume_shares);
  run(5, "bandwidth", bandwidth);
  run(6, "quantizer laws", quantizer_laws);
  run(7, "emulator equivalence", emulator_equivalence);
  run(8, "pipeline search", dse_oracle);
  run(9, "reproducibility", reproducibility);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
