#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elb/binio.hpp"
#include "elb/emu.hpp"
#include "elb/error.hpp"
#include "elb/netir.hpp"
#include "elb/precision.hpp"

namespace elb {

// ---------------------------------------------------------------------------
// Devices and calibration

struct DeviceBudget {
  std::string name = "custom";
  double lut = 0;
  double ff = 0;
  double bram36 = 0;
  double dsp = 0;
  double bandwidth_gbs = 0;
  double clock_mhz = 0;

  void validate() const {
    if (!(lut > 0 && ff > 0 && bram36 > 0 && dsp > 0 && bandwidth_gbs > 0 && clock_mhz > 0))
      throw UsageError("device '" + name + "': every budget field must be positive");
  }
  bool operator==(const DeviceBudget&) const = default;
};

/// Constants of the cost model. They are fitted, not derived; see
/// data/calibration.cfg and scripts/fit_calibration.sh.
struct Calibration {
  std::string version = "builtin";
  double lut_per_input_bit = 1.0;  // adder-tree LUTs per CE input per data bit
  double lut_per_acc_bit = 1.0;    // accumulator LUTs per bit, per CE
  double lut_per_ce = 32.0;        // fixed LUTs per CE
  double lut_per_stage = 0.0;      // pipeline control per stage and lane
  double ff_per_lut = 0.85;
  double dsp_per_stage = 0.0;      // address-generation multipliers per stage and lane
  int mults_per_dsp = 2;           // for operands of at most 8 bits
  int fill_cycles = 0;
  double bandwidth_overhead = 1.3;
  double sdk_fraction = 0.11;      // reserved share of LUT and BRAM
  int weight_port_bits = 72;       // read width of one weight-buffer block
  int weight_prefetch_cycles = 512;  // weight consumption held by one ping-pong half
  int act_port_bits = 72;          // read width of one reshape-buffer block
  int bram_bits = 36864;
  int max_batch = 32;
  int max_parallel = 4096;         // cap on p_in * p_out (search space only)

  bool operator==(const Calibration&) const = default;
};

namespace detail {

inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError(what + ": expected 'key: value'", n);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, colon)), value = trim(line.substr(colon + 1));
    if (key.empty() || value.empty()) throw ParseError(what + ": empty key or value", n);
    if (kv.count(key)) throw ParseError(what + ": duplicate key '" + key + "'", n);
    kv[key] = value;
  }
  return kv;
}

inline double kv_number(const std::map<std::string, std::string>& kv, const std::string& key, const std::string& what) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError(what + ": missing key '" + key + "'");
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != it->second.size()) throw ParseError(what + ": '" + key + "' is not a number");
  return v;
}

inline std::string fmt_number(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

inline DeviceBudget parse_device(const std::string& text) {
  const auto kv = detail::parse_key_values(text, "device");
  const std::string w = "device";
  for (const auto& [k, v] : kv)
    if (k != "name" && k != "lut" && k != "ff" && k != "bram36" && k != "dsp" && k != "bandwidth_gbs" &&
        k != "clock_mhz")
      throw ParseError("device: unknown key '" + k + "'");
  DeviceBudget d;
  if (auto it = kv.find("name"); it != kv.end()) d.name = it->second;
  d.lut = detail::kv_number(kv, "lut", w);
  d.ff = detail::kv_number(kv, "ff", w);
  d.bram36 = detail::kv_number(kv, "bram36", w);
  d.dsp = detail::kv_number(kv, "dsp", w);
  d.bandwidth_gbs = detail::kv_number(kv, "bandwidth_gbs", w);
  d.clock_mhz = detail::kv_number(kv, "clock_mhz", w);
  d.validate();
  return d;
}

inline std::string format_device(const DeviceBudget& d) {
  std::string s = "name: " + d.name + "\n";
  s += "lut: " + detail::fmt_number(d.lut) + "\n";
  s += "ff: " + detail::fmt_number(d.ff) + "\n";
  s += "bram36: " + detail::fmt_number(d.bram36) + "\n";
  s += "dsp: " + detail::fmt_number(d.dsp) + "\n";
  s += "bandwidth_gbs: " + detail::fmt_number(d.bandwidth_gbs) + "\n";
  s += "clock_mhz: " + detail::fmt_number(d.clock_mhz) + "\n";
  return s;
}

/// Zynq XC7Z045 on the ZC706 board with 64-bit DDR3-1600.
inline DeviceBudget zc706() { return {"zc706", 218600, 437200, 545, 900, 12.8, 200}; }

inline DeviceBudget device_preset(const std::string& name) {
  if (name == "zc706") return zc706();
  throw UsageError("unknown device preset '" + name + "'");
}

inline Calibration parse_calibration(const std::string& text) {
  const auto kv = detail::parse_key_values(text, "calibration");
  const std::string w = "calibration";
  Calibration c;
  const std::map<std::string, std::function<void(double)>> setters = {
      {"lut_per_input_bit", [&](double v) { c.lut_per_input_bit = v; }},
      {"lut_per_acc_bit", [&](double v) { c.lut_per_acc_bit = v; }},
      {"lut_per_ce", [&](double v) { c.lut_per_ce = v; }},
      {"lut_per_stage", [&](double v) { c.lut_per_stage = v; }},
      {"ff_per_lut", [&](double v) { c.ff_per_lut = v; }},
      {"dsp_per_stage", [&](double v) { c.dsp_per_stage = v; }},
      {"mults_per_dsp", [&](double v) { c.mults_per_dsp = static_cast<int>(v); }},
      {"fill_cycles", [&](double v) { c.fill_cycles = static_cast<int>(v); }},
      {"bandwidth_overhead", [&](double v) { c.bandwidth_overhead = v; }},
      {"sdk_fraction", [&](double v) { c.sdk_fraction = v; }},
      {"weight_port_bits", [&](double v) { c.weight_port_bits = static_cast<int>(v); }},
      {"weight_prefetch_cycles", [&](double v) { c.weight_prefetch_cycles = static_cast<int>(v); }},
      {"act_port_bits", [&](double v) { c.act_port_bits = static_cast<int>(v); }},
      {"bram_bits", [&](double v) { c.bram_bits = static_cast<int>(v); }},
      {"max_batch", [&](double v) { c.max_batch = static_cast<int>(v); }},
      {"max_parallel", [&](double v) { c.max_parallel = static_cast<int>(v); }},
  };
  for (const auto& [k, v] : kv) {
    if (k == "version") {
      c.version = v;
      continue;
    }
    auto it = setters.find(k);
    if (it == setters.end()) throw ParseError("calibration: unknown key '" + k + "'");
    it->second(detail::kv_number(kv, k, w));
  }
  if (c.mults_per_dsp < 1 || c.weight_port_bits < 1 || c.act_port_bits < 1 || c.bram_bits < 1 || c.max_batch < 1 || c.weight_prefetch_cycles < 1 ||
      c.max_parallel < 1 || c.fill_cycles < 0 || !(c.sdk_fraction >= 0 && c.sdk_fraction < 1) ||
      !(c.bandwidth_overhead > 0))
    throw ParseError("calibration: value out of range");
  return c;
}

inline std::string format_calibration(const Calibration& c) {
  std::string s = "version: " + c.version + "\n";
  auto kv = [&](const char* k, double v) { s += std::string(k) + ": " + detail::fmt_number(v) + "\n"; };
  kv("lut_per_input_bit", c.lut_per_input_bit);
  kv("lut_per_acc_bit", c.lut_per_acc_bit);
  kv("lut_per_ce", c.lut_per_ce);
  kv("lut_per_stage", c.lut_per_stage);
  kv("ff_per_lut", c.ff_per_lut);
  kv("dsp_per_stage", c.dsp_per_stage);
  kv("mults_per_dsp", c.mults_per_dsp);
  kv("fill_cycles", c.fill_cycles);
  kv("bandwidth_overhead", c.bandwidth_overhead);
  kv("sdk_fraction", c.sdk_fraction);
  kv("weight_port_bits", c.weight_port_bits);
  kv("weight_prefetch_cycles", c.weight_prefetch_cycles);
  kv("act_port_bits", c.act_port_bits);
  kv("bram_bits", c.bram_bits);
  kv("max_batch", c.max_batch);
  kv("max_parallel", c.max_parallel);
  return s;
}

// ---------------------------------------------------------------------------
// Complexity and data volume

struct StageOps {
  std::string name;
  std::int64_t macs = 0;
  double gop = 0;  // 2 * MACs / 1e9
};

struct GopReport {
  double total = 0;
  std::vector<StageOps> stages;
};

/// Multiply and add counted separately over Conv/FC cores.
inline GopReport network_gop(const NetworkGraph& g) {
  GopReport r;
  for (const auto& s : g.stages) {
    StageOps o{s.core.name, s.macs(), 2.0 * static_cast<double>(s.macs()) / 1e9};
    r.total += o.gop;
    r.stages.push_back(o);
  }
  return r;
}

struct DataVolume {
  double weight_bits = 0;       // all stages at codec widths
  double feature_bits = 0;      // input plus every stage output at act_bits
  double conv_weight_bits = 0;
  double conv_feature_bits = 0;  // input plus pre-pool conv outputs
  double fc_weight_bits = 0;
  double input_bits = 0;
  double conv_feature_share = 0;  // conv_feature / (conv_feature + conv_weight)
  double feature_share = 0;
  double traffic_bytes_per_frame = 0;  // before the overhead factor
};

inline int storage_bits(int weight_bits) { return weight_bits; }

inline DataVolume data_volume(const NetworkGraph& g, const PrecisionScheme& scheme, double batch) {
  if (!(batch > 0)) throw UsageError("batch must be positive");
  DataVolume v;
  v.input_bits = static_cast<double>(g.input_shape.size()) * scheme.input_bits;
  v.feature_bits = v.input_bits;
  v.conv_feature_bits = v.input_bits;
  for (const auto& s : g.stages) {
    const double wb = static_cast<double>(s.weight_count()) * storage_bits(scheme.weight_bits_for(s));
    const int out_bits = s.position == StagePosition::Last ? scheme.output_bits : scheme.act_bits;
    v.weight_bits += wb;
    v.feature_bits += static_cast<double>(s.out_shape().size()) * out_bits;
    if (s.is_fc()) {
      v.fc_weight_bits += wb;
    } else {
      v.conv_weight_bits += wb;
      v.conv_feature_bits += static_cast<double>(s.core_shape().size()) * out_bits;
    }
  }
  v.conv_feature_share = v.conv_feature_bits / (v.conv_feature_bits + v.conv_weight_bits);
  v.feature_share = v.feature_bits / (v.feature_bits + v.weight_bits);
  v.traffic_bytes_per_frame = (v.conv_weight_bits + v.fc_weight_bits / batch + v.input_bits) / 8.0;
  return v;
}

/// GB/s for a frame rate, including the calibrated overhead factor.
inline double bandwidth_gbs(const DataVolume& v, double images_per_s, const Calibration& c) {
  return v.traffic_bytes_per_frame * c.bandwidth_overhead * images_per_s / 1e9;
}

// ---------------------------------------------------------------------------
// Per-stage latency and resources

inline bool is_pow2(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }
inline std::int64_t pow2_ceil(std::int64_t v) {
  std::int64_t p = 1;
  while (p < v) p <<= 1;
  return p;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Largest useful p_in and p_out for a stage.
inline std::int64_t max_p_in(const FusedStage& s, const Calibration& c) {
  return std::min<std::int64_t>(pow2_ceil(s.kernel_elems()), c.max_parallel);
}
inline std::int64_t max_p_out(const FusedStage& s, const Calibration& c) {
  return std::min<std::int64_t>(pow2_ceil(s.core.out_channels / s.core.group), c.max_parallel);
}

struct StageLatency {
  std::int64_t cycles = 0;
  double seconds = 0;
};

/// cycles = pixels * groups * ceil(K / p_in) * ceil(M / p_out) + fill, with
/// K the taps per output and M the output channels per group.
inline StageLatency stage_latency(const FusedStage& s, int p_in, int p_out, double clock_mhz, const Calibration& c) {
  if (!is_pow2(p_in) || !is_pow2(p_out)) throw UsageError(s.core.name + ": parallelism must be a power of 2");
  if (p_in > pow2_ceil(s.kernel_elems()) || p_out > pow2_ceil(s.core.out_channels / s.core.group))
    throw UsageError(s.core.name + ": parallelism exceeds the kernel/channel extents");
  const std::int64_t m = s.core.out_channels / s.core.group;
  StageLatency l;
  l.cycles = s.out_pixels() * s.core.group * ceil_div(s.kernel_elems(), p_in) * ceil_div(m, p_out) + c.fill_cycles;
  l.seconds = static_cast<double>(l.cycles) / (clock_mhz * 1e6);
  return l;
}

struct Resources {
  double lut = 0;
  double ff = 0;
  double dsp = 0;
  double bram = 0;

  Resources& operator+=(const Resources& o) {
    lut += o.lut;
    ff += o.ff;
    dsp += o.dsp;
    bram += o.bram;
    return *this;
  }
  Resources scaled(double k) const { return {lut * k, ff * k, dsp * k, bram * k}; }
  bool operator==(const Resources&) const = default;
};

/// Cost split into a per-lane part (replicated by batch) and a part shared by
/// all lanes (weight buffers).
struct StageCost {
  Resources lane;
  Resources shared;
  double ce_lut = 0;
  double ce_dsp = 0;        // multipliers only; 0 for binary/ternary
  double reshape_bram = 0;  // per lane
  double weight_bram = 0;   // shared, both ping-pong halves
  int acc_bits = 0;

  Resources total(int batch) const {
    Resources r = lane.scaled(batch);
    r += shared;
    return r;
  }
};

inline double blocks(double bits, const Calibration& c) { return std::ceil(bits / c.bram_bits); }

/// DSP blocks for a bank of fixed-point multipliers. Operands of at most
/// 8 bits pack mults_per_dsp multipliers into one block.
inline double multiplier_dsp(std::int64_t multipliers, int act_bits, int weight_bits, const Calibration& c) {
  const int per = (act_bits <= 8 && weight_bits <= 8) ? c.mults_per_dsp : 1;
  return std::ceil(static_cast<double>(multipliers) / per);
}

inline StageCost resource_cost(const FusedStage& s, int p_in, int p_out, const PrecisionScheme& scheme,
                               const Calibration& c) {
  const int wbits = scheme.weight_bits_for(s);
  const int abits = scheme.input_act_bits(s);
  const bool fixed = wbits >= 3;
  StageCost k;
  k.acc_bits = required_acc_bits(s, scheme);
  const double data_bits = abits + (fixed ? wbits : 1);
  k.ce_lut = p_out * (c.lut_per_input_bit * p_in * data_bits + c.lut_per_acc_bit * k.acc_bits + c.lut_per_ce);
  if (fixed) k.ce_dsp = multiplier_dsp(std::int64_t{p_in} * p_out, abits, wbits, c);
  const Shape3 in = s.in_shape();
  double window_bits;
  if (s.is_fc()) {
    window_bits = 2.0 * static_cast<double>(in.size()) * abits;  // whole vector, double-buffered
  } else {
    window_bits = static_cast<double>(s.core.kernel_h) * (in.w + 2.0 * s.core.pad) * in.c * abits;
  }
  k.reshape_bram = std::max(blocks(window_bits, c), std::ceil(static_cast<double>(p_in) * abits / c.act_port_bits));
  // Each ping-pong half holds weight_prefetch_cycles of consumption, at least
  // one tile of p_out kernels and never more than the whole layer.
  const double per_cycle = static_cast<double>(p_in) * p_out * wbits;
  const double layer_bits = static_cast<double>(s.weight_count()) * wbits;
  const double tile_bits = static_cast<double>(p_out) * static_cast<double>(s.kernel_elems()) * wbits;
  const double half_bits = std::min(layer_bits, std::max(tile_bits, per_cycle * c.weight_prefetch_cycles));
  k.weight_bram = 2.0 * std::max(blocks(half_bits, c), std::ceil(per_cycle / c.weight_port_bits));

  k.lane.lut = k.ce_lut + c.lut_per_stage;
  k.lane.dsp = k.ce_dsp + c.dsp_per_stage;
  k.lane.bram = k.reshape_bram;
  k.lane.ff = k.lane.lut * c.ff_per_lut;
  k.shared.bram = k.weight_bram;
  return k;
}

// ---------------------------------------------------------------------------
// Pipeline balancing

struct StagePlan {
  std::string name;
  int p_in = 1;
  int p_out = 1;
  std::int64_t cycles = 0;
  StageCost cost;
};

struct PipelinePlan {
  std::vector<StagePlan> stages;
  int batch = 1;
  double overhead_fraction = 0.11;
  Resources used;  // design only, SDK reservation excluded
  int bottleneck = 0;
  std::int64_t bottleneck_cycles = 0;
  std::string binding;  // first resource violated by one more lane
  std::string search;   // "greedy" or "exhaustive"
};

struct Availability {
  double lut, ff, dsp, bram, bandwidth;
};

inline Availability available(const DeviceBudget& d, const Calibration& c) {
  return {d.lut * (1 - c.sdk_fraction), d.ff, d.dsp, d.bram36 * (1 - c.sdk_fraction), d.bandwidth_gbs};
}

namespace detail {

struct Option {
  int p_in, p_out;
  std::int64_t cycles;
  StageCost cost;
};

inline Resources sum_total(const std::vector<Option>& chosen, int batch) {
  Resources r;
  for (const auto& o : chosen) r += o.cost.total(batch);
  return r;
}

inline bool fits(const Resources& r, const Availability& a) {
  return r.lut <= a.lut && r.ff <= a.ff && r.dsp <= a.dsp && r.bram <= a.bram;
}

struct Candidate {
  bool ok = false;
  std::vector<Option> chosen;
  std::int64_t cycles = 0;
  double lut = 0;
};

}  // namespace detail

struct BalanceOptions {
  int exhaustive_max_stages = 6;
  std::optional<int> fixed_batch;
};

class PipelineBalancer {
 public:
  PipelineBalancer(const NetworkGraph& g, const PrecisionScheme& scheme, const DeviceBudget& dev,
                   const Calibration& cal)
      : g_(g), scheme_(scheme), dev_(dev), cal_(cal), avail_(available(dev, cal)) {
    dev.validate();
    if (g.stages.empty()) throw UsageError("network has no stages");
  }

  detail::Option option(std::size_t i, int p_in, int p_out) const {
    const auto& s = g_.stages[i];
    return {p_in, p_out, stage_latency(s, p_in, p_out, dev_.clock_mhz, cal_).cycles,
            resource_cost(s, p_in, p_out, scheme_, cal_)};
  }

  bool bandwidth_ok(int batch, std::int64_t cycles) const {
    const double speed = batch * dev_.clock_mhz * 1e6 / static_cast<double>(cycles);
    return bandwidth_gbs(data_volume(g_, scheme_, batch), speed, cal_) <= avail_.bandwidth;
  }

  /// Bottleneck-first greedy. The path does not depend on the budget: each
  /// step doubles p_in or p_out of the slowest stage (fewer cycles first,
  /// then fewer LUTs) and the search stops at the first step that no longer
  /// fits, so a larger budget only ever extends the path.
  detail::Candidate greedy(int batch) const {
    detail::Candidate c;
    for (std::size_t i = 0; i < g_.stages.size(); ++i) c.chosen.push_back(option(i, 1, 1));
    auto feasible = [&](const std::vector<detail::Option>& ch) {
      std::int64_t cyc = 0;
      for (const auto& o : ch) cyc = std::max(cyc, o.cycles);
      return detail::fits(detail::sum_total(ch, batch), avail_) && bandwidth_ok(batch, cyc);
    };
    if (!feasible(c.chosen)) return c;
    c.ok = true;
    for (;;) {
      std::size_t b = 0;
      for (std::size_t i = 1; i < c.chosen.size(); ++i)
        if (c.chosen[i].cycles > c.chosen[b].cycles) b = i;
      const auto& cur = c.chosen[b];
      std::optional<detail::Option> best;
      auto consider = [&](int pi, int po) {
        if (pi > max_p_in(g_.stages[b], cal_) || po > max_p_out(g_.stages[b], cal_) ||
            static_cast<std::int64_t>(pi) * po > cal_.max_parallel)
          return;
        auto o = option(b, pi, po);
        if (o.cycles >= cur.cycles) return;
        if (!best || o.cycles < best->cycles ||
            (o.cycles == best->cycles && o.cost.total(batch).lut < best->cost.total(batch).lut))
          best = o;
      };
      consider(cur.p_in * 2, cur.p_out);
      consider(cur.p_in, cur.p_out * 2);
      if (!best) break;
      auto next = c.chosen;
      next[b] = *best;
      if (!feasible(next)) break;
      c.chosen = std::move(next);
    }
    finish(c, batch);
    return c;
  }

  /// Exact search for short chains: binary search on the bottleneck cycle
  /// count, each probe a depth-first search over per-stage Pareto-minimal
  /// configurations.
  detail::Candidate exhaustive(int batch) const {
    const std::size_t n = g_.stages.size();
    std::vector<std::vector<detail::Option>> all(n);
    std::vector<std::int64_t> levels;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::int64_t pi = 1; pi <= max_p_in(g_.stages[i], cal_); pi *= 2)
        for (std::int64_t po = 1; po <= max_p_out(g_.stages[i], cal_) && pi * po <= cal_.max_parallel; po *= 2) {
          all[i].push_back(option(i, static_cast<int>(pi), static_cast<int>(po)));
          levels.push_back(all[i].back().cycles);
        }
    }
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

    auto probe = [&](std::int64_t limit) {
      detail::Candidate out;
      std::vector<std::vector<detail::Option>> sets(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (const auto& o : all[i])
          if (o.cycles <= limit) sets[i].push_back(o);
        if (sets[i].empty()) return out;
        sets[i] = pareto(sets[i], batch);
      }
      // Suffix lower bounds for pruning.
      std::vector<Resources> rest(n + 1);
      for (std::size_t i = n; i-- > 0;) {
        Resources lo{1e300, 1e300, 1e300, 1e300};
        for (const auto& o : sets[i]) {
          const auto t = o.cost.total(batch);
          lo.lut = std::min(lo.lut, t.lut);
          lo.ff = std::min(lo.ff, t.ff);
          lo.dsp = std::min(lo.dsp, t.dsp);
          lo.bram = std::min(lo.bram, t.bram);
        }
        rest[i] = rest[i + 1];
        rest[i] += lo;
      }
      std::vector<detail::Option> pick(n, sets[0][0]);
      double best_lut = std::numeric_limits<double>::infinity();
      std::function<void(std::size_t, Resources, std::int64_t)> dfs = [&](std::size_t i, Resources acc,
                                                                          std::int64_t slowest) {
        Resources bound = acc;
        bound += rest[i];
        if (!detail::fits(bound, avail_) || bound.lut >= best_lut) return;
        if (i == n) {
          // A plan can be too fast for the memory interface.
          if (!bandwidth_ok(batch, slowest)) return;
          best_lut = acc.lut;
          out.ok = true;
          out.chosen = pick;
          return;
        }
        for (const auto& o : sets[i]) {
          pick[i] = o;
          Resources next = acc;
          next += o.cost.total(batch);
          dfs(i + 1, next, std::max(slowest, o.cycles));
        }
      };
      dfs(0, Resources{}, 0);
      return out;
    };

    detail::Candidate best;
    std::size_t lo = 0, hi = levels.size();  // first feasible level is the answer
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      auto c = probe(levels[mid]);
      if (c.ok) {
        best = std::move(c);
        hi = mid;
      } else {
        lo = mid + 1;
      }
    }
    if (best.ok) finish(best, batch);
    return best;
  }

  detail::Candidate solve(int batch, const BalanceOptions& opt) const {
    auto c = greedy(batch);
    if (g_.stages.size() <= static_cast<std::size_t>(opt.exhaustive_max_stages)) {
      auto e = exhaustive(batch);
      if (e.ok && (!c.ok || e.cycles < c.cycles || (e.cycles == c.cycles && e.lut < c.lut))) return e;
    }
    return c;
  }

  PipelinePlan plan(const BalanceOptions& opt = {}) const {
    std::optional<PipelinePlan> best;
    double best_speed = -1;
    const int lo = opt.fixed_batch ? *opt.fixed_batch : 1;
    const int hi = opt.fixed_batch ? *opt.fixed_batch : cal_.max_batch;
    for (int b = lo; b <= hi; ++b) {
      const auto c = solve(b, opt);
      if (!c.ok) continue;
      const double speed = b * dev_.clock_mhz * 1e6 / static_cast<double>(c.cycles);
      const bool better = speed > best_speed * (1 + 1e-12) ||
                          (std::fabs(speed - best_speed) <= best_speed * 1e-12 && best && c.lut < best->used.lut);
      if (!best || better) {
        best = to_plan(c, b, opt);
        best_speed = speed;
      }
    }
    if (!best) throw InfeasibleError("no plan fits the device budget, not even one lane at minimal parallelism");
    best->binding = binding_constraint(*best);
    return *best;
  }

  /// The resource that one extra lane with the same per-lane plan exceeds
  /// the most, relative to its budget.
  std::string binding_constraint(const PipelinePlan& p) const {
    if (p.batch >= cal_.max_batch) return "batch_limit";
    Resources r;
    for (const auto& s : p.stages) r += s.cost.total(p.batch + 1);
    const double speed = (p.batch + 1) * dev_.clock_mhz * 1e6 / static_cast<double>(p.bottleneck_cycles);
    const double bw = bandwidth_gbs(data_volume(g_, scheme_, p.batch + 1), speed, cal_);
    const std::pair<const char*, double> ratios[] = {{"lut", r.lut / avail_.lut},
                                                     {"ff", r.ff / avail_.ff},
                                                     {"bram", r.bram / avail_.bram},
                                                     {"dsp", r.dsp / avail_.dsp},
                                                     {"bandwidth", bw / avail_.bandwidth}};
    const char* name = "none";
    double worst = 1.0;
    for (const auto& [n, v] : ratios)
      if (v > worst) {
        worst = v;
        name = n;
      }
    return name;
  }

 private:
  // An option is dropped only if another is no more expensive in every
  // resource and no faster (slower options help under a bandwidth cap).
  std::vector<detail::Option> pareto(const std::vector<detail::Option>& in, int batch) const {
    std::vector<detail::Option> out;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto a = in[i].cost.total(batch);
      bool dominated = false;
      for (std::size_t j = 0; j < in.size() && !dominated; ++j) {
        if (i == j) continue;
        const auto b = in[j].cost.total(batch);
        const bool le =
            b.lut <= a.lut && b.ff <= a.ff && b.dsp <= a.dsp && b.bram <= a.bram && in[j].cycles >= in[i].cycles;
        const bool lt =
            b.lut < a.lut || b.ff < a.ff || b.dsp < a.dsp || b.bram < a.bram || in[j].cycles > in[i].cycles;
        // Equal vectors: keep the earlier one only.
        dominated = le && (lt || j < i);
      }
      if (!dominated) out.push_back(in[i]);
    }
    return out;
  }

  void finish(detail::Candidate& c, int batch) const {
    c.cycles = 0;
    for (const auto& o : c.chosen) c.cycles = std::max(c.cycles, o.cycles);
    c.lut = detail::sum_total(c.chosen, batch).lut;
  }

  PipelinePlan to_plan(const detail::Candidate& c, int batch, const BalanceOptions& opt) const {
    PipelinePlan p;
    p.batch = batch;
    p.overhead_fraction = cal_.sdk_fraction;
    p.search = g_.stages.size() <= static_cast<std::size_t>(opt.exhaustive_max_stages) ? "exhaustive" : "greedy";
    for (std::size_t i = 0; i < c.chosen.size(); ++i) {
      const auto& o = c.chosen[i];
      p.stages.push_back({g_.stages[i].core.name, o.p_in, o.p_out, o.cycles, o.cost});
      p.used += o.cost.total(batch);
      if (o.cycles > p.bottleneck_cycles) {
        p.bottleneck_cycles = o.cycles;
        p.bottleneck = static_cast<int>(i);
      }
    }
    return p;
  }

  const NetworkGraph& g_;
  PrecisionScheme scheme_;
  DeviceBudget dev_;
  Calibration cal_;
  Availability avail_;
};

inline PipelinePlan balance_pipeline(const NetworkGraph& g, const PrecisionScheme& scheme, const DeviceBudget& dev,
                                     const Calibration& cal, const BalanceOptions& opt = {}) {
  return PipelineBalancer(g, scheme, dev, cal).plan(opt);
}

/// Rebuilds a plan from explicit per-stage parallelism (for replaying a
/// configuration).
inline PipelinePlan make_plan(const NetworkGraph& g, const PrecisionScheme& scheme, const DeviceBudget& dev,
                              const Calibration& cal, const std::vector<std::pair<int, int>>& par, int batch) {
  if (par.size() != g.stages.size()) throw UsageError("plan has a different stage count than the model");
  if (batch < 1) throw UsageError("batch must be >= 1");
  PipelinePlan p;
  p.batch = batch;
  p.overhead_fraction = cal.sdk_fraction;
  p.search = "replay";
  for (std::size_t i = 0; i < par.size(); ++i) {
    const auto& s = g.stages[i];
    StagePlan sp{s.core.name, par[i].first, par[i].second,
                 stage_latency(s, par[i].first, par[i].second, dev.clock_mhz, cal).cycles,
                 resource_cost(s, par[i].first, par[i].second, scheme, cal)};
    p.used += sp.cost.total(batch);
    if (sp.cycles > p.bottleneck_cycles) {
      p.bottleneck_cycles = sp.cycles;
      p.bottleneck = static_cast<int>(i);
    }
    p.stages.push_back(std::move(sp));
  }
  p.binding = PipelineBalancer(g, scheme, dev, cal).binding_constraint(p);
  return p;
}

// ---------------------------------------------------------------------------
// Estimates

struct EstimateReport {
  std::string model;
  std::string scheme;
  double gop = 0;
  double speed = 0;      // images/s
  double perf = 0;       // TOPS, = speed * gop / 1000
  double bandwidth = 0;  // GB/s
  int batch = 1;
  // Utilization including the SDK reservation, comparable to board reports.
  double lut = 0, ff = 0, bram = 0, dsp = 0;
  double lut_pct = 0, ff_pct = 0, bram_pct = 0, dsp_pct = 0;
  int bottleneck_stage = 0;
  std::string bottleneck_name;
  std::string binding;
};

/// perf is computed from the same two doubles the report carries, so the
/// identity perf == speed * gop / 1000 holds bit for bit.
inline double perf_tops(double speed, double gop) { return speed * gop / 1000.0; }

inline EstimateReport report_from_speed(const NetworkGraph& g, const PrecisionScheme& scheme, double speed) {
  EstimateReport r;
  r.model = g.name;
  try {
    r.scheme = format_precision_tag(scheme);
  } catch (const ParseError&) {
    r.scheme = scheme.name;  // widths above 9 have no tag form
  }
  r.gop = network_gop(g).total;
  r.speed = speed;
  r.perf = perf_tops(r.speed, r.gop);
  return r;
}

inline EstimateReport estimate(const PipelinePlan& p, const NetworkGraph& g, const PrecisionScheme& scheme,
                               const DeviceBudget& dev, const Calibration& cal) {
  if (p.stages.size() != g.stages.size()) throw UsageError("plan does not match the model");
  EstimateReport r = report_from_speed(g, scheme, p.batch * dev.clock_mhz * 1e6 / static_cast<double>(p.bottleneck_cycles));
  r.batch = p.batch;
  r.bandwidth = bandwidth_gbs(data_volume(g, scheme, p.batch), r.speed, cal);
  r.lut = p.used.lut + cal.sdk_fraction * dev.lut;
  r.ff = p.used.ff;
  r.bram = p.used.bram + cal.sdk_fraction * dev.bram36;
  r.dsp = p.used.dsp;
  r.lut_pct = 100 * r.lut / dev.lut;
  r.ff_pct = 100 * r.ff / dev.ff;
  r.bram_pct = 100 * r.bram / dev.bram36;
  r.dsp_pct = 100 * r.dsp / dev.dsp;
  r.bottleneck_stage = p.bottleneck;
  r.bottleneck_name = p.stages[static_cast<std::size_t>(p.bottleneck)].name;
  r.binding = p.binding;
  return r;
}

}  // namespace elb
