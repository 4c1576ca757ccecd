#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "elb/dse.hpp"
#include "elb/elbq.hpp"
#include "elb/emu.hpp"
#include "elb/error.hpp"
#include "elb/fuse.hpp"
#include "elb/parser.hpp"
#include "elb/precision.hpp"

namespace elb {

inline constexpr int kConfigVersion = 1;

/// Hardware instance of one fused stage.
struct StageConfig {
  int id = 0;
  std::string name;
  std::string position;
  std::vector<std::string> ops;  // fused layer kinds in order, e.g. conv, bn, relu, maxpool

  std::string codec;  // binary | ternary | fixed
  int weight_bits = 0;
  double weight_scale = 0;      // E, or the fixed-point step
  double weight_threshold = 0;  // ternary only
  FixedPointFormat weight_format{0, 0, true};  // code width; a real format only for fixed
  std::int64_t weight_count = 0;

  FixedPointFormat in_format;
  FixedPointFormat out_format;
  int acc_bits = 0;

  int p_in = 1;
  int p_out = 1;
  std::int64_t cycles = 0;

  double reshape_bits = 0;  // line buffer contents, per lane
  double reshape_bram = 0;
  double weight_half_bits = 0;  // one ping-pong half
  double weight_bram = 0;       // both halves
  bool weights_resident = false;  // whole layer held on chip, no DRAM stream after load

  int in_stream_bits = 0;      // per lane and cycle
  int out_stream_bits = 0;     // per lane and cycle
  int weight_stream_bits = 0;  // shared by all lanes

  bool uses_dsp = false;  // fixed-point multipliers in the CE array
  double lut = 0;         // per lane
  double dsp = 0;         // per lane, control included

  bool operator==(const StageConfig&) const = default;
};

struct AcceleratorConfig {
  int version = kConfigVersion;
  std::string model_name;
  std::string model_text;
  std::string precision;  // tag
  std::map<std::string, int> weight_overrides;
  int input_bits = 8;
  int output_bits = 16;
  RoundingMode rounding = RoundingMode::HalfAway;
  FixedPointFormat input_format{8, 8, false};
  int batch = 1;
  std::string search;
  DeviceBudget device;
  Calibration calibration;
  EstimateReport estimate;
  std::vector<StageConfig> stages;
};

namespace detail {

using nlohmann::json;

inline json format_json(const FixedPointFormat& f) {
  return json{{"bits", f.total_bits}, {"frac", f.frac_bits}, {"signed", f.is_signed}};
}

inline FixedPointFormat format_from_json(const json& j, bool check = true) {
  FixedPointFormat f{j.at("bits").get<int>(), j.at("frac").get<int>(), j.at("signed").get<bool>()};
  if (check) f.validate();
  return f;
}

// Device and calibration go through their key: value text forms so the JSON
// carries exactly the fields the text parsers accept.
inline json kv_text_to_json(const std::string& text) {
  json j = json::object();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    const std::string value = line.substr(colon + 2);
    if (key == "name" || key == "version")
      j[key] = value;
    else
      j[key] = std::stod(value);
  }
  return j;
}

inline std::string json_to_kv_text(const json& j) {
  std::string s;
  for (const auto& [key, value] : j.items()) {
    s += key + ": ";
    s += value.is_string() ? value.get<std::string>() : fmt_number(value.get<double>());
    s += "\n";
  }
  return s;
}

inline json estimate_json(const EstimateReport& r) {
  return json{{"model", r.model},
              {"scheme", r.scheme},
              {"gop", r.gop},
              {"speed", r.speed},
              {"perf", r.perf},
              {"bandwidth_gbs", r.bandwidth},
              {"batch", r.batch},
              {"lut", r.lut},
              {"ff", r.ff},
              {"bram", r.bram},
              {"dsp", r.dsp},
              {"lut_pct", r.lut_pct},
              {"ff_pct", r.ff_pct},
              {"bram_pct", r.bram_pct},
              {"dsp_pct", r.dsp_pct},
              {"bottleneck_stage", r.bottleneck_stage},
              {"bottleneck_name", r.bottleneck_name},
              {"binding", r.binding}};
}

inline EstimateReport estimate_from_json(const json& j) {
  EstimateReport r;
  r.model = j.at("model").get<std::string>();
  r.scheme = j.at("scheme").get<std::string>();
  r.gop = j.at("gop").get<double>();
  r.speed = j.at("speed").get<double>();
  r.perf = j.at("perf").get<double>();
  r.bandwidth = j.at("bandwidth_gbs").get<double>();
  r.batch = j.at("batch").get<int>();
  r.lut = j.at("lut").get<double>();
  r.ff = j.at("ff").get<double>();
  r.bram = j.at("bram").get<double>();
  r.dsp = j.at("dsp").get<double>();
  r.lut_pct = j.at("lut_pct").get<double>();
  r.ff_pct = j.at("ff_pct").get<double>();
  r.bram_pct = j.at("bram_pct").get<double>();
  r.dsp_pct = j.at("dsp_pct").get<double>();
  r.bottleneck_stage = j.at("bottleneck_stage").get<int>();
  r.bottleneck_name = j.at("bottleneck_name").get<std::string>();
  r.binding = j.at("binding").get<std::string>();
  return r;
}

inline std::vector<std::string> stage_ops(const FusedStage& s) {
  std::vector<std::string> ops{s.is_fc() ? "fc" : "conv"};
  if (s.bn) ops.emplace_back("bn");
  if (s.relu) ops.emplace_back("relu");
  if (s.pool) ops.emplace_back("maxpool");
  return ops;
}

}  // namespace detail

inline nlohmann::json config_to_json(const AcceleratorConfig& c) {
  using detail::json;
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back(json{
        {"id", s.id},
        {"name", s.name},
        {"position", s.position},
        {"ops", s.ops},
        {"weights",
         {{"codec", s.codec},
          {"bits", s.weight_bits},
          {"scale", s.weight_scale},
          {"threshold", s.weight_threshold},
          {"format", detail::format_json(s.weight_format)},
          {"count", s.weight_count}}},
        {"in_format", detail::format_json(s.in_format)},
        {"out_format", detail::format_json(s.out_format)},
        {"acc_bits", s.acc_bits},
        {"p_in", s.p_in},
        {"p_out", s.p_out},
        {"cycles", s.cycles},
        {"buffers",
         {{"reshape_bits", s.reshape_bits},
          {"reshape_bram", s.reshape_bram},
          {"weight_half_bits", s.weight_half_bits},
          {"weight_bram", s.weight_bram},
          {"weight_source", s.weights_resident ? "on_chip" : "dram_stream"}}},
        {"streams",
         {{"in_bits", s.in_stream_bits}, {"out_bits", s.out_stream_bits}, {"weight_bits", s.weight_stream_bits}}},
        {"uses_dsp", s.uses_dsp},
        {"lut", s.lut},
        {"dsp", s.dsp},
    });
  }
  return json{{"version", c.version},
              {"model", {{"name", c.model_name}, {"text", c.model_text}}},
              {"precision",
               {{"tag", c.precision},
                {"weight_overrides", c.weight_overrides},
                {"input_bits", c.input_bits},
                {"output_bits", c.output_bits}}},
              {"rounding", std::string(to_string(c.rounding))},
              {"input_format", detail::format_json(c.input_format)},
              {"batch", c.batch},
              {"search", c.search},
              {"device", detail::kv_text_to_json(format_device(c.device))},
              {"calibration", detail::kv_text_to_json(format_calibration(c.calibration))},
              {"estimate", detail::estimate_json(c.estimate)},
              {"stages", stages}};
}

/// Canonical text: sorted keys, two-space indent, shortest round-trip doubles.
inline std::string emit_config(const AcceleratorConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline AcceleratorConfig parse_config(const std::string& text) {
  AcceleratorConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.version = j.at("version").get<int>();
    if (c.version != kConfigVersion) throw ParseError("unsupported config version " + std::to_string(c.version));
    c.model_name = j.at("model").at("name").get<std::string>();
    c.model_text = j.at("model").at("text").get<std::string>();
    const auto& p = j.at("precision");
    c.precision = p.at("tag").get<std::string>();
    c.weight_overrides = p.at("weight_overrides").get<std::map<std::string, int>>();
    c.input_bits = p.at("input_bits").get<int>();
    c.output_bits = p.at("output_bits").get<int>();
    c.rounding = rounding_mode_from_string(j.at("rounding").get<std::string>());
    c.input_format = detail::format_from_json(j.at("input_format"));
    c.batch = j.at("batch").get<int>();
    c.search = j.at("search").get<std::string>();
    c.device = parse_device(detail::json_to_kv_text(j.at("device")));
    c.calibration = parse_calibration(detail::json_to_kv_text(j.at("calibration")));
    c.estimate = detail::estimate_from_json(j.at("estimate"));
    for (const auto& js : j.at("stages")) {
      StageConfig s;
      s.id = js.at("id").get<int>();
      s.name = js.at("name").get<std::string>();
      s.position = js.at("position").get<std::string>();
      s.ops = js.at("ops").get<std::vector<std::string>>();
      const auto& w = js.at("weights");
      s.codec = w.at("codec").get<std::string>();
      s.weight_bits = w.at("bits").get<int>();
      s.weight_scale = w.at("scale").get<double>();
      s.weight_threshold = w.at("threshold").get<double>();
      s.weight_format = detail::format_from_json(w.at("format"), s.codec == "fixed");
      s.weight_count = w.at("count").get<std::int64_t>();
      s.in_format = detail::format_from_json(js.at("in_format"));
      s.out_format = detail::format_from_json(js.at("out_format"));
      s.acc_bits = js.at("acc_bits").get<int>();
      s.p_in = js.at("p_in").get<int>();
      s.p_out = js.at("p_out").get<int>();
      s.cycles = js.at("cycles").get<std::int64_t>();
      const auto& b = js.at("buffers");
      s.reshape_bits = b.at("reshape_bits").get<double>();
      s.reshape_bram = b.at("reshape_bram").get<double>();
      s.weight_half_bits = b.at("weight_half_bits").get<double>();
      s.weight_bram = b.at("weight_bram").get<double>();
      const auto src = b.at("weight_source").get<std::string>();
      if (src != "on_chip" && src != "dram_stream") throw ParseError("unknown weight_source '" + src + "'");
      s.weights_resident = src == "on_chip";
      const auto& st = js.at("streams");
      s.in_stream_bits = st.at("in_bits").get<int>();
      s.out_stream_bits = st.at("out_bits").get<int>();
      s.weight_stream_bits = st.at("weight_bits").get<int>();
      s.uses_dsp = js.at("uses_dsp").get<bool>();
      s.lut = js.at("lut").get<double>();
      s.dsp = js.at("dsp").get<double>();
      c.stages.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ParseError("config: malformed number");
  }
  return c;
}

inline AcceleratorConfig load_config(const std::string& path) { return parse_config(read_file_text(path)); }

/// Buffer geometry as the cost model sizes it (see resource_cost).
struct BufferGeometry {
  double reshape_bits = 0;
  double weight_half_bits = 0;
  bool resident = false;
};

inline BufferGeometry buffer_geometry(const FusedStage& s, int p_in, int p_out, const PrecisionScheme& scheme,
                                      const Calibration& c) {
  const int wbits = scheme.weight_bits_for(s);
  const int abits = scheme.input_act_bits(s);
  const Shape3 in = s.in_shape();
  BufferGeometry g;
  g.reshape_bits = s.is_fc() ? 2.0 * static_cast<double>(in.size()) * abits
                             : static_cast<double>(s.core.kernel_h) * (in.w + 2.0 * s.core.pad) * in.c * abits;
  const double per_cycle = static_cast<double>(p_in) * p_out * wbits;
  const double layer_bits = static_cast<double>(s.weight_count()) * wbits;
  const double tile_bits = static_cast<double>(p_out) * static_cast<double>(s.kernel_elems()) * wbits;
  const double want = std::max(tile_bits, per_cycle * c.weight_prefetch_cycles);
  g.weight_half_bits = std::min(layer_bits, want);
  g.resident = layer_bits <= want;
  return g;
}

/// Assembles the configuration for a plan and a quantized model. Throws
/// UsageError when the three disagree on stages, scheme or codecs.
inline AcceleratorConfig build_config(const PipelinePlan& plan, const NetworkGraph& g, const QuantizedModel& m,
                                      const DeviceBudget& dev, const Calibration& cal) {
  const auto& scheme = m.scheme;
  if (plan.stages.size() != g.stages.size()) throw UsageError("plan/model mismatch: stage count differs");
  if (m.stages.size() != g.stages.size()) throw UsageError("quantized model/graph mismatch: stage count differs");

  AcceleratorConfig c;
  c.model_name = g.name;
  c.model_text = format_model(unfuse(g), g.name);
  c.precision = format_precision_tag(scheme);
  c.weight_overrides = scheme.overrides;
  c.input_bits = scheme.input_bits;
  c.output_bits = scheme.output_bits;
  c.rounding = m.rounding;
  c.input_format = m.input_format;
  c.batch = plan.batch;
  c.search = plan.search;
  c.device = dev;
  c.calibration = cal;
  c.estimate = estimate(plan, g, scheme, dev, cal);

  for (std::size_t i = 0; i < g.stages.size(); ++i) {
    const auto& s = g.stages[i];
    const auto& sp = plan.stages[i];
    const auto& q = m.stages[i];
    if (sp.name != s.core.name) throw UsageError("plan/model mismatch: stage " + std::to_string(i) + " is '" +
                                                 sp.name + "', model has '" + s.core.name + "'");
    const int wbits = scheme.weight_bits_for(s);
    const int cbits = codec_bits(q.weights.codec);
    if (cbits != wbits || (wbits >= 3) != std::holds_alternative<FixedCodec>(q.weights.codec))
      throw UsageError("quantized model/scheme mismatch at '" + s.core.name + "': codec " +
                       codec_name(q.weights.codec) + " vs " + std::to_string(wbits) + "-bit weights");
    if (q.acc_bits != required_acc_bits(s, scheme))
      throw UsageError("quantized model/scheme mismatch at '" + s.core.name + "': accumulator width");

    StageConfig sc;
    sc.id = static_cast<int>(i);
    sc.name = s.core.name;
    sc.position = std::string(to_string(s.position));
    sc.ops = detail::stage_ops(s);
    sc.codec = codec_name(q.weights.codec);
    sc.weight_bits = cbits;
    if (auto* b = std::get_if<BinaryCodec>(&q.weights.codec)) {
      sc.weight_scale = b->scale;
      sc.weight_format = {1, 0, true};
    } else if (auto* t = std::get_if<TernaryCodec>(&q.weights.codec)) {
      sc.weight_scale = t->scale;
      sc.weight_threshold = t->threshold;
      sc.weight_format = {2, 0, true};
    } else {
      sc.weight_format = std::get<FixedCodec>(q.weights.codec).format;
      sc.weight_scale = sc.weight_format.step();
    }
    sc.weight_count = s.weight_count();
    sc.in_format = q.in_format;
    sc.out_format = q.out_format;
    sc.acc_bits = q.acc_bits;
    sc.p_in = sp.p_in;
    sc.p_out = sp.p_out;
    sc.cycles = sp.cycles;
    const auto geo = buffer_geometry(s, sp.p_in, sp.p_out, scheme, cal);
    sc.reshape_bits = geo.reshape_bits;
    sc.reshape_bram = sp.cost.reshape_bram;
    sc.weight_half_bits = geo.weight_half_bits;
    sc.weight_bram = sp.cost.weight_bram;
    sc.weights_resident = geo.resident;
    sc.in_stream_bits = sp.p_in * q.in_format.total_bits;
    sc.out_stream_bits = sp.p_out * q.out_format.total_bits;
    sc.weight_stream_bits = sp.p_in * sp.p_out * cbits;
    sc.uses_dsp = sp.cost.ce_dsp > 0;
    sc.lut = sp.cost.lane.lut;
    sc.dsp = sp.cost.lane.dsp;
    c.stages.push_back(std::move(sc));
  }
  return c;
}

inline PrecisionScheme config_scheme(const AcceleratorConfig& c) {
  PrecisionScheme s = parse_precision_tag(c.precision);
  s.overrides = c.weight_overrides;
  s.input_bits = c.input_bits;
  s.output_bits = c.output_bits;
  s.validate();
  return s;
}

inline NetworkGraph config_graph(const AcceleratorConfig& c) { return fuse(parse_model(c.model_text), c.model_name); }

/// Everything needed to rerun the emulator and the estimator from a config
/// and its `.elbq` codes.
struct Replay {
  NetworkGraph graph;
  QuantizedModel model;
  PipelinePlan plan;
  EstimateReport estimate;
};

inline Replay replay(const AcceleratorConfig& c, const std::vector<std::uint8_t>& elbq) {
  Replay r;
  r.graph = config_graph(c);
  r.model = decode_elbq(elbq, r.graph);
  const PrecisionScheme scheme = config_scheme(c);
  if (!(r.model.scheme == scheme)) throw UsageError("config precision does not match the quantized model");
  if (r.model.rounding != c.rounding || r.model.input_format != c.input_format)
    throw UsageError("config rounding or input format does not match the quantized model");
  if (c.stages.size() != r.graph.stages.size()) throw UsageError("config stage count does not match its model");
  std::vector<std::pair<int, int>> par;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& sc = c.stages[i];
    const auto& q = r.model.stages[i];
    if (sc.name != r.graph.stages[i].core.name || sc.acc_bits != q.acc_bits || sc.in_format != q.in_format ||
        sc.out_format != q.out_format || sc.codec != codec_name(q.weights.codec))
      throw UsageError("config stage '" + sc.name + "' does not match the quantized model");
    par.emplace_back(sc.p_in, sc.p_out);
  }
  r.plan = make_plan(r.graph, scheme, c.device, c.calibration, par, c.batch);
  r.plan.search = c.search;
  r.estimate = estimate(r.plan, r.graph, scheme, c.device, c.calibration);
  return r;
}

}  // namespace elb
