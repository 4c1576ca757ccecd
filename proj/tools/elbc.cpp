// elbc: parse, quantize, run and size hybrid low-bit networks.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "elb/config.hpp"
#include "elb/dse.hpp"
#include "elb/elbq.hpp"
#include "elb/emu.hpp"
#include "elb/reference.hpp"
#include "elb/weights.hpp"
#include "elb/zoo.hpp"

using namespace elb;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitParse = 3;
constexpr int kExitInfeasible = 4;
constexpr int kExitIo = 5;

int exit_code_for(const Error& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const InfeasibleError*>(&e)) return kExitInfeasible;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  return kExitParse;  // parse, shape and quantization errors all reject the input
}

struct Options {
  bool json = false;
  std::string out;
  std::string model;
  std::string weights;
  std::string elbq;
  std::string scheme;
  std::string device = "zc706";
  std::string calib = std::string(ELB_DATA_DIR) + "/calibration.cfg";
  std::string config;
  std::string image;
  std::string rounding = "half_away";
  std::string table = std::string(ELB_DATA_DIR) + "/board_results.json";
  std::vector<std::string> rows;
  std::string shape;
  std::uint64_t seed = 1;
  std::optional<double> fill;
  std::optional<double> speed;
  int calib_images = 1;
  int batch = 0;
};

// --- input resolution -------------------------------------------------------

NetworkGraph load_model(const std::string& spec) {
  if (spec.empty()) throw UsageError("--model is required");
  if (spec.rfind("zoo:", 0) == 0) return zoo_model(spec.substr(4));
  if (std::filesystem::exists(spec)) {
    std::string name;
    const auto chain = parse_model(read_file_text(spec), &name);
    if (name.empty()) name = std::filesystem::path(spec).stem().string();
    return fuse(chain, name);
  }
  try {
    return zoo_model(spec);
  } catch (const UsageError&) {
    throw IoError("model '" + spec + "' is neither a file nor a zoo model");
  }
}

PrecisionScheme load_scheme(const std::string& tag) {
  if (tag.empty()) throw UsageError("--scheme is required");
  auto s = parse_precision_tag(tag);
  s.validate();
  return s;
}

DeviceBudget load_device(const std::string& spec) {
  if (std::filesystem::exists(spec)) return parse_device(read_file_text(spec));
  return device_preset(spec);
}

Calibration load_calibration(const std::string& path) { return parse_calibration(read_file_text(path)); }

std::string require(const std::string& v, const char* flag) {
  if (v.empty()) throw UsageError(std::string(flag) + " is required");
  return v;
}

// --- output helpers ----------------------------------------------------------

void emit_text(const Options& o, const std::string& text) {
  if (o.out.empty())
    std::cout << text;
  else
    write_file_text(o.out, text);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

std::string shape_text(const Shape3& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

json estimate_to_json(const EstimateReport& r) { return detail::estimate_json(r); }

json plan_to_json(const PipelinePlan& p) {
  json stages = json::array();
  for (const auto& s : p.stages)
    stages.push_back({{"name", s.name},
                      {"p_in", s.p_in},
                      {"p_out", s.p_out},
                      {"cycles", s.cycles},
                      {"lut", s.cost.lane.lut},
                      {"dsp", s.cost.lane.dsp},
                      {"reshape_bram", s.cost.reshape_bram},
                      {"weight_bram", s.cost.weight_bram}});
  return {{"batch", p.batch},
          {"search", p.search},
          {"bottleneck", p.bottleneck},
          {"bottleneck_cycles", p.bottleneck_cycles},
          {"binding", p.binding},
          {"stages", stages}};
}

std::string estimate_table(const EstimateReport& e) {
  std::ostringstream s;
  s << "model       " << e.model << "\n";
  s << "scheme      " << e.scheme << "\n";
  s << "batch       " << e.batch << "\n";
  s << "speed       " << fmt("%.1f", e.speed) << " img/s\n";
  s << "gop         " << fmt("%.4f", e.gop) << "\n";
  s << "perf        " << fmt("%.3f", e.perf) << " TOPS\n";
  s << "bandwidth   " << fmt("%.2f", e.bandwidth) << " GB/s\n";
  s << "lut         " << fmt("%.0f", e.lut) << " (" << fmt("%.1f", e.lut_pct) << "%)\n";
  s << "ff          " << fmt("%.0f", e.ff) << " (" << fmt("%.1f", e.ff_pct) << "%)\n";
  s << "bram36      " << fmt("%.0f", e.bram) << " (" << fmt("%.1f", e.bram_pct) << "%)\n";
  s << "dsp         " << fmt("%.0f", e.dsp) << " (" << fmt("%.1f", e.dsp_pct) << "%)\n";
  s << "bottleneck  " << e.bottleneck_name << "\n";
  s << "binding     " << e.binding << "\n";
  return s.str();
}

std::string plan_table(const PipelinePlan& p) {
  std::ostringstream s;
  s << "stage          p_in  p_out        cycles       lut    dsp  bram(r)  bram(w)\n";
  for (const auto& st : p.stages) {
    std::string name = st.name;
    name.resize(12, ' ');
    s << name << pad(std::to_string(st.p_in), 7) << pad(std::to_string(st.p_out), 7)
      << pad(std::to_string(st.cycles), 14) << pad(fmt("%.0f", st.cost.lane.lut), 10)
      << pad(fmt("%.1f", st.cost.lane.dsp), 7) << pad(fmt("%.0f", st.cost.reshape_bram), 9)
      << pad(fmt("%.0f", st.cost.weight_bram), 9) << "\n";
  }
  return s.str();
}

// --- subcommands -------------------------------------------------------------

int cmd_parse(const Options& o) {
  const auto g = load_model(o.model);
  json stages = json::array();
  std::ostringstream t;
  t << g.name << ": input " << shape_text(g.input_shape) << ", " << g.stages.size() << " stages\n";
  for (const auto& s : g.stages) {
    std::vector<std::string> ops = detail::stage_ops(s);
    std::string joined;
    for (const auto& op : ops) joined += (joined.empty() ? "" : "+") + op;
    stages.push_back({{"name", s.core.name},
                      {"ops", ops},
                      {"position", std::string(to_string(s.position))},
                      {"group", s.groups()},
                      {"in", shape_text(s.in_shape())},
                      {"out", shape_text(s.out_shape())},
                      {"weights", s.weight_count()}});
    std::string name = s.core.name;
    name.resize(12, ' ');
    t << "  " << name << " " << joined << "  " << shape_text(s.in_shape()) << " -> " << shape_text(s.out_shape())
      << "  [" << to_string(s.position) << "]\n";
  }
  const json j{{"model", g.name},
               {"input", shape_text(g.input_shape)},
               {"classes", g.output_classes},
               {"stages", stages}};
  emit_text(o, o.json ? j.dump(2) + "\n" : t.str());
  return 0;
}

int cmd_synth_weights(const Options& o) {
  const auto g = load_model(o.model);
  WeightFile wf;
  if (o.fill) {
    for (const auto& s : g.stages) {
      FloatTensor t{s.core.name, TensorKind::Weight, {}, {}};
      for (int d : weight_dims(s)) t.dims.push_back(static_cast<std::uint32_t>(d));
      t.data.assign(static_cast<std::size_t>(s.weight_count()), static_cast<float>(*o.fill));
      wf.tensors.push_back(std::move(t));
      if (s.bn) throw UsageError("--fill only supports models without batch norm");
    }
  } else {
    wf = synthesize_weights(g, o.seed);
  }
  write_file_bytes(require(o.out, "--out"), encode_elbw(wf));
  return 0;
}

int cmd_synth_image(const Options& o) {
  Shape3 dims{};
  if (!o.shape.empty()) {
    char sep1 = 0, sep2 = 0;
    std::istringstream in(o.shape);
    if (!(in >> dims.c >> sep1 >> dims.h >> sep2 >> dims.w) || sep1 != 'x' || sep2 != 'x')
      throw UsageError("--shape expects CxHxW");
  } else {
    dims = load_model(o.model).input_shape;
  }
  write_file_bytes(require(o.out, "--out"), encode_image(synthetic_image(dims, o.seed)));
  return 0;
}

int cmd_quantize(const Options& o) {
  const auto g = load_model(o.model);
  const auto scheme = load_scheme(o.scheme);
  const auto wf = load_elbw(require(o.weights, "--weights"));
  QuantizeOptions qo;
  qo.rounding = rounding_mode_from_string(o.rounding);
  qo.calib_images = o.calib_images;
  const auto m = quantize_model(g, wf, scheme, qo);
  write_file_bytes(require(o.out, "--out"), encode_elbq(m, g));
  return 0;
}

int cmd_infer(const Options& o) {
  const std::string out = require(o.out, "--out");
  const auto bytes = read_file_bytes(require(o.elbq, "--elbq"));
  NetworkGraph g;
  QuantizedModel m;
  if (o.config.empty()) {
    g = load_model(o.model);
    m = decode_elbq(bytes, g);
  } else {
    auto r = replay(load_config(o.config), bytes);
    g = std::move(r.graph);
    m = std::move(r.model);
  }
  const auto img = decode_image(read_file_bytes(require(o.image, "--image")));
  const auto r = run_network(g, m, img);
  write_file_bytes(out, encode_logits(r.output));

  json stats = json::array();
  for (const auto& s : r.stats)
    stats.push_back({{"name", s.name},
                     {"min_code", s.min_code},
                     {"max_code", s.max_code},
                     {"mean_code", s.mean_code},
                     {"saturated", s.saturated},
                     {"max_abs_acc", s.max_abs_acc}});
  const json side{{"argmax", argmax(std::span<const std::int32_t>(r.output.codes))},
                  {"outputs", r.output.codes.size()},
                  {"output_format", detail::format_json(r.output.format)},
                  {"stages", stats}};
  write_file_text(out + ".json", side.dump(2) + "\n");
  if (o.json) std::cout << side.dump(2) << "\n";
  return 0;
}

int cmd_analyze(const Options& o) {
  const auto g = load_model(o.model);
  const auto scheme = load_scheme(o.scheme);
  const int batch = o.batch > 0 ? o.batch : 1;
  const auto gop = network_gop(g);
  const auto v = data_volume(g, scheme, batch);
  json stages = json::array();
  std::ostringstream t;
  t << "stage            GOP    share\n";
  for (const auto& s : gop.stages) {
    stages.push_back({{"name", s.name}, {"macs", s.macs}, {"gop", s.gop}, {"share", s.gop / gop.total}});
    std::string name = s.name;
    name.resize(12, ' ');
    t << name << pad(fmt("%.4f", s.gop), 9) << pad(fmt("%.2f%%", 100 * s.gop / gop.total), 9) << "\n";
  }
  t << "total       " << pad(fmt("%.4f", gop.total), 9) << "\n\n";
  t << "weights        " << fmt("%.3f", v.weight_bits / 8e6) << " MB\n";
  t << "feature maps   " << fmt("%.3f", v.feature_bits / 8e6) << " MB\n";
  t << "conv feature share " << fmt("%.2f%%", 100 * v.conv_feature_share) << "\n";
  t << "feature share      " << fmt("%.2f%%", 100 * v.feature_share) << "\n";
  t << "DRAM traffic / image at batch " << batch << ": " << fmt("%.3f", v.traffic_bytes_per_frame / 1e6) << " MB\n";
  const json j{{"model", g.name},
               {"scheme", format_precision_tag(scheme)},
               {"gop", gop.total},
               {"stages", stages},
               {"batch", batch},
               {"volume",
                {{"weight_bits", v.weight_bits},
                 {"feature_bits", v.feature_bits},
                 {"conv_weight_bits", v.conv_weight_bits},
                 {"conv_feature_bits", v.conv_feature_bits},
                 {"fc_weight_bits", v.fc_weight_bits},
                 {"input_bits", v.input_bits},
                 {"conv_feature_share", v.conv_feature_share},
                 {"feature_share", v.feature_share},
                 {"traffic_bytes_per_frame", v.traffic_bytes_per_frame}}}};
  emit_text(o, o.json ? j.dump(2) + "\n" : t.str());
  return 0;
}

BalanceOptions balance_options(const Options& o) {
  BalanceOptions b;
  if (o.batch > 0) b.fixed_batch = o.batch;
  return b;
}

int cmd_explore(const Options& o) {
  const auto g = load_model(o.model);
  const auto scheme = load_scheme(o.scheme);
  const auto dev = load_device(o.device);
  const auto cal = load_calibration(o.calib);
  const auto plan = balance_pipeline(g, scheme, dev, cal, balance_options(o));
  const auto e = estimate(plan, g, scheme, dev, cal);
  const json j{{"device", dev.name}, {"calibration", cal.version}, {"plan", plan_to_json(plan)}, {"estimate", estimate_to_json(e)}};
  if (!o.out.empty()) write_file_text(o.out, j.dump(2) + "\n");
  if (o.json)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << plan_table(plan) << "\n" << estimate_table(e);
  return 0;
}

int cmd_estimate(const Options& o) {
  EstimateReport e;
  if (!o.config.empty()) {
    e = replay(load_config(o.config), read_file_bytes(require(o.elbq, "--elbq"))).estimate;
  } else {
    const auto g = load_model(o.model);
    const auto scheme = load_scheme(o.scheme);
    if (o.speed) {
      e = report_from_speed(g, scheme, *o.speed);
      if (o.batch > 0) e.batch = o.batch;
      e.bandwidth = bandwidth_gbs(data_volume(g, scheme, e.batch), e.speed, load_calibration(o.calib));
    } else {
      const auto dev = load_device(o.device);
      const auto cal = load_calibration(o.calib);
      e = estimate(balance_pipeline(g, scheme, dev, cal, balance_options(o)), g, scheme, dev, cal);
    }
  }
  const auto j = estimate_to_json(e);
  if (!o.out.empty()) write_file_text(o.out, j.dump(2) + "\n");
  std::cout << (o.json ? j.dump(2) + "\n" : estimate_table(e));
  return 0;
}

int cmd_emit(const Options& o) {
  const auto g = load_model(o.model);
  const auto m = decode_elbq(read_file_bytes(require(o.elbq, "--elbq")), g);
  if (!o.scheme.empty() && !(load_scheme(o.scheme) == m.scheme))
    throw UsageError("--scheme does not match the quantized model");
  const auto dev = load_device(o.device);
  const auto cal = load_calibration(o.calib);
  const auto plan = balance_pipeline(g, m.scheme, dev, cal, balance_options(o));
  write_file_text(require(o.out, "--out"), emit_config(build_config(plan, g, m, dev, cal)));
  return 0;
}

double delta_pct(double model, double ref) { return ref != 0 ? 100.0 * (model - ref) / ref : 0.0; }

int cmd_report(const Options& o) {
  const auto table = load_reference_table(o.table);
  const auto dev = load_device(o.device);
  const auto cal = load_calibration(o.calib);
  std::vector<std::pair<std::string, std::string>> rows;  // model, tag
  if (o.rows.empty()) {
    for (const auto& r : table.rows)
      if (r.model.rfind("alexnet", 0) == 0) rows.emplace_back(r.model, r.scheme);
  } else {
    for (const auto& r : o.rows) {
      const auto colon = r.find(':');
      if (colon == std::string::npos) throw UsageError("report rows are MODEL:TAG, got '" + r + "'");
      rows.emplace_back(r.substr(0, colon), r.substr(colon + 1));
    }
  }

  json out = json::array();
  std::ostringstream t;
  t << "model              scheme            LUT      FF  BRAM   DSP batch   BW(GB/s)    GOP   img/s    TOPS"
       "   d_speed  d_bram   d_dsp\n";
  for (const auto& [model, tag] : rows) {
    const auto g = load_model(model);
    const auto scheme = load_scheme(tag);
    const auto e = estimate(balance_pipeline(g, scheme, dev, cal), g, scheme, dev, cal);
    json row = estimate_to_json(e);
    row["model"] = model;
    std::string d_speed = "-", d_bram = "-", d_dsp = "-";
    if (const auto* ref = table.find(model, tag)) {
      row["reference"] = {{"label", ref->label}, {"speed", ref->speed}, {"batch", ref->batch},
                          {"lut", ref->lut},     {"ff", ref->ff},       {"bram", ref->bram},
                          {"dsp", ref->dsp},     {"gop", ref->gop},     {"bandwidth", ref->bandwidth},
                          {"perf", ref->perf}};
      row["delta_pct"] = {{"speed", delta_pct(e.speed, ref->speed)},
                          {"lut", delta_pct(e.lut, ref->lut)},
                          {"ff", delta_pct(e.ff, ref->ff)},
                          {"bram", delta_pct(e.bram, ref->bram)},
                          {"dsp", delta_pct(e.dsp, ref->dsp)},
                          {"gop", delta_pct(e.gop, ref->gop)},
                          {"bandwidth", delta_pct(e.bandwidth, ref->bandwidth)}};
      d_speed = fmt("%+.1f%%", delta_pct(e.speed, ref->speed));
      d_bram = fmt("%+.1f%%", delta_pct(e.bram, ref->bram));
      d_dsp = fmt("%+.1f%%", delta_pct(e.dsp, ref->dsp));
    }
    out.push_back(row);
    std::string m = model, s = tag;
    m.resize(18, ' ');
    s.resize(15, ' ');
    t << m << " " << s << pad(fmt("%.0f", e.lut), 8) << pad(fmt("%.0f", e.ff), 8) << pad(fmt("%.0f", e.bram), 6)
      << pad(fmt("%.0f", e.dsp), 6) << pad(std::to_string(e.batch), 6) << pad(fmt("%.2f", e.bandwidth), 11)
      << pad(fmt("%.2f", e.gop), 7) << pad(fmt("%.1f", e.speed), 8) << pad(fmt("%.3f", e.perf), 8)
      << pad(d_speed, 10) << pad(d_bram, 8) << pad(d_dsp, 8) << "\n";
  }
  const json j{{"device", dev.name}, {"calibration", cal.version}, {"rows", out}};
  if (!o.out.empty()) write_file_text(o.out, j.dump(2) + "\n");
  std::cout << (o.json ? j.dump(2) + "\n" : t.str());
  return 0;
}

void report_error(bool as_json, const std::string& kind, const std::string& message, int code) {
  if (as_json)
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
  else
    std::cerr << "elbc: " << message << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid low-bit network toolchain"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_flag("--json", o.json, "machine-readable output and errors");
  app.add_option("--out", o.out, "output path");

  auto model = [&](CLI::App* c) { c->add_option("--model", o.model, "model file or zoo:NAME"); };
  auto scheme = [&](CLI::App* c) { c->add_option("--scheme", o.scheme, "precision tag NAME-A-WXYZ"); };
  auto hw = [&](CLI::App* c) {
    c->add_option("--device", o.device, "device preset or file")->capture_default_str();
    c->add_option("--calib", o.calib, "calibration file")->capture_default_str();
    c->add_option("--batch", o.batch, "fix the batch instead of searching it");
  };

  auto* parse = app.add_subcommand("parse", "validate a model and list its fused stages");
  model(parse);

  auto* sw = app.add_subcommand("synth-weights", "write deterministic random weights (.elbw)");
  model(sw);
  sw->add_option("--seed", o.seed, "random seed");
  sw->add_option("--fill", o.fill, "constant value for every weight instead of random ones");

  auto* si = app.add_subcommand("synth-image", "write a deterministic random 8-bit image");
  model(si);
  si->add_option("--shape", o.shape, "CxHxW (default: the model input)");
  si->add_option("--seed", o.seed, "random seed");

  auto* quant = app.add_subcommand("quantize", "quantize .elbw weights under a scheme (.elbq)");
  model(quant);
  scheme(quant);
  quant->add_option("--weights", o.weights, "float weights (.elbw)");
  quant->add_option("--rounding", o.rounding, "half_away or truncate")->capture_default_str();
  quant->add_option("--calib-images", o.calib_images, "images used to place activation binary points")
      ->capture_default_str();

  auto* infer = app.add_subcommand("infer", "run the bit-exact emulator on one image");
  model(infer);
  infer->add_option("--elbq", o.elbq, "quantized model (.elbq)");
  infer->add_option("--image", o.image, "raw image: u32 c,h,w then bytes");
  infer->add_option("--config", o.config, "take the model from an emitted config");

  auto* analyze = app.add_subcommand("analyze", "operation counts and data volumes");
  model(analyze);
  scheme(analyze);
  analyze->add_option("--batch", o.batch, "batch for the DRAM traffic figure");

  auto* explore = app.add_subcommand("explore", "search parallelism and batch for a device");
  model(explore);
  scheme(explore);
  hw(explore);

  auto* est = app.add_subcommand("estimate", "throughput, resources and bandwidth of a design");
  model(est);
  scheme(est);
  hw(est);
  est->add_option("--config", o.config, "replay an emitted config (with --elbq)");
  est->add_option("--elbq", o.elbq, "quantized model matching --config");
  est->add_option("--speed", o.speed, "report for a given throughput (img/s) instead of searching");

  auto* emit = app.add_subcommand("emit", "write the accelerator configuration");
  model(emit);
  scheme(emit);
  hw(emit);
  emit->add_option("--elbq", o.elbq, "quantized model (.elbq)");

  auto* report = app.add_subcommand("report", "summary table against the shipped reference results");
  hw(report);
  report->add_option("rows", o.rows, "MODEL:TAG entries (default: the AlexNet reference rows)");
  report->add_option("--table", o.table, "reference results (JSON)")->capture_default_str();

  bool json_requested = false;
  for (int i = 1; i < argc; ++i) json_requested |= std::string(argv[i]) == "--json";

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(json_requested, "usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (*parse) return cmd_parse(o);
    if (*sw) return cmd_synth_weights(o);
    if (*si) return cmd_synth_image(o);
    if (*quant) return cmd_quantize(o);
    if (*infer) return cmd_infer(o);
    if (*analyze) return cmd_analyze(o);
    if (*explore) return cmd_explore(o);
    if (*est) return cmd_estimate(o);
    if (*emit) return cmd_emit(o);
    if (*report) return cmd_report(o);
  } catch (const Error& e) {
    const int code = exit_code_for(e);
    report_error(o.json, e.kind(), e.what(), code);
    return code;
  }
  return kExitUsage;
}
