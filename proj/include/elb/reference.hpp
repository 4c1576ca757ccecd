#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "elb/binio.hpp"
#include "elb/error.hpp"

namespace elb {

/// One measured board result, used for calibration and for the delta
/// column of `report`.
struct ReferenceRow {
  std::string label;
  std::string model;   // zoo name
  std::string scheme;  // precision tag
  double lut = 0, ff = 0, bram = 0, dsp = 0;
  int batch = 1;
  double bandwidth = 0, gop = 0, speed = 0, perf = 0;
};

struct ReferenceTable {
  std::string device;
  double sdk_fraction = 0;
  std::vector<ReferenceRow> rows;

  const ReferenceRow* find(const std::string& model, const std::string& scheme) const {
    for (const auto& r : rows)
      if (r.model == model && r.scheme == scheme) return &r;
    return nullptr;
  }
};

inline ReferenceTable parse_reference_table(const std::string& text) {
  ReferenceTable t;
  try {
    const auto j = nlohmann::json::parse(text);
    t.device = j.at("device").get<std::string>();
    t.sdk_fraction = j.at("sdk_fraction").get<double>();
    for (const auto& r : j.at("rows")) {
      ReferenceRow row;
      row.label = r.at("label").get<std::string>();
      row.model = r.at("model").get<std::string>();
      row.scheme = r.at("scheme").get<std::string>();
      row.lut = r.at("lut").get<double>();
      row.ff = r.at("ff").get<double>();
      row.bram = r.at("bram").get<double>();
      row.dsp = r.at("dsp").get<double>();
      row.batch = r.at("batch").get<int>();
      row.bandwidth = r.at("bandwidth").get<double>();
      row.gop = r.at("gop").get<double>();
      row.speed = r.at("speed").get<double>();
      row.perf = r.at("perf").get<double>();
      t.rows.push_back(row);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("reference table: ") + e.what());
  }
  return t;
}

inline ReferenceTable load_reference_table(const std::string& path) {
  return parse_reference_table(read_file_text(path));
}

}  // namespace elb
