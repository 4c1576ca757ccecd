#pragma once

#include <map>
#include <string>
#include <string_view>

#include "elb/error.hpp"
#include "elb/netir.hpp"

namespace elb {

/// Hybrid bit-width assignment. Weight width 1 selects the binary codec, 2 the
/// ternary codec and anything wider signed fixed point.
struct PrecisionScheme {
  std::string name = "net";
  int act_bits = 8;
  int w_first = 8;
  int w_midconv = 8;
  int w_midfc = 8;
  int w_last = 8;
  int input_bits = 8;
  int output_bits = 16;
  std::map<std::string, int> overrides;  // layer name -> weight bits

  int weight_bits_for(const FusedStage& s) const {
    if (auto it = overrides.find(s.core.name); it != overrides.end()) return it->second;
    if (s.core.weight_bits) return *s.core.weight_bits;
    switch (s.position) {
      case StagePosition::First: return w_first;
      case StagePosition::Last: return w_last;
      case StagePosition::Mid: return s.is_fc() ? w_midfc : w_midconv;
    }
    return w_midconv;
  }
  /// Bit width of the activations a stage consumes.
  int input_act_bits(const FusedStage& s) const {
    return s.position == StagePosition::First ? input_bits : act_bits;
  }

  void validate() const {
    auto check = [](int v, const char* what) {
      if (v < 1 || v > 16) throw ParseError(std::string(what) + " bit-width must be in [1, 16]");
    };
    check(act_bits, "activation");
    check(w_first, "first-conv weight");
    check(w_midconv, "mid-conv weight");
    check(w_midfc, "mid-fc weight");
    check(w_last, "last-fc weight");
    check(input_bits, "input");
    check(output_bits, "output");
    for (const auto& [layer, bits] : overrides) check(bits, layer.c_str());
  }

  bool operator==(const PrecisionScheme&) const = default;
};

/// Parses "<name>-<A>-<WXYZ>", e.g. "Alexnet-4-8218".
inline PrecisionScheme parse_precision_tag(std::string_view tag) {
  const auto bad = [&](const std::string& why) {
    return ParseError("malformed precision tag '" + std::string(tag) + "': " + why);
  };
  const auto last = tag.rfind('-');
  if (last == std::string_view::npos || last == 0) throw bad("expected <name>-<A>-<WXYZ>");
  const auto mid = tag.rfind('-', last - 1);
  if (mid == std::string_view::npos || mid == 0) throw bad("expected <name>-<A>-<WXYZ>");
  const std::string_view name = tag.substr(0, mid);
  const std::string_view act = tag.substr(mid + 1, last - mid - 1);
  const std::string_view weights = tag.substr(last + 1);
  if (act.size() != 1) throw bad("activation field must be one digit");
  if (weights.size() != 4) throw bad("weight field must be four digits");
  auto digit = [&](char c) {
    if (c < '0' || c > '9') throw bad("non-digit in bit-width field");
    if (c == '0') throw bad("zero bit-width");
    return c - '0';
  };
  PrecisionScheme s;
  s.name = std::string(name);
  s.act_bits = digit(act[0]);
  s.w_first = digit(weights[0]);
  s.w_midconv = digit(weights[1]);
  s.w_midfc = digit(weights[2]);
  s.w_last = digit(weights[3]);
  return s;
}

inline std::string format_precision_tag(const PrecisionScheme& s) {
  auto d = [](int v) {
    if (v < 1 || v > 9) throw ParseError("bit-width " + std::to_string(v) + " has no tag digit");
    return static_cast<char>('0' + v);
  };
  std::string out = s.name + "-";
  out += d(s.act_bits);
  out += '-';
  out += d(s.w_first);
  out += d(s.w_midconv);
  out += d(s.w_midfc);
  out += d(s.w_last);
  return out;
}

}  // namespace elb
