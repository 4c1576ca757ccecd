#pragma once

#include <cctype>
#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "elb/error.hpp"
#include "elb/fuse.hpp"
#include "elb/netir.hpp"

namespace elb {

namespace detail {

struct Token {
  enum Kind { Ident, Number, String, LBrace, RBrace, Colon, End } kind;
  std::string text;
  int line;
};

inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  int line = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
      ++i;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (c == '{') {
      out.push_back({Token::LBrace, "{", line});
      ++i;
    } else if (c == '}') {
      out.push_back({Token::RBrace, "}", line});
      ++i;
    } else if (c == ':') {
      out.push_back({Token::Colon, ":", line});
      ++i;
    } else if (c == '"') {
      const std::size_t end = text.find('"', i + 1);
      if (end == std::string_view::npos) throw ParseError("unterminated string", line);
      const std::string_view body = text.substr(i + 1, end - i - 1);
      if (body.find('\n') != std::string_view::npos) throw ParseError("newline in string", line);
      out.push_back({Token::String, std::string(body), line});
      i = end + 1;
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.') {
      std::size_t j = i + 1;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '.' ||
                                 ((text[j] == '-' || text[j] == '+') &&
                                  (text[j - 1] == 'e' || text[j - 1] == 'E'))))
        ++j;
      out.push_back({Token::Number, std::string(text.substr(i, j - i)), line});
      i = j;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i + 1;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
      out.push_back({Token::Ident, std::string(text.substr(i, j - i)), line});
      i = j;
    } else {
      throw ParseError(std::string("unexpected character '") + c + "'", line);
    }
  }
  out.push_back({Token::End, "", line});
  return out;
}

struct RawField {
  std::string value;
  Token::Kind kind;
  int line;
};

inline int to_int(const RawField& f, const std::string& key) {
  int v = 0;
  const char* b = f.value.data();
  const char* e = b + f.value.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (f.kind != Token::Number || ec != std::errc{} || p != e)
    throw ParseError(key + " expects an integer, got '" + f.value + "'", f.line);
  return v;
}

inline double to_double(const RawField& f, const std::string& key) {
  if (f.kind != Token::Number) throw ParseError(key + " expects a number", f.line);
  try {
    std::size_t used = 0;
    const double v = std::stod(f.value, &used);
    if (used != f.value.size()) throw ParseError(key + " expects a number", f.line);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError(key + " expects a number, got '" + f.value + "'", f.line);
  }
}

inline bool to_bool(const RawField& f, const std::string& key) {
  if (f.value == "true" || f.value == "1") return true;
  if (f.value == "false" || f.value == "0") return false;
  throw ParseError(key + " expects true/false", f.line);
}

inline const std::set<std::string>& allowed_keys(LayerKind k) {
  static const std::map<LayerKind, std::set<std::string>> table = {
      {LayerKind::Input, {"name", "type", "channels", "height", "width"}},
      {LayerKind::Conv,
       {"name", "type", "bottom", "num_output", "kernel_size", "kernel_h", "kernel_w", "stride", "pad",
        "group", "bias", "weight_bits"}},
      {LayerKind::FullyConnected, {"name", "type", "bottom", "num_output", "bias", "weight_bits"}},
      {LayerKind::BatchNorm, {"name", "type", "bottom", "eps"}},
      {LayerKind::ReLU, {"name", "type", "bottom"}},
      {LayerKind::MaxPool, {"name", "type", "bottom", "kernel_size", "kernel_h", "kernel_w", "stride", "pad"}},
  };
  return table.at(k);
}

}  // namespace detail

/// Parses the `.elbm` block grammar into an un-fused, shape-checked chain.
inline LayerGraph parse_model(std::string_view text, std::string* model_name = nullptr) {
  using detail::Token;
  const auto toks = detail::tokenize(text);
  std::size_t pos = 0;
  auto expect = [&](Token::Kind k, const char* what) -> const Token& {
    const Token& t = toks[pos];
    if (t.kind != k) throw ParseError(std::string("expected ") + what + ", got '" + t.text + "'", t.line);
    ++pos;
    return t;
  };

  LayerGraph g;
  std::map<std::string, int> seen;  // name -> index in g.layers
  while (toks[pos].kind != Token::End) {
    const Token& head = expect(Token::Ident, "'layer'");
    if (head.text == "name") {
      expect(Token::Colon, "':'");
      const Token& v = expect(Token::String, "string");
      if (model_name) *model_name = v.text;
      continue;
    }
    if (head.text != "layer") throw ParseError("expected 'layer', got '" + head.text + "'", head.line);
    expect(Token::LBrace, "'{'");

    std::map<std::string, detail::RawField> fields;
    while (toks[pos].kind != Token::RBrace) {
      const Token& key = expect(Token::Ident, "key");
      expect(Token::Colon, "':'");
      const Token& val = toks[pos];
      if (val.kind != Token::Ident && val.kind != Token::Number && val.kind != Token::String)
        throw ParseError("missing value for '" + key.text + "'", val.line);
      ++pos;
      if (fields.count(key.text)) throw ParseError("duplicate key '" + key.text + "'", key.line);
      fields[key.text] = {val.text, val.kind, val.line};
    }
    expect(Token::RBrace, "'}'");

    auto require = [&](const std::string& k) -> const detail::RawField& {
      auto it = fields.find(k);
      if (it == fields.end()) throw ParseError("missing required field '" + k + "'", head.line);
      return it->second;
    };
    auto opt_int = [&](const std::string& k, int dflt) {
      auto it = fields.find(k);
      return it == fields.end() ? dflt : detail::to_int(it->second, k);
    };

    LayerSpec l;
    const auto& name = require("name");
    if (name.kind != Token::String) throw ParseError("name must be a quoted string", name.line);
    l.name = name.value;
    const auto& type = require("type");
    const auto kind = layer_kind_from_string(type.value);
    if (!kind) throw ParseError("unknown layer type '" + type.value + "'", type.line);
    l.kind = *kind;
    for (const auto& [k, f] : fields)
      if (!detail::allowed_keys(l.kind).count(k))
        throw ParseError("unknown key '" + k + "' for " + type.value + " layer", f.line);

    if (seen.count(l.name)) throw ParseError("duplicate layer name '" + l.name + "'", name.line);
    if (auto it = fields.find("bottom"); it != fields.end()) {
      auto ref = seen.find(it->second.value);
      if (ref == seen.end())
        throw ParseError("dangling layer reference '" + it->second.value + "'", it->second.line);
      if (ref->second + 1 != static_cast<int>(g.layers.size()))
        throw ParseError("branching topologies are not supported ('" + l.name + "' reads '" +
                             it->second.value + "')",
                         it->second.line);
    }

    auto kernel = [&]() {
      if (fields.count("kernel_size")) {
        if (fields.count("kernel_h") || fields.count("kernel_w"))
          throw ParseError("kernel_size conflicts with kernel_h/kernel_w", head.line);
        l.kernel_h = l.kernel_w = detail::to_int(fields.at("kernel_size"), "kernel_size");
      } else {
        l.kernel_h = detail::to_int(require("kernel_h"), "kernel_h");
        l.kernel_w = detail::to_int(require("kernel_w"), "kernel_w");
      }
      if (l.kernel_h < 1 || l.kernel_w < 1) throw ParseError("kernel dims must be >= 1", head.line);
      l.stride = opt_int("stride", 1);
      if (l.stride < 1)
        throw ParseError("stride must be >= 1", fields.count("stride") ? fields.at("stride").line : head.line);
      l.pad = opt_int("pad", 0);
      if (l.pad < 0) throw ParseError("pad must be >= 0", fields.at("pad").line);
    };

    switch (l.kind) {
      case LayerKind::Input:
        if (!g.layers.empty()) throw ParseError("Input layer must be first", head.line);
        l.out_shape = {detail::to_int(require("channels"), "channels"),
                       detail::to_int(require("height"), "height"),
                       detail::to_int(require("width"), "width")};
        l.out_channels = l.out_shape.c;
        break;
      case LayerKind::Conv:
        l.out_channels = detail::to_int(require("num_output"), "num_output");
        kernel();
        l.group = opt_int("group", 1);
        if (l.group < 1) throw ParseError("group must be >= 1", fields.at("group").line);
        break;
      case LayerKind::FullyConnected:
        l.out_channels = detail::to_int(require("num_output"), "num_output");
        break;
      case LayerKind::BatchNorm:
        if (auto it = fields.find("eps"); it != fields.end()) l.eps = detail::to_double(it->second, "eps");
        if (!(l.eps >= 0.0)) throw ParseError("eps must be >= 0", head.line);
        break;
      case LayerKind::MaxPool:
        kernel();
        break;
      case LayerKind::ReLU:
        break;
    }
    if (l.has_weights()) {
      if (auto it = fields.find("bias"); it != fields.end()) l.bias = detail::to_bool(it->second, "bias");
      if (auto it = fields.find("weight_bits"); it != fields.end()) {
        const int wb = detail::to_int(it->second, "weight_bits");
        if (wb < 1 || wb > 16) throw ParseError("weight_bits must be in [1, 16]", it->second.line);
        l.weight_bits = wb;
      }
      if (l.out_channels < 1) throw ParseError("num_output must be >= 1", head.line);
    }
    if (g.layers.empty() && l.kind != LayerKind::Input)
      throw ParseError("first layer must be of type Input", head.line);
    seen[l.name] = static_cast<int>(g.layers.size());
    g.layers.push_back(std::move(l));
  }
  if (g.layers.empty()) throw ParseError("model has no layers");
  try {
    return infer_shapes(g);
  } catch (const ShapeError& e) {
    throw ParseError(e.what());
  }
}

/// Writes a chain back to `.elbm` text. parse_model(format_model(g)) == g.
inline std::string format_model(const LayerGraph& g, const std::string& model_name = {}) {
  std::string out;
  if (!model_name.empty()) out += "name: \"" + model_name + "\"\n\n";
  for (const auto& l : g.layers) {
    out += "layer {\n  name: \"" + l.name + "\"\n  type: " + std::string(to_string(l.kind)) + "\n";
    auto kv = [&](const char* k, const std::string& v) { out += std::string("  ") + k + ": " + v + "\n"; };
    switch (l.kind) {
      case LayerKind::Input:
        kv("channels", std::to_string(l.out_shape.c));
        kv("height", std::to_string(l.out_shape.h));
        kv("width", std::to_string(l.out_shape.w));
        break;
      case LayerKind::Conv:
        kv("num_output", std::to_string(l.out_channels));
        if (l.kernel_h == l.kernel_w) {
          kv("kernel_size", std::to_string(l.kernel_h));
        } else {
          kv("kernel_h", std::to_string(l.kernel_h));
          kv("kernel_w", std::to_string(l.kernel_w));
        }
        kv("stride", std::to_string(l.stride));
        kv("pad", std::to_string(l.pad));
        if (l.group != 1) kv("group", std::to_string(l.group));
        break;
      case LayerKind::FullyConnected:
        kv("num_output", std::to_string(l.out_channels));
        break;
      case LayerKind::BatchNorm: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", l.eps);
        kv("eps", buf);
        break;
      }
      case LayerKind::MaxPool:
        if (l.kernel_h == l.kernel_w) {
          kv("kernel_size", std::to_string(l.kernel_h));
        } else {
          kv("kernel_h", std::to_string(l.kernel_h));
          kv("kernel_w", std::to_string(l.kernel_w));
        }
        kv("stride", std::to_string(l.stride));
        if (l.pad) kv("pad", std::to_string(l.pad));
        break;
      case LayerKind::ReLU:
        break;
    }
    if (l.has_weights()) {
      kv("bias", l.bias ? "true" : "false");
      if (l.weight_bits) kv("weight_bits", std::to_string(*l.weight_bits));
    }
    out += "}\n";
  }
  return out;
}

}  // namespace elb
