#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "elb/error.hpp"

namespace elb {

struct Shape3 {
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t size() const { return std::int64_t{c} * h * w; }
  auto operator<=>(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

enum class LayerKind { Input, Conv, FullyConnected, BatchNorm, ReLU, MaxPool };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "Input";
    case LayerKind::Conv: return "Conv";
    case LayerKind::FullyConnected: return "FC";
    case LayerKind::BatchNorm: return "BN";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "MaxPool";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from_string(std::string_view s) {
  if (s == "Input") return LayerKind::Input;
  if (s == "Conv") return LayerKind::Conv;
  if (s == "FC") return LayerKind::FullyConnected;
  if (s == "BN") return LayerKind::BatchNorm;
  if (s == "ReLU") return LayerKind::ReLU;
  if (s == "MaxPool") return LayerKind::MaxPool;
  return std::nullopt;
}

/// One layer of the un-fused chain. in_channels and the in/out shapes are
/// filled in by shape inference; everything else comes from the model text.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Input;
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int pad = 0;
  int group = 1;
  bool bias = true;    // Conv / FC
  double eps = 1e-5;   // BatchNorm
  std::optional<int> weight_bits;  // per-layer precision override
  Shape3 in_shape{};
  Shape3 out_shape{};

  bool has_weights() const {
    return kind == LayerKind::Conv || kind == LayerKind::FullyConnected;
  }
  bool operator==(const LayerSpec&) const = default;
};

/// Parsed, un-fused chain. layers[0] is always the Input layer.
struct LayerGraph {
  std::vector<LayerSpec> layers;

  Shape3 input_shape() const { return layers.empty() ? Shape3{} : layers.front().out_shape; }
  bool operator==(const LayerGraph&) const = default;
};

enum class StagePosition { First, Mid, Last };

inline std::string_view to_string(StagePosition p) {
  switch (p) {
    case StagePosition::First: return "first";
    case StagePosition::Mid: return "mid";
    case StagePosition::Last: return "last";
  }
  return "?";
}

/// A Conv/FC core with its trailing BN, ReLU and MaxPool absorbed.
struct FusedStage {
  LayerSpec core;
  std::optional<LayerSpec> bn;
  std::optional<LayerSpec> relu;
  std::optional<LayerSpec> pool;
  StagePosition position = StagePosition::Mid;

  const Shape3& in_shape() const { return core.in_shape; }
  const Shape3& core_shape() const { return core.out_shape; }
  const Shape3& out_shape() const { return pool ? pool->out_shape : core.out_shape; }

  bool is_fc() const { return core.kind == LayerKind::FullyConnected; }
  int groups() const { return core.group; }
  /// Reduction length of one output element (taps per dot product).
  std::int64_t kernel_elems() const {
    return std::int64_t{core.kernel_h} * core.kernel_w * (core.in_channels / core.group);
  }
  std::int64_t out_pixels() const { return std::int64_t{core.out_shape.h} * core.out_shape.w; }
  std::int64_t macs() const { return out_pixels() * core.out_channels * kernel_elems(); }
  std::int64_t weight_count() const {
    return std::int64_t{core.out_channels} * kernel_elems();
  }
  bool operator==(const FusedStage&) const = default;
};

struct NetworkGraph {
  std::string name;
  Shape3 input_shape{};
  std::string input_name = "data";
  int output_classes = 0;
  std::vector<FusedStage> stages;

  bool operator==(const NetworkGraph&) const = default;
};

inline int conv_output_dim(int in, int kernel, int stride, int pad) {
  const int span = in + 2 * pad - kernel;
  if (span < 0) return -1;
  return span / stride + 1;
}

namespace detail {

inline void check_hyper(const LayerSpec& l) {
  if (l.stride < 1) throw ShapeError(l.name + ": stride must be >= 1");
  if (l.pad < 0) throw ShapeError(l.name + ": pad must be >= 0");
  if (l.kernel_h < 1 || l.kernel_w < 1) throw ShapeError(l.name + ": kernel dims must be >= 1");
  if (l.group < 1) throw ShapeError(l.name + ": group must be >= 1");
}

}  // namespace detail

/// Resolves in/out shapes of every layer in the chain. Throws ShapeError on
/// negative output sizes or group non-divisibility.
inline LayerGraph infer_shapes(LayerGraph g) {
  if (g.layers.empty() || g.layers.front().kind != LayerKind::Input)
    throw ShapeError("graph must start with an Input layer");
  auto& in = g.layers.front();
  if (in.out_shape.c < 1 || in.out_shape.h < 1 || in.out_shape.w < 1)
    throw ShapeError(in.name + ": input shape must be positive");
  in.in_shape = in.out_shape;
  in.out_channels = in.out_shape.c;

  Shape3 cur = in.out_shape;
  for (std::size_t i = 1; i < g.layers.size(); ++i) {
    auto& l = g.layers[i];
    if (l.kind == LayerKind::Input) throw ShapeError(l.name + ": Input layer must be first");
    l.in_shape = cur;
    switch (l.kind) {
      case LayerKind::Conv: {
        detail::check_hyper(l);
        l.in_channels = cur.c;
        if (l.out_channels < 1) throw ShapeError(l.name + ": num_output must be >= 1");
        if (l.in_channels % l.group != 0 || l.out_channels % l.group != 0)
          throw ShapeError(l.name + ": group " + std::to_string(l.group) +
                           " does not divide channels " + std::to_string(l.in_channels) + "/" +
                           std::to_string(l.out_channels));
        const int oh = conv_output_dim(cur.h, l.kernel_h, l.stride, l.pad);
        const int ow = conv_output_dim(cur.w, l.kernel_w, l.stride, l.pad);
        if (oh < 1 || ow < 1) throw ShapeError(l.name + ": negative output size");
        l.out_shape = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::FullyConnected: {
        if (l.group != 1) throw ShapeError(l.name + ": FC layers do not support groups");
        if (l.out_channels < 1) throw ShapeError(l.name + ": num_output must be >= 1");
        l.kernel_h = l.kernel_w = l.stride = 1;
        l.pad = 0;
        l.in_channels = static_cast<int>(cur.size());
        l.out_shape = {l.out_channels, 1, 1};
        break;
      }
      case LayerKind::MaxPool: {
        detail::check_hyper(l);
        const int oh = conv_output_dim(cur.h, l.kernel_h, l.stride, l.pad);
        const int ow = conv_output_dim(cur.w, l.kernel_w, l.stride, l.pad);
        if (oh < 1 || ow < 1) throw ShapeError(l.name + ": negative output size");
        l.in_channels = l.out_channels = cur.c;
        l.out_shape = {cur.c, oh, ow};
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
        l.in_channels = l.out_channels = cur.c;
        l.out_shape = cur;
        break;
      case LayerKind::Input:
        break;
    }
    cur = l.out_shape;
  }
  return g;
}

}  // namespace elb
