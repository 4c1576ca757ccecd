#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <string>
#include <string_view>

#include "elb/error.hpp"
#include "elb/fuse.hpp"
#include "elb/netir.hpp"

namespace elb {

enum class ZooModel { AlexNet, AlexNetNoGroup, AlexNetExtended, VGG16 };

inline std::string_view to_string(ZooModel m) {
  switch (m) {
    case ZooModel::AlexNet: return "AlexNet";
    case ZooModel::AlexNetNoGroup: return "AlexNetNoGroup";
    case ZooModel::AlexNetExtended: return "AlexNetExtended";
    case ZooModel::VGG16: return "VGG16";
  }
  return "?";
}

/// Accepts the canonical names plus lower-case/dashed aliases
/// ("alexnet", "alexnet-nogroup", "alexnet-extended", "vgg16").
inline ZooModel zoo_model_from_string(std::string_view name) {
  std::string key;
  for (char c : name)
    if (c != '-' && c != '_') key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (key == "alexnet") return ZooModel::AlexNet;
  if (key == "alexnetnogroup" || key == "alexnetwogroup") return ZooModel::AlexNetNoGroup;
  if (key == "alexnetextended") return ZooModel::AlexNetExtended;
  if (key == "vgg16") return ZooModel::VGG16;
  throw UsageError("unknown zoo model '" + std::string(name) + "'");
}

namespace detail {

class ChainBuilder {
 public:
  ChainBuilder(int c, int h, int w) {
    LayerSpec in;
    in.name = "data";
    in.kind = LayerKind::Input;
    in.out_shape = {c, h, w};
    in.out_channels = c;
    g_.layers.push_back(in);
  }

  ChainBuilder& conv(const std::string& name, int out, int k, int stride, int pad, int group = 1) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::Conv;
    l.out_channels = out;
    l.kernel_h = l.kernel_w = k;
    l.stride = stride;
    l.pad = pad;
    l.group = group;
    l.bias = false;
    g_.layers.push_back(l);
    return *this;
  }
  ChainBuilder& fc(const std::string& name, int out, bool bias = false) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::FullyConnected;
    l.out_channels = out;
    l.bias = bias;
    g_.layers.push_back(l);
    return *this;
  }
  // BN + ReLU pair named after the core layer.
  ChainBuilder& bn_relu(const std::string& base) {
    LayerSpec bn;
    bn.name = base + "_bn";
    bn.kind = LayerKind::BatchNorm;
    g_.layers.push_back(bn);
    LayerSpec relu;
    relu.name = base + "_relu";
    relu.kind = LayerKind::ReLU;
    g_.layers.push_back(relu);
    return *this;
  }
  ChainBuilder& pool(const std::string& name, int k, int stride) {
    LayerSpec l;
    l.name = name;
    l.kind = LayerKind::MaxPool;
    l.kernel_h = l.kernel_w = k;
    l.stride = stride;
    g_.layers.push_back(l);
    return *this;
  }
  LayerGraph build() const { return infer_shapes(g_); }

 private:
  LayerGraph g_;
};

inline LayerGraph alexnet_layers(std::array<int, 5> ch, int group) {
  return ChainBuilder(3, 227, 227)
      .conv("conv1", ch[0], 11, 4, 0).bn_relu("conv1").pool("pool1", 3, 2)
      .conv("conv2", ch[1], 5, 1, 2, group).bn_relu("conv2").pool("pool2", 3, 2)
      .conv("conv3", ch[2], 3, 1, 1).bn_relu("conv3")
      .conv("conv4", ch[3], 3, 1, 1, group).bn_relu("conv4")
      .conv("conv5", ch[4], 3, 1, 1, group).bn_relu("conv5").pool("pool5", 3, 2)
      .fc("fc6", 4096).bn_relu("fc6")
      .fc("fc7", 4096).bn_relu("fc7")
      .fc("fc8", 1000, true)
      .build();
}

inline LayerGraph vgg16_layers() {
  ChainBuilder b(3, 224, 224);
  const std::array<int, 5> widths{64, 128, 256, 512, 512};
  const std::array<int, 5> depth{2, 2, 3, 3, 3};
  for (int blk = 0; blk < 5; ++blk) {
    for (int i = 0; i < depth[blk]; ++i) {
      const std::string n = "conv" + std::to_string(blk + 1) + "_" + std::to_string(i + 1);
      b.conv(n, widths[blk], 3, 1, 1).bn_relu(n);
    }
    b.pool("pool" + std::to_string(blk + 1), 2, 2);
  }
  return b.fc("fc6", 4096).bn_relu("fc6").fc("fc7", 4096).bn_relu("fc7").fc("fc8", 1000, true).build();
}

}  // namespace detail

/// Un-fused layer chain of a built-in model.
inline LayerGraph zoo_layers(ZooModel m) {
  switch (m) {
    case ZooModel::AlexNet: return detail::alexnet_layers({96, 256, 384, 384, 256}, 2);
    case ZooModel::AlexNetNoGroup: return detail::alexnet_layers({96, 256, 384, 384, 256}, 1);
    case ZooModel::AlexNetExtended: return detail::alexnet_layers({128, 384, 512, 512, 384}, 1);
    case ZooModel::VGG16: return detail::vgg16_layers();
  }
  throw UsageError("unknown zoo model");
}

inline NetworkGraph zoo_model(ZooModel m) { return fuse(zoo_layers(m), std::string(to_string(m))); }
inline NetworkGraph zoo_model(std::string_view name) { return zoo_model(zoo_model_from_string(name)); }

}  // namespace elb
