#pragma once

#include <string>
#include <utility>

#include "elb/error.hpp"
#include "elb/netir.hpp"

namespace elb {

/// Collapses the chain into Conv/FC-rooted stages (core -> BN -> ReLU -> pool).
/// The first stage is First and the final one is Last; a single-stage network
/// has only a First stage.
inline NetworkGraph fuse(const LayerGraph& chain, std::string name = {}) {
  const LayerGraph g = infer_shapes(chain);
  NetworkGraph out;
  out.name = std::move(name);
  out.input_shape = g.input_shape();
  out.input_name = g.layers.front().name;

  for (std::size_t i = 1; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.has_weights()) {
      FusedStage s;
      s.core = l;
      out.stages.push_back(std::move(s));
      continue;
    }
    if (out.stages.empty())
      throw ShapeError(l.name + ": " + std::string(to_string(l.kind)) +
                       " not preceded by Conv/FC");
    FusedStage& s = out.stages.back();
    switch (l.kind) {
      case LayerKind::BatchNorm:
        if (s.bn || s.relu || s.pool)
          throw ShapeError(l.name + ": BN not preceded by Conv/FC");
        s.bn = l;
        break;
      case LayerKind::ReLU:
        if (s.relu || s.pool) throw ShapeError(l.name + ": ReLU not preceded by Conv/FC");
        s.relu = l;
        break;
      case LayerKind::MaxPool:
        if (s.pool) throw ShapeError(l.name + ": MaxPool not preceded by Conv/FC");
        s.pool = l;
        break;
      default:
        throw ShapeError(l.name + ": unexpected layer kind");
    }
  }
  if (out.stages.empty()) throw ShapeError("network has no Conv/FC layers");

  for (auto& s : out.stages) s.position = StagePosition::Mid;
  out.stages.front().position = StagePosition::First;
  if (out.stages.size() > 1) out.stages.back().position = StagePosition::Last;
  out.output_classes = out.stages.back().out_shape().c;
  return out;
}

/// Inverse of fuse: the original layer sequence.
inline LayerGraph unfuse(const NetworkGraph& g) {
  LayerGraph chain;
  LayerSpec in;
  in.name = g.input_name;
  in.kind = LayerKind::Input;
  in.in_shape = in.out_shape = g.input_shape;
  in.out_channels = g.input_shape.c;
  chain.layers.push_back(in);
  for (const auto& s : g.stages) {
    chain.layers.push_back(s.core);
    if (s.bn) chain.layers.push_back(*s.bn);
    if (s.relu) chain.layers.push_back(*s.relu);
    if (s.pool) chain.layers.push_back(*s.pool);
  }
  return chain;
}

/// Re-derives every stage's shapes from the input shape.
inline NetworkGraph infer_shapes(const NetworkGraph& g) { return fuse(unfuse(g), g.name); }

}  // namespace elb
