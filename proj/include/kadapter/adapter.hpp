#pragma once

// Knowledge-specific adapters plugged outside a frozen backbone.
//
// Adapter layer k reads the backbone hidden state after injection layer
// i_k together with the previous adapter layer's output (zeros for k = 0):
//
//   x = [h_i ; prev]                      width H + H_u
//   d = gelu(x W_down + b_down)           width H_d
//   t = N encoder blocks at width H_A     (H_A == H_d)
//   u = t W_up + b_up                     width H_u
//   out = u + h_i                         skip across both projections
//
// Up-projections start at zero, so a fresh adapter is the identity on h_i.

#include <cstdint>
#include <string>
#include <vector>

#include "kadapter/backbone.hpp"
#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"
#include "kadapter/params.hpp"

namespace kadapter {

struct AdapterConfig {
  std::vector<int> injection_layers{0, 1, 3};
  int n_inner = 1;       // N
  int hidden = 32;       // H_A
  int n_heads = 4;       // A_A
  int down_dim = 32;     // H_d
  int up_dim = 64;       // H_u
  int ffn_inner = 128;   // inner FFN width of the adapter blocks

  void validate(const BackboneConfig& backbone) const {
    if (injection_layers.empty()) throw ConfigError("adapter needs at least one injection layer");
    for (std::size_t i = 0; i < injection_layers.size(); ++i) {
      const int layer = injection_layers[i];
      if (layer < 0 || layer >= backbone.n_layers) {
        throw ConfigError("injection layer " + std::to_string(layer) +
                          " outside backbone of " + std::to_string(backbone.n_layers) +
                          " layers");
      }
      if (i > 0 && layer <= injection_layers[i - 1]) {
        throw ConfigError("injection layers must be strictly increasing");
      }
    }
    if (n_inner < 0 || hidden < 1 || n_heads < 1 || down_dim < 1 || up_dim < 1 ||
        ffn_inner < 1) {
      throw ConfigError("adapter dimensions must be positive");
    }
    if (hidden % n_heads != 0) {
      throw ConfigError("adapter hidden " + std::to_string(hidden) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
    }
    if (down_dim != hidden) {
      throw ConfigError("adapter down_dim must equal adapter hidden");
    }
    if (up_dim != backbone.hidden) {
      throw ConfigError("adapter up_dim " + std::to_string(up_dim) +
                        " must equal backbone hidden " + std::to_string(backbone.hidden) +
                        " for the skip connection");
    }
  }

  bool operator==(const AdapterConfig&) const = default;
};

struct AdapterOutput {
  Tensor final;                    // [b x l x (H + H_u)]
  std::vector<Tensor> per_layer;   // K tensors [b x l x H_u]
};

struct AdapterLayer {
  Tensor down_w, down_b;
  std::vector<EncoderBlock> blocks;
  Tensor up_w, up_b;
};

// One adapter layer; see the file comment for the dataflow.
inline Tensor adapter_layer_forward(const Tensor& hidden, const Tensor& prev,
                                    const AdapterLayer& layer,
                                    std::span<const double> pad_mask) {
  using namespace ndgrad;
  if (hidden.shape() != prev.shape()) {
    throw DimensionError("adapter layer: backbone hidden " + shape_str(hidden.shape()) +
                         " and previous adapter output " + shape_str(prev.shape()) +
                         " differ");
  }
  if (layer.up_w.dim(1) != hidden.shape().back()) {
    throw ConfigError("adapter up-projection width " + std::to_string(layer.up_w.dim(1)) +
                      " differs from backbone hidden " +
                      std::to_string(hidden.shape().back()));
  }
  Tensor t = gelu(linear(concat_lastdim({hidden, prev}), layer.down_w, layer.down_b));
  for (const auto& block : layer.blocks) t = block.forward(t, pad_mask);
  return add(linear(t, layer.up_w, layer.up_b), hidden);
}

class Adapter {
 public:
  static std::string prefix(const std::string& name) { return "adapter." + name + "."; }

  static std::string layer_prefix(const std::string& name, std::size_t k) {
    return prefix(name) + "layer." + std::to_string(k) + ".";
  }

  static Layout layout(const std::string& name, const AdapterConfig& cfg,
                       const BackboneConfig& backbone) {
    cfg.validate(backbone);
    const auto h = static_cast<std::size_t>(backbone.hidden);
    const auto hu = static_cast<std::size_t>(cfg.up_dim);
    const auto hd = static_cast<std::size_t>(cfg.down_dim);
    const auto ha = static_cast<std::size_t>(cfg.hidden);
    Layout l;
    for (std::size_t k = 0; k < cfg.injection_layers.size(); ++k) {
      const std::string p = layer_prefix(name, k);
      l.push_back({p + "down.weight", {h + hu, hd}, Init::Normal});
      l.push_back({p + "down.bias", {hd}, Init::Zeros});
      for (int n = 0; n < cfg.n_inner; ++n) {
        append(l, EncoderBlock::layout(p + "block." + std::to_string(n) + ".", ha,
                                       static_cast<std::size_t>(cfg.ffn_inner)));
      }
      l.push_back({p + "up.weight", {ha, hu}, Init::Zeros});
      l.push_back({p + "up.bias", {hu}, Init::Zeros});
    }
    return l;
  }

  Adapter(std::string name, const AdapterConfig& cfg, const BackboneConfig& backbone,
          const ParamStore& store)
      : name_(std::move(name)), cfg_(cfg) {
    cfg_.validate(backbone);
    for (std::size_t k = 0; k < cfg_.injection_layers.size(); ++k) {
      const std::string p = layer_prefix(name_, k);
      AdapterLayer layer;
      layer.down_w = store.at(p + "down.weight");
      layer.down_b = store.at(p + "down.bias");
      for (int n = 0; n < cfg_.n_inner; ++n) {
        layer.blocks.push_back(EncoderBlock::bind(store, p + "block." + std::to_string(n) + ".",
                                                  static_cast<std::size_t>(cfg_.n_heads)));
      }
      layer.up_w = store.at(p + "up.weight");
      layer.up_b = store.at(p + "up.bias");
      layers_.push_back(std::move(layer));
    }
  }

  const std::string& name() const { return name_; }
  const AdapterConfig& config() const { return cfg_; }
  const std::vector<AdapterLayer>& layers() const { return layers_; }

  AdapterOutput forward(const HiddenStack& stack) const {
    std::span<const double> mask = stack.mask.data();
    AdapterOutput out;
    Tensor prev;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const int layer = cfg_.injection_layers[k];
      if (layer < 0 || static_cast<std::size_t>(layer) + 1 >= stack.states.size()) {
        throw ConfigError("injection layer " + std::to_string(layer) +
                          " outside hidden stack of " +
                          std::to_string(stack.states.size()) + " states");
      }
      const Tensor& h = stack.after_layer(layer);
      if (!prev.defined()) prev = Tensor::zeros(h.shape());
      prev = adapter_layer_forward(h, prev, layers_[k], mask);
      out.per_layer.push_back(prev);
    }
    out.final = ndgrad::concat_lastdim({stack.last(), out.per_layer.back()});
    return out;
  }

 private:
  std::string name_;
  AdapterConfig cfg_;
  std::vector<AdapterLayer> layers_;
};

// Concatenates each adapter's final features in order; a single adapter's
// features pass through unchanged.
inline Tensor fuse(const std::vector<AdapterOutput>& outputs) {
  if (outputs.empty()) throw ArgumentError("fuse: no adapter outputs");
  if (outputs.size() == 1) return outputs.front().final;
  std::vector<Tensor> parts;
  for (const auto& o : outputs) parts.push_back(o.final);
  return ndgrad::concat_lastdim(parts);
}

// Sizes quoted for the large configuration: RoBERTa-large backbone, K=3
// adapter layers at {0, 11, 23}, N=2, H_A=H_d=768, H_u=1024.
inline BackboneConfig large_backbone_config() {
  BackboneConfig b;
  b.n_layers = 24;
  b.hidden = 1024;
  b.n_heads = 16;
  b.ffn_inner = 4096;
  b.vocab_size = 50265;
  b.max_len = 512;
  return b;
}

inline AdapterConfig large_adapter_config() {
  AdapterConfig a;
  a.injection_layers = {0, 11, 23};
  a.n_inner = 2;
  a.hidden = a.down_dim = 768;
  a.n_heads = 12;
  a.up_dim = 1024;
  a.ffn_inner = 3072;
  return a;
}

// Closed-form count of trainable scalars in one adapter model.
inline std::uint64_t param_count(const AdapterConfig& cfg, const BackboneConfig& backbone) {
  const std::uint64_t h = static_cast<std::uint64_t>(backbone.hidden);
  const std::uint64_t hu = static_cast<std::uint64_t>(cfg.up_dim);
  const std::uint64_t hd = static_cast<std::uint64_t>(cfg.down_dim);
  const std::uint64_t ha = static_cast<std::uint64_t>(cfg.hidden);
  const std::uint64_t f = static_cast<std::uint64_t>(cfg.ffn_inner);
  const std::uint64_t down = (h + hu) * hd + hd;
  const std::uint64_t attention = 4 * (ha * ha + ha);
  const std::uint64_t norms = 2 * (2 * ha);
  const std::uint64_t ffn = (ha * f + f) + (f * ha + ha);
  const std::uint64_t block = attention + norms + ffn;
  const std::uint64_t up = ha * hu + hu;
  const std::uint64_t per_layer = down + static_cast<std::uint64_t>(cfg.n_inner) * block + up;
  return per_layer * static_cast<std::uint64_t>(cfg.injection_layers.size());
}

// Counts by walking the parameter layout the model is built from.
inline std::uint64_t enumerate_param_count(const AdapterConfig& cfg,
                                           const BackboneConfig& backbone) {
  return layout_numel(Adapter::layout("count", cfg, backbone));
}

}  // namespace kadapter
