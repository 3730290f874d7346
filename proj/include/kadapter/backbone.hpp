#pragma once

// Small post-norm transformer encoder standing in for the pre-trained model.
// The same block implementation runs inside adapter layers at their width.

#include <cmath>
#include <string>
#include <vector>

#include "kadapter/batch.hpp"
#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"
#include "kadapter/params.hpp"

namespace kadapter {

struct BackboneConfig {
  int n_layers = 4;
  int hidden = 64;
  int n_heads = 4;
  int ffn_inner = 256;
  int vocab_size = 2048;
  int max_len = 64;
  int pad_id = 0;
  int bos_id = 2;
  int sep_id = 3;
  int mask_id = 4;

  void validate() const {
    if (n_layers < 1 || hidden < 1 || n_heads < 1 || ffn_inner < 1 || vocab_size < 1) {
      throw ConfigError("backbone dimensions must be positive");
    }
    if (hidden % n_heads != 0) {
      throw ConfigError("backbone hidden " + std::to_string(hidden) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
    }
    if (max_len < 2) throw ConfigError("backbone max_len must be at least 2");
    const int ids[] = {pad_id, bos_id, sep_id, mask_id};
    for (int i = 0; i < 4; ++i) {
      if (ids[i] < 0 || ids[i] >= vocab_size) {
        throw ConfigError("special token id " + std::to_string(ids[i]) +
                          " outside vocabulary");
      }
      for (int j = 0; j < i; ++j) {
        if (ids[i] == ids[j]) throw ConfigError("special token ids must be distinct");
      }
    }
  }

  bool operator==(const BackboneConfig&) const = default;
};

// Per-layer hidden states: states[0] is the embedding output, states[i] the
// output of transformer layer i-1.
struct HiddenStack {
  std::vector<Tensor> states;
  Tensor mask;  // [batch x len], 1 = real token

  const Tensor& last() const { return states.back(); }
  // Hidden state after backbone transformer layer `layer` (0-based).
  const Tensor& after_layer(int layer) const {
    return states.at(static_cast<std::size_t>(layer) + 1);
  }
};

inline constexpr double kAttentionMaskFill = -1e9;

// Additive key mask for scores of shape [(b*heads) x l x l].
inline std::vector<double> attention_bias(std::span<const double> pad_mask,
                                          std::size_t batch, std::size_t len,
                                          std::size_t heads) {
  std::vector<double> bias(batch * heads * len * len, 0.0);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < len; ++q)
        for (std::size_t k = 0; k < len; ++k)
          if (pad_mask[i * len + k] < 0.5)
            bias[((i * heads + h) * len + q) * len + k] = kAttentionMaskFill;
  return bias;
}

struct EncoderBlock {
  Tensor q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  Tensor norm1_g, norm1_b;
  Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor norm2_g, norm2_b;
  std::size_t heads = 1;

  static Layout layout(const std::string& prefix, std::size_t width, std::size_t ffn) {
    Layout l;
    for (const char* p : {"attn.q.", "attn.k.", "attn.v.", "attn.out."}) {
      l.push_back({prefix + p + "weight", {width, width}, Init::Normal});
      l.push_back({prefix + p + "bias", {width}, Init::Zeros});
    }
    l.push_back({prefix + "norm1.gain", {width}, Init::Ones});
    l.push_back({prefix + "norm1.bias", {width}, Init::Zeros});
    l.push_back({prefix + "ffn.in.weight", {width, ffn}, Init::Normal});
    l.push_back({prefix + "ffn.in.bias", {ffn}, Init::Zeros});
    l.push_back({prefix + "ffn.out.weight", {ffn, width}, Init::Normal});
    l.push_back({prefix + "ffn.out.bias", {width}, Init::Zeros});
    l.push_back({prefix + "norm2.gain", {width}, Init::Ones});
    l.push_back({prefix + "norm2.bias", {width}, Init::Zeros});
    return l;
  }

  static EncoderBlock bind(const ParamStore& store, const std::string& prefix,
                           std::size_t heads) {
    EncoderBlock b;
    b.q_w = store.at(prefix + "attn.q.weight");
    b.q_b = store.at(prefix + "attn.q.bias");
    b.k_w = store.at(prefix + "attn.k.weight");
    b.k_b = store.at(prefix + "attn.k.bias");
    b.v_w = store.at(prefix + "attn.v.weight");
    b.v_b = store.at(prefix + "attn.v.bias");
    b.o_w = store.at(prefix + "attn.out.weight");
    b.o_b = store.at(prefix + "attn.out.bias");
    b.norm1_g = store.at(prefix + "norm1.gain");
    b.norm1_b = store.at(prefix + "norm1.bias");
    b.ffn_in_w = store.at(prefix + "ffn.in.weight");
    b.ffn_in_b = store.at(prefix + "ffn.in.bias");
    b.ffn_out_w = store.at(prefix + "ffn.out.weight");
    b.ffn_out_b = store.at(prefix + "ffn.out.bias");
    b.norm2_g = store.at(prefix + "norm2.gain");
    b.norm2_b = store.at(prefix + "norm2.bias");
    b.heads = heads;
    if (b.q_w.dim(0) % heads != 0) {
      throw ConfigError(prefix + ": width not divisible by head count");
    }
    return b;
  }

  std::size_t width() const { return q_w.dim(0); }

  // Softmax attention weights [(b*heads) x l x l] for inspection.
  Tensor attention_probs(const Tensor& x, std::span<const double> pad_mask) const {
    Tensor probs;
    attend(x, pad_mask, &probs);
    return probs;
  }

  Tensor forward(const Tensor& x, std::span<const double> pad_mask) const {
    using namespace ndgrad;
    Tensor attn = attend(x, pad_mask, nullptr);
    Tensor h = layer_norm(add(x, attn), norm1_g, norm1_b);
    Tensor f = linear(gelu(linear(h, ffn_in_w, ffn_in_b)), ffn_out_w, ffn_out_b);
    return layer_norm(add(h, f), norm2_g, norm2_b);
  }

 private:
  Tensor attend(const Tensor& x, std::span<const double> pad_mask, Tensor* probs_out) const {
    using namespace ndgrad;
    if (x.rank() != 3 || x.dim(2) != width()) {
      throw DimensionError("encoder block of width " + std::to_string(width()) +
                           " got input " + shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0), l = x.dim(1);
    if (pad_mask.size() != b * l) {
      throw DimensionError("encoder block: mask of " + std::to_string(pad_mask.size()) +
                           " entries for input " + shape_str(x.shape()));
    }
    const std::size_t dh = width() / heads;
    Tensor q = split_heads(linear(x, q_w, q_b), heads);
    Tensor k = split_heads(linear(x, k_w, k_b), heads);
    Tensor v = split_heads(linear(x, v_w, v_b), heads);
    Tensor scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = add_constant(scores, attention_bias(pad_mask, b, l, heads));
    Tensor probs = softmax_lastdim(scores);
    if (probs_out != nullptr) *probs_out = probs;
    return linear(merge_heads(bmm(probs, v), heads), o_w, o_b);
  }
};

class Backbone {
 public:
  static constexpr const char* kPrefix = "backbone.";

  static Layout layout(const BackboneConfig& cfg) {
    cfg.validate();
    const auto h = static_cast<std::size_t>(cfg.hidden);
    Layout l;
    l.push_back({"backbone.embed.token", {static_cast<std::size_t>(cfg.vocab_size), h}});
    l.push_back({"backbone.embed.position", {static_cast<std::size_t>(cfg.max_len), h}});
    l.push_back({"backbone.embed.norm.gain", {h}, Init::Ones});
    l.push_back({"backbone.embed.norm.bias", {h}, Init::Zeros});
    for (int i = 0; i < cfg.n_layers; ++i) {
      append(l, EncoderBlock::layout(layer_prefix(i), h,
                                     static_cast<std::size_t>(cfg.ffn_inner)));
    }
    return l;
  }

  static std::string layer_prefix(int i) {
    return "backbone.layer." + std::to_string(i) + ".";
  }

  Backbone(const BackboneConfig& cfg, const ParamStore& store) : cfg_(cfg) {
    cfg_.validate();
    token_ = store.at("backbone.embed.token");
    position_ = store.at("backbone.embed.position");
    norm_g_ = store.at("backbone.embed.norm.gain");
    norm_b_ = store.at("backbone.embed.norm.bias");
    if (token_.shape() != Shape{static_cast<std::size_t>(cfg.vocab_size),
                                static_cast<std::size_t>(cfg.hidden)}) {
      throw DimensionError("backbone token table " + ndgrad::shape_str(token_.shape()) +
                           " does not match configuration");
    }
    for (int i = 0; i < cfg.n_layers; ++i) {
      layers_.push_back(EncoderBlock::bind(store, layer_prefix(i),
                                           static_cast<std::size_t>(cfg.n_heads)));
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<EncoderBlock>& layers() const { return layers_; }

  Tensor embed(const EncodedBatch& batch) const {
    using namespace ndgrad;
    if (batch.len > static_cast<std::size_t>(cfg_.max_len)) {
      throw LengthError("sequence length " + std::to_string(batch.len) +
                        " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    std::vector<int> positions(batch.batch * batch.len);
    for (std::size_t i = 0; i < batch.batch; ++i)
      for (std::size_t t = 0; t < batch.len; ++t)
        positions[i * batch.len + t] = static_cast<int>(t);
    Tensor tok = embedding(token_, batch.token_ids, {batch.batch, batch.len});
    Tensor pos = embedding(position_, positions, {batch.batch, batch.len});
    return layer_norm(add(tok, pos), norm_g_, norm_b_);
  }

  HiddenStack encode(const EncodedBatch& batch) const {
    HiddenStack stack;
    stack.mask = Tensor::from({batch.batch, batch.len}, batch.pad_mask);
    stack.states.push_back(embed(batch));
    for (const auto& layer : layers_) {
      stack.states.push_back(layer.forward(stack.states.back(), batch.pad_mask));
    }
    return stack;
  }

 private:
  BackboneConfig cfg_;
  Tensor token_, position_, norm_g_, norm_b_;
  std::vector<EncoderBlock> layers_;
};

}  // namespace kadapter
