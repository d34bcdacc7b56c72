#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/sha256.hpp"
#include "uvlm/tensor.hpp"

namespace uvlm {

// Model geometry shared by every module. Paper-scale values appear in the
// trailing comments for provenance; the fields hold desk-scale defaults.
struct ModelDims {
  int image_size = 32;  // full scale: 224
  int channels = 3;
  int patch = 8;        // full scale: 14
  int d_v = 32;         // full scale: 1024
  int enc_blocks = 2;   // full scale: 24
  int enc_heads = 4;
  int d = 64;           // full scale: 4096 (7B-class LM)
  int lm_blocks = 2;    // full scale: 32
  int lm_heads = 4;
  int context = 256;    // full scale: 2048
  int vocab_size = 256; // full scale: ~32000
  int text_context = 64;
  int frames_k = 8;
  int select_layer = -2;

  int patches_per_side() const { return image_size / patch; }
  int n_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch * patch * channels; }
  int enc_hidden() const { return 4 * d_v; }
  int lm_hidden() const { return 4 * d; }

  void validate() const {
    require(image_size > 0 && channels > 0 && patch > 0 && image_size % patch == 0,
            "model dims: patch must divide image size");
    require(d_v > 0 && d_v % enc_heads == 0, "model dims: enc_heads must divide d_v");
    require(d > 0 && d % lm_heads == 0, "model dims: lm_heads must divide d");
    require(enc_blocks >= 1 && lm_blocks >= 1, "model dims: at least one block per stack");
    require(vocab_size > 8 && context > 8 && text_context > 2, "model dims: degenerate sizes");
    require(frames_k >= 1, "model dims: frames_k must be positive");
    require(select_layer <= -1 && select_layer >= -enc_blocks,
            "model dims: select_layer must be in [-" + std::to_string(enc_blocks) + ",-1]");
  }
};

// Ordered, named collection of parameter tensors. Order is the serialization
// and optimizer-slot order, so construction must be deterministic.
struct ParamGroup {
  std::string name;
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& item_name, Tensor t) {
    for (const auto& [n, _] : items)
      require(n != item_name, "duplicate parameter name " + name + "/" + item_name);
    items.emplace_back(item_name, t);
    return t;
  }

  Tensor find(const std::string& item_name) const {
    for (const auto& [n, t] : items)
      if (n == item_name) return t;
    throw InvalidArgument("no parameter named " + name + "/" + item_name);
  }

  void set_trainable(bool v) {
    for (auto& [_, t] : items) t.set_requires_grad(v);
  }

  bool trainable() const {
    bool any = false;
    for (const auto& [_, t] : items) any = any || t.requires_grad();
    return any;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [_, t] : items) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : items) t.zero_grad();
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [_, t] : items) n += t.size();
    return n;
  }

  // Content hash over names, shapes, and raw little-endian data; the freeze
  // contract compares these before and after training.
  std::string fingerprint() const {
    Sha256 h;
    for (const auto& [n, t] : items) {
      h.update(n.data(), n.size());
      for (int d : t.shape()) {
        uint32_t u = uint32_t(d);
        unsigned char b[4] = {uint8_t(u), uint8_t(u >> 8), uint8_t(u >> 16), uint8_t(u >> 24)};
        h.update(b, 4);
      }
      for (float v : t.data()) {
        uint32_t u = std::bit_cast<uint32_t>(v);
        unsigned char b[4] = {uint8_t(u), uint8_t(u >> 8), uint8_t(u >> 16), uint8_t(u >> 24)};
        h.update(b, 4);
      }
    }
    return h.hex_digest();
  }
};

// Copies parameter values between groups of identical layout (the video
// tower's phase-2 initialization from the image tower).
inline void copy_group_data(const ParamGroup& src, ParamGroup& dst) {
  require(src.items.size() == dst.items.size(),
          "group copy: " + src.name + " and " + dst.name + " differ in size");
  for (size_t i = 0; i < src.items.size(); ++i) {
    require(src.items[i].second.shape() == dst.items[i].second.shape(),
            "group copy: shape mismatch at " + src.items[i].first);
    dst.items[i].second.data() = src.items[i].second.data();
  }
}

// Creates named parameters with the pinned initialization scheme: truncated
// normal (sigma 0.02, clipped at two sigma) for weights, zeros for biases and
// layernorm offsets, ones for layernorm gains.
class ParamBuilder {
 public:
  ParamBuilder(ParamGroup& group, Rng& rng) : group_(group), rng_(rng) {}

  Tensor weight(const std::string& name, Shape shape) {
    std::vector<float> vals(size_t(shape_numel(shape)));
    for (auto& v : vals) v = float(rng_.truncated_normal(0.02));
    return group_.add(name, Tensor::from_data(std::move(shape), std::move(vals), true));
  }

  Tensor zeros(const std::string& name, Shape shape) {
    return group_.add(name, Tensor::zeros(std::move(shape), true));
  }

  Tensor ones(const std::string& name, Shape shape) {
    return group_.add(name, Tensor::filled(std::move(shape), 1.0f, true));
  }

 private:
  ParamGroup& group_;
  Rng& rng_;
};

struct LinearParams {
  Tensor w, b;

  static LinearParams make(ParamBuilder& pb, const std::string& prefix, int in, int out) {
    return {pb.weight(prefix + ".w", {in, out}), pb.zeros(prefix + ".b", {out})};
  }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, w), b); }
};

// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
struct BlockParams {
  Tensor ln1_g, ln1_b;
  LinearParams q, k, v, o;
  Tensor ln2_g, ln2_b;
  LinearParams fc1, fc2;

  static BlockParams make(ParamBuilder& pb, const std::string& prefix, int d, int hidden) {
    BlockParams p;
    p.ln1_g = pb.ones(prefix + ".ln1.g", {d});
    p.ln1_b = pb.zeros(prefix + ".ln1.b", {d});
    p.q = LinearParams::make(pb, prefix + ".q", d, d);
    p.k = LinearParams::make(pb, prefix + ".k", d, d);
    p.v = LinearParams::make(pb, prefix + ".v", d, d);
    p.o = LinearParams::make(pb, prefix + ".o", d, d);
    p.ln2_g = pb.ones(prefix + ".ln2.g", {d});
    p.ln2_b = pb.zeros(prefix + ".ln2.b", {d});
    p.fc1 = LinearParams::make(pb, prefix + ".fc1", d, hidden);
    p.fc2 = LinearParams::make(pb, prefix + ".fc2", hidden, d);
    return p;
  }

  Tensor forward(const Tensor& x, int heads, bool causal) const {
    Tensor n1 = layernorm(x, ln1_g, ln1_b);
    Tensor att = o(attention(q(n1), k(n1), v(n1), heads, causal));
    Tensor h = add(x, att);
    Tensor n2 = layernorm(h, ln2_g, ln2_b);
    return add(h, fc2(gelu(fc1(n2))));
  }
};

}  // namespace uvlm
