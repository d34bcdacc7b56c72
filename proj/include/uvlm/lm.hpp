#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uvlm/conversation.hpp"
#include "uvlm/encoders.hpp"
#include "uvlm/nn.hpp"
#include "uvlm/tensor.hpp"
#include "uvlm/tokenizer.hpp"

namespace uvlm {

// Two fully connected layers with a GeLU between them, applied row-wise. The
// one parameter set serves image and video features alike.
struct ProjectionParams {
  LinearParams l1;  // d_v -> d
  LinearParams l2;  // d -> d

  static ProjectionParams make(ParamBuilder& pb, const ModelDims& dims) {
    ProjectionParams p;
    p.l1 = LinearParams::make(pb, "proj1", dims.d_v, dims.d);
    p.l2 = LinearParams::make(pb, "proj2", dims.d, dims.d);
    return p;
  }
};

inline Tensor project(const ProjectionParams& proj, const Tensor& visual_tokens) {
  require(visual_tokens.cols() == proj.l1.w.rows(),
          "project: feature width " + std::to_string(visual_tokens.cols()) +
              " does not match projection input " + std::to_string(proj.l1.w.rows()));
  return proj.l2(gelu(proj.l1(visual_tokens)));
}

inline Tensor project(const ProjectionParams& proj, const VisualFeatures& feats) {
  return project(proj, feats.tokens);
}

// Decoder-only language model. The embedding table doubles as the output head
// (tied weights), so the head costs no extra parameters.
struct LmParams {
  Tensor embed;  // V x d
  Tensor pos;    // context x d
  std::vector<BlockParams> blocks;
  Tensor lnf_g, lnf_b;

  static LmParams make(ParamBuilder& pb, const ModelDims& dims) {
    LmParams lm;
    lm.embed = pb.weight("embed", {dims.vocab_size, dims.d});
    lm.pos = pb.weight("pos", {dims.context, dims.d});
    for (int b = 0; b < dims.lm_blocks; ++b)
      lm.blocks.push_back(BlockParams::make(pb, "block" + std::to_string(b), dims.d,
                                            dims.lm_hidden()));
    lm.lnf_g = pb.ones("lnf_g", {dims.d});
    lm.lnf_b = pb.zeros("lnf_b", {dims.d});
    return lm;
  }
};

// One multimodal input sequence: text rows embedded through the table, the
// single visual slot expanded into the projected rows, positionals added over
// the combined length. token_ids / answer_mask stay aligned to rows so the
// next-token targets can be read off directly (-1 and 0 on visual rows).
struct AssembledSequence {
  Tensor rows;  // L x d
  std::vector<uint8_t> visual;
  std::vector<int> token_ids;
  std::vector<uint8_t> answer_mask;

  int length() const { return int(token_ids.size()); }
};

inline AssembledSequence assemble(const LmParams& lm, const ModelDims& dims,
                                  const std::vector<int>& ids,
                                  const std::vector<uint8_t>& mask, const Tensor* z_v) {
  require(!ids.empty(), "assemble: empty token sequence");
  require(mask.empty() || mask.size() == ids.size(),
          "assemble: mask length does not match token count");

  int slot = -1;
  int n_vis = 0;
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == Vocabulary::kVis) {
      slot = int(i);
      ++n_vis;
    }
  if (z_v != nullptr) {
    require(n_vis == 1, "assemble: visual input present, expected exactly one <VIS> slot, found " +
                            std::to_string(n_vis));
    require(z_v->cols() == dims.d, "assemble: projected width does not match lm width");
  } else {
    require(n_vis == 0, "assemble: <VIS> slot present but no visual input given");
  }

  AssembledSequence seq;
  std::vector<Tensor> parts;
  auto embed_span = [&](size_t from, size_t to) {
    if (from >= to) return;
    std::vector<int> span(ids.begin() + std::ptrdiff_t(from), ids.begin() + std::ptrdiff_t(to));
    parts.push_back(embedding(lm.embed, span));
    for (size_t i = from; i < to; ++i) {
      seq.visual.push_back(0);
      seq.token_ids.push_back(ids[i]);
      seq.answer_mask.push_back(mask.empty() ? uint8_t(0) : mask[i]);
    }
  };

  if (z_v == nullptr) {
    embed_span(0, ids.size());
  } else {
    embed_span(0, size_t(slot));
    parts.push_back(*z_v);
    for (int r = 0; r < z_v->rows(); ++r) {
      seq.visual.push_back(1);
      seq.token_ids.push_back(-1);
      seq.answer_mask.push_back(0);
    }
    embed_span(size_t(slot) + 1, ids.size());
  }

  Tensor stacked = parts.size() == 1 ? parts[0] : concat_rows(parts);
  require(stacked.rows() <= dims.context,
          "assemble: sequence length " + std::to_string(stacked.rows()) +
              " exceeds context window " + std::to_string(dims.context));
  seq.rows = add_positional(stacked, lm.pos);
  return seq;
}

inline Tensor forward_lm(const LmParams& lm, const ModelDims& dims, const AssembledSequence& seq) {
  require(seq.length() >= 1, "forward_lm: empty sequence");
  require(seq.length() <= dims.context,
          "forward_lm: sequence length " + std::to_string(seq.length()) +
              " exceeds context window " + std::to_string(dims.context));
  Tensor x = seq.rows;
  for (const BlockParams& block : lm.blocks) x = block.forward(x, dims.lm_heads, /*causal=*/true);
  x = layernorm(x, lm.lnf_g, lm.lnf_b);
  return matmul(x, lm.embed, /*transpose_b=*/true);
}

// Mean NLL of the answer tokens under teacher forcing: logits at row i are
// scored against the token at row i+1 wherever that row is a masked answer
// position.
inline Tensor lm_loss(const LmParams& lm, const ModelDims& dims, const AssembledSequence& seq) {
  Tensor logits = forward_lm(lm, dims, seq);
  int len = seq.length();
  std::vector<int> targets(size_t(len), 0);
  std::vector<uint8_t> mask(size_t(len), 0);
  for (int i = 0; i + 1 < len; ++i)
    if (!seq.visual[size_t(i) + 1] && seq.answer_mask[size_t(i) + 1]) {
      targets[size_t(i)] = seq.token_ids[size_t(i) + 1];
      mask[size_t(i)] = 1;
    }
  return masked_cross_entropy(logits, targets, mask);
}

enum class DecodeMode { greedy, sample };

// Extends the prompt token by token until EOS or max_new, re-running the full
// forward each step, and returns only the generated suffix (EOS excluded).
inline std::vector<int> generate(const LmParams& lm, const ModelDims& dims,
                                 const std::vector<int>& prompt_ids, const Tensor* z_v,
                                 int max_new = 32, DecodeMode mode = DecodeMode::greedy,
                                 double temperature = 1.0, Rng* rng = nullptr) {
  require(max_new >= 0, "generate: max_new must be non-negative");
  require(mode == DecodeMode::greedy || rng != nullptr,
          "generate: sampling requires an rng");
  require(mode == DecodeMode::greedy || temperature > 0,
          "generate: sampling temperature must be positive");

  std::vector<int> ids = prompt_ids;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    AssembledSequence seq = assemble(lm, dims, ids, {}, z_v);
    Tensor logits = forward_lm(lm, dims, seq);
    int v = logits.cols();
    const float* row = logits.data().data() + size_t(logits.rows() - 1) * size_t(v);

    int next = 0;
    if (mode == DecodeMode::greedy) {
      for (int j = 1; j < v; ++j)
        if (row[size_t(j)] > row[size_t(next)]) next = j;
    } else {
      double mx = row[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, double(row[size_t(j)]));
      std::vector<double> p(static_cast<size_t>(v));
      double z = 0;
      for (int j = 0; j < v; ++j) {
        p[size_t(j)] = std::exp((double(row[size_t(j)]) - mx) / temperature);
        z += p[size_t(j)];
      }
      double u = rng->uniform() * z;
      double acc = 0;
      next = v - 1;
      for (int j = 0; j < v; ++j) {
        acc += p[size_t(j)];
        if (u < acc) {
          next = j;
          break;
        }
      }
    }

    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

}  // namespace uvlm
