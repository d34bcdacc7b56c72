#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/nn.hpp"
#include "uvlm/optim.hpp"
#include "uvlm/tensor.hpp"
#include "uvlm/visual.hpp"

namespace uvlm {

// Patch-transformer tower shared by the image and video paths. The two
// towers have identical geometry, so video frames can be encoded by either.
struct TowerParams {
  LinearParams patch;
  Tensor pos;
  std::vector<BlockParams> blocks;

  static TowerParams make(ParamBuilder& pb, const ModelDims& dims) {
    TowerParams t;
    t.patch = LinearParams::make(pb, "patch", dims.patch_dim(), dims.d_v);
    t.pos = pb.weight("pos", {dims.n_patches(), dims.d_v});
    for (int b = 0; b < dims.enc_blocks; ++b)
      t.blocks.push_back(BlockParams::make(pb, "block" + std::to_string(b), dims.d_v,
                                           dims.enc_hidden()));
    return t;
  }
};

struct VisualFeatures {
  Tensor tokens;  // n_tokens x d_v
  Modality source = Modality::image;
  int select_layer = -1;
};

// Runs one frame through the tower and returns the output of the block picked
// by select_layer (-1 = last, -2 = second to last, ...).
inline Tensor encode_frame(const TowerParams& tower, const ModelDims& dims,
                           const std::vector<float>& frame, int select_layer) {
  int n_blocks = int(tower.blocks.size());
  require(select_layer <= -1 && select_layer >= -n_blocks,
          "select_layer " + std::to_string(select_layer) + " out of range for " +
              std::to_string(n_blocks) + " blocks");
  std::vector<float> patches = patchify(frame, dims.image_size, dims.image_size, dims.channels,
                                        dims.patch);
  Tensor x = Tensor::from_data({dims.n_patches(), dims.patch_dim()}, std::move(patches));
  x = add_positional(tower.patch(x), tower.pos);
  int keep = n_blocks + select_layer;  // block outputs are indexed from zero
  Tensor selected;
  for (int b = 0; b < n_blocks; ++b) {
    x = tower.blocks[size_t(b)].forward(x, dims.enc_heads, /*causal=*/false);
    if (b == keep) selected = x;
  }
  return selected;
}

inline VisualFeatures encode_image(const TowerParams& tower, const ModelDims& dims,
                                   const VisualInput& input, int select_layer) {
  require(input.tag == Modality::image, "encode_image requires an image input");
  require(input.height == dims.image_size && input.width == dims.image_size &&
              input.channels == dims.channels,
          "image geometry does not match model dims");
  return {encode_frame(tower, dims, input.frames[0], select_layer), Modality::image, select_layer};
}

enum class TokenMode { pooled, per_frame };

inline TokenMode token_mode_from(const std::string& s) {
  if (s == "pooled") return TokenMode::pooled;
  if (s == "per_frame") return TokenMode::per_frame;
  throw InvalidArgument("unknown token mode: " + s);
}

inline VisualFeatures encode_video(const TowerParams& tower, const ModelDims& dims,
                                   const VisualInput& input, int k, int select_layer,
                                   TokenMode mode) {
  require(input.tag == Modality::video, "encode_video requires a video input");
  require(input.height == dims.image_size && input.width == dims.image_size &&
              input.channels == dims.channels,
          "video geometry does not match model dims");
  std::vector<int> idx = sample_frames(input, k);
  std::vector<Tensor> per_frame;
  per_frame.reserve(idx.size());
  for (int fi : idx)
    per_frame.push_back(encode_frame(tower, dims, input.frames[size_t(fi)], select_layer));
  if (mode == TokenMode::per_frame)
    return {concat_rows(per_frame), Modality::video, select_layer};
  // Balanced-tree reduction: with identical frames and a power-of-two k the
  // pooled mean is bit-identical to a single-frame encoding.
  std::vector<Tensor> level = std::move(per_frame);
  while (level.size() > 1) {
    std::vector<Tensor> next;
    for (size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(add(level[i], level[i + 1]));
    if (level.size() % 2) next.push_back(level.back());
    level = std::move(next);
  }
  return {scale(level[0], 1.0f / float(k)), Modality::video, select_layer};
}

// ---------------------------------------------------------------------------
// Text tower for contrastive alignment
// ---------------------------------------------------------------------------

struct TextTowerParams {
  Tensor embed;
  Tensor pos;
  std::vector<BlockParams> blocks;

  static TextTowerParams make(ParamBuilder& pb, const ModelDims& dims) {
    TextTowerParams t;
    t.embed = pb.weight("embed", {dims.vocab_size, dims.d_v});
    t.pos = pb.weight("pos", {dims.text_context, dims.d_v});
    for (int b = 0; b < dims.enc_blocks; ++b)
      t.blocks.push_back(BlockParams::make(pb, "block" + std::to_string(b), dims.d_v,
                                           dims.enc_hidden()));
    return t;
  }
};

inline Tensor encode_text(const TextTowerParams& tower, const ModelDims& dims,
                          const std::vector<int>& ids) {
  require(!ids.empty(), "encode_text: empty token sequence");
  require(int(ids.size()) <= dims.text_context,
          "encode_text: " + std::to_string(ids.size()) + " tokens exceed text context " +
              std::to_string(dims.text_context));
  Tensor x = add_positional(embedding(tower.embed, ids), tower.pos);
  for (const auto& b : tower.blocks) x = b.forward(x, dims.enc_heads, /*causal=*/false);
  return mean_rows(x);
}

// ---------------------------------------------------------------------------
// Contrastive alignment (InfoNCE) and the MAE baseline
// ---------------------------------------------------------------------------

struct CaptionPair {
  VisualInput visual;
  std::vector<int> caption_ids;
};

struct AlignConfig {
  int batch_size = 32;
  int epochs = 12;
  double lr = 1e-3;
  double warmup_ratio = 0.03;
  double temperature = 0.07;  // fixed, not learned
  int frames_k = 8;
};

using StepLogger = std::function<void(int step, double loss)>;

// Symmetric InfoNCE over a batch of pooled visual and text features.
inline Tensor info_nce(const Tensor& visual_rows, const Tensor& text_rows, double temperature) {
  int b = visual_rows.rows();
  require(text_rows.rows() == b, "info_nce: batch size mismatch");
  Tensor vn = l2_normalize_rows(visual_rows);
  Tensor tn = l2_normalize_rows(text_rows);
  Tensor logits = scale(matmul(vn, tn, /*transpose_b=*/true), float(1.0 / temperature));
  std::vector<int> diag(static_cast<size_t>(b));
  std::iota(diag.begin(), diag.end(), 0);
  std::vector<uint8_t> full(size_t(b), 1);
  Tensor l_v2t = masked_cross_entropy(logits, diag, full);
  Tensor l_t2v = masked_cross_entropy(transpose(logits), diag, full);
  return scale(add(l_v2t, l_t2v), 0.5f);
}

namespace detail {

inline Tensor pooled_visual_row(const TowerParams& tower, const ModelDims& dims,
                                const VisualInput& v, int frames_k) {
  Tensor tokens = v.tag == Modality::image
                      ? encode_image(tower, dims, v, dims.select_layer).tokens
                      : encode_video(tower, dims, v, frames_k, dims.select_layer,
                                     TokenMode::pooled).tokens;
  return mean_rows(tokens);
}

// One InfoNCE epoch over shuffled pairs; returns mean loss across batches.
inline double align_epoch(const TowerParams& tower, const TextTowerParams& text,
                          const ModelDims& dims, const std::vector<CaptionPair>& pairs,
                          const AlignConfig& cfg, AdamW& opt, const Schedule& sched, Rng& rng,
                          int& step, const StepLogger& log) {
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), size_t(0));
  rng.shuffle(order);
  double total = 0;
  int batches = 0;
  for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
    size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
    if (end - start < 2) {
      std::cerr << "align: skipping degenerate batch of " << (end - start)
                << " pair(s); InfoNCE needs at least 2\n";
      continue;
    }
    std::vector<Tensor> vis, txt;
    for (size_t i = start; i < end; ++i) {
      const CaptionPair& p = pairs[order[i]];
      vis.push_back(pooled_visual_row(tower, dims, p.visual, cfg.frames_k));
      txt.push_back(encode_text(text, dims, p.caption_ids));
    }
    Tensor loss = info_nce(concat_rows(vis), concat_rows(txt), cfg.temperature);
    opt.zero_grad();
    backward(loss);
    opt.step(sched.lr_at(step));
    ++step;
    total += double(loss.item());
    ++batches;
    if (log) log(step, double(loss.item()));
  }
  require(batches > 0, "align: corpus too small for any batch");
  return total / batches;
}

}  // namespace detail

struct AlignStats {
  double phase1_first_loss = 0, phase1_last_loss = 0;
  double phase2_first_loss = 0, phase2_last_loss = 0;
};

// Two-phase alignment pretraining. Phase 1 binds the image tower and the text
// tower with symmetric InfoNCE; phase 2 initializes the video tower from the
// image tower and aligns it against the frozen text space.
inline AlignStats align_pretrain(ParamGroup& image_group, TowerParams& image_tower,
                                 ParamGroup& video_group, TowerParams& video_tower,
                                 ParamGroup& text_group, TextTowerParams& text_tower,
                                 const ModelDims& dims, const std::vector<CaptionPair>& image_pairs,
                                 const std::vector<CaptionPair>& video_pairs,
                                 const AlignConfig& cfg, Rng& rng, const StepLogger& log = {}) {
  require(!image_pairs.empty(), "align: image pair corpus is empty");
  require(!video_pairs.empty(), "align: video pair corpus is empty");
  AlignStats stats;

  auto steps_per_epoch = [&](size_t n) { return int((n + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size)); };

  {
    image_group.set_trainable(true);
    text_group.set_trainable(true);
    std::vector<Tensor> params = image_group.tensors();
    for (const Tensor& t : text_group.tensors()) params.push_back(t);
    AdamW opt(params);
    Schedule sched{cfg.lr, std::max(1, cfg.epochs * steps_per_epoch(image_pairs.size())),
                   cfg.warmup_ratio};
    int step = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
      double mean = detail::align_epoch(image_tower, text_tower, dims, image_pairs, cfg, opt,
                                        sched, rng, step, log);
      if (e == 0) stats.phase1_first_loss = mean;
      stats.phase1_last_loss = mean;
    }
  }

  {
    copy_group_data(image_group, video_group);
    text_group.set_trainable(false);
    image_group.set_trainable(false);
    video_group.set_trainable(true);
    AdamW opt(video_group.tensors());
    Schedule sched{cfg.lr, std::max(1, cfg.epochs * steps_per_epoch(video_pairs.size())),
                   cfg.warmup_ratio};
    int step = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
      double mean = detail::align_epoch(video_tower, text_tower, dims, video_pairs, cfg, opt,
                                        sched, rng, step, log);
      if (e == 0) stats.phase2_first_loss = mean;
      stats.phase2_last_loss = mean;
    }
  }
  return stats;
}

struct MaeConfig {
  double mask_ratio = 0.5;
  int batch_size = 32;
  int epochs = 12;
  double lr = 1e-3;
  double warmup_ratio = 0.03;
};

struct MaeStats {
  std::vector<double> loss_trace;  // one entry per step
};

// Masked-autoencoder pretraining of an image tower: mask a random patch
// subset, substitute a learned mask token, reconstruct masked pixels with an
// affine decoder, squared error on masked patches only. The tower never sees
// language; it is the "separated representation" arm of the ablation.
inline MaeStats mae_pretrain(ParamGroup& image_group, TowerParams& tower, const ModelDims& dims,
                             const std::vector<VisualInput>& images, const MaeConfig& cfg,
                             Rng& rng, const StepLogger& log = {}) {
  require(!images.empty(), "mae: image corpus is empty");
  require(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0,
          "mae: mask ratio must lie strictly between 0 and 1");
  int n_patches = dims.n_patches();
  int n_masked = std::min(n_patches - 1, std::max(1, int(std::lround(cfg.mask_ratio * n_patches))));

  ParamGroup aux{"mae_aux", {}};
  ParamBuilder pb(aux, rng);
  Tensor mask_token = pb.weight("mask_token", {1, dims.d_v});
  LinearParams decoder = LinearParams::make(pb, "decoder", dims.d_v, dims.patch_dim());

  image_group.set_trainable(true);
  std::vector<Tensor> params = image_group.tensors();
  for (const Tensor& t : aux.tensors()) params.push_back(t);
  AdamW opt(params);

  int steps_per_epoch = int((images.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));
  Schedule sched{cfg.lr, std::max(1, cfg.epochs * steps_per_epoch), cfg.warmup_ratio};

  MaeStats stats;
  int step = 0;
  std::vector<size_t> order(images.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::vector<int> patch_ids(static_cast<size_t>(n_patches));

  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
      std::vector<Tensor> losses;
      for (size_t i = start; i < end; ++i) {
        const VisualInput& img = images[order[i]];
        require(img.tag == Modality::image, "mae: corpus must be image-only");
        std::iota(patch_ids.begin(), patch_ids.end(), 0);
        rng.shuffle(patch_ids);

        std::vector<float> keep_mask(size_t(n_patches) * size_t(dims.d_v), 0.0f);
        std::vector<float> pix_mask(size_t(n_patches) * size_t(dims.patch_dim()), 0.0f);
        for (int pi = 0; pi < n_patches; ++pi) {
          bool masked = false;
          for (int mj = 0; mj < n_masked; ++mj) masked = masked || patch_ids[size_t(mj)] == pi;
          if (!masked)
            for (int c = 0; c < dims.d_v; ++c)
              keep_mask[size_t(pi) * size_t(dims.d_v) + size_t(c)] = 1.0f;
          else
            for (int c = 0; c < dims.patch_dim(); ++c)
              pix_mask[size_t(pi) * size_t(dims.patch_dim()) + size_t(c)] = 1.0f;
        }
        Tensor keep = Tensor::from_data({n_patches, dims.d_v}, std::move(keep_mask));
        Tensor drop = Tensor::from_data({n_patches, dims.d_v}, [&] {
          std::vector<float> inv(size_t(n_patches) * size_t(dims.d_v));
          for (size_t q = 0; q < inv.size(); ++q) inv[q] = 1.0f - keep.data()[q];
          return inv;
        }());
        Tensor pmask = Tensor::from_data({n_patches, dims.patch_dim()}, std::move(pix_mask));

        std::vector<float> patches = patchify(img.frames[0], dims.image_size, dims.image_size,
                                              dims.channels, dims.patch);
        Tensor target = Tensor::from_data({n_patches, dims.patch_dim()}, patches);
        Tensor tokens = tower.patch(Tensor::from_data({n_patches, dims.patch_dim()},
                                                      std::move(patches)));
        Tensor mask_rows = embedding(mask_token, std::vector<int>(size_t(n_patches), 0));
        Tensor mixed = add(mul(tokens, keep), mul(mask_rows, drop));
        Tensor x = add_positional(mixed, tower.pos);
        for (const auto& blk : tower.blocks) x = blk.forward(x, dims.enc_heads, false);
        Tensor diff = add(decoder(x), scale(target, -1.0f));
        Tensor sq = mul(mul(diff, diff), pmask);
        losses.push_back(scale(sum(sq), 1.0f / float(n_masked * dims.patch_dim())));
      }
      Tensor loss = weighted_sum(losses, std::vector<float>(losses.size(),
                                                            1.0f / float(losses.size())));
      opt.zero_grad();
      backward(loss);
      opt.step(sched.lr_at(step));
      ++step;
      stats.loss_trace.push_back(double(loss.item()));
      if (log) log(step, double(loss.item()));
    }
  }
  return stats;
}

// Mean matched-pair cosine minus mean unmatched cosine over two feature sets.
inline double alignment_gap(const std::vector<std::vector<float>>& a,
                            const std::vector<std::vector<float>>& b) {
  require(a.size() == b.size(), "alignment_gap: set sizes differ (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
  require(a.size() >= 2, "alignment_gap: need at least two pairs");
  auto cosine = [](const std::vector<float>& x, const std::vector<float>& y) {
    require(x.size() == y.size(), "alignment_gap: feature dimension mismatch");
    double dot = 0, nx = 1e-12, ny = 1e-12;
    for (size_t i = 0; i < x.size(); ++i) {
      dot += double(x[i]) * double(y[i]);
      nx += double(x[i]) * double(x[i]);
      ny += double(y[i]) * double(y[i]);
    }
    return dot / std::sqrt(nx * ny);
  };
  double matched = 0, unmatched = 0;
  size_t n = a.size();
  for (size_t i = 0; i < n; ++i) matched += cosine(a[i], b[i]);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      if (i != j) unmatched += cosine(a[i], b[j]);
  return matched / double(n) - unmatched / double(n * (n - 1));
}

}  // namespace uvlm
