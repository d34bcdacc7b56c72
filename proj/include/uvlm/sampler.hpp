#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/visual.hpp"

namespace uvlm {

struct BatchItem {
  Modality modality = Modality::image;
  int index = 0;  // position in that modality's pool
};

using Batch = std::vector<BatchItem>;

// One epoch of mixed batches: pools are shuffled once, then each batch draws
// from both modalities in proportion to what remains (at least one of each
// while both pools still have items). Every pool item appears exactly once.
inline std::vector<Batch> mixed_batches(int n_images, int n_videos, int batch_size, Rng& rng) {
  require(n_images >= 0 && n_videos >= 0, "sampler: negative pool size");
  require(n_images + n_videos > 0, "sampler: both pools empty");
  require(batch_size >= 1, "sampler: batch size must be positive");
  require(batch_size >= 2 || n_images == 0 || n_videos == 0,
          "sampler: batch size must be at least 2 to mix two non-empty pools");

  std::vector<int> images(static_cast<size_t>(n_images));
  std::iota(images.begin(), images.end(), 0);
  rng.shuffle(images);
  std::vector<int> videos(static_cast<size_t>(n_videos));
  std::iota(videos.begin(), videos.end(), 0);
  rng.shuffle(videos);

  std::vector<Batch> out;
  size_t ii = 0, vi = 0;
  while (ii < images.size() || vi < videos.size()) {
    int rem_i = int(images.size() - ii);
    int rem_v = int(videos.size() - vi);
    int b = std::min(batch_size, rem_i + rem_v);

    int k_i;
    if (rem_i == 0 || rem_v == 0) {
      k_i = rem_v == 0 ? b : 0;
    } else {
      k_i = int(std::llround(double(b) * double(rem_i) / double(rem_i + rem_v)));
      k_i = std::max(1, std::min(k_i, b - 1));
      k_i = std::min(k_i, rem_i);
      if (b - k_i > rem_v) k_i = b - rem_v;
    }

    Batch batch;
    for (int n = 0; n < k_i; ++n) batch.push_back({Modality::image, images[ii++]});
    for (int n = 0; n < b - k_i; ++n) batch.push_back({Modality::video, videos[vi++]});
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace uvlm
