#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "uvlm/sampler.hpp"

using namespace uvlm;

namespace {

struct EpochStats {
  std::multiset<int> images, videos;
  int batches = 0;
};

EpochStats audit(const std::vector<Batch>& epoch) {
  EpochStats st;
  st.batches = int(epoch.size());
  for (const Batch& b : epoch)
    for (const BatchItem& item : b)
      (item.modality == Modality::image ? st.images : st.videos).insert(item.index);
  return st;
}

std::multiset<int> full_pool(int n) {
  std::multiset<int> s;
  for (int i = 0; i < n; ++i) s.insert(i);
  return s;
}

}  // namespace

TEST_CASE("an epoch covers both pools exactly once") {
  Rng rng(1);
  for (auto [ni, nv, bs] : {std::array<int, 3>{100, 100, 8},
                            {37, 89, 8},
                            {90, 10, 10},
                            {3, 3, 2},
                            {1, 1, 2}}) {
    Rng r(rng.below(1u << 30));
    EpochStats st = audit(mixed_batches(ni, nv, bs, r));
    CHECK(st.images == full_pool(ni));
    CHECK(st.videos == full_pool(nv));
    CHECK(st.batches == (ni + nv + bs - 1) / bs);
  }
}

TEST_CASE("batches mix modalities while both pools have remainder") {
  Rng rng(2);
  std::vector<Batch> epoch = mixed_batches(100, 100, 8, rng);
  int images_left = 100, videos_left = 100;
  for (const Batch& b : epoch) {
    int k_i = 0, k_v = 0;
    for (const BatchItem& item : b) (item.modality == Modality::image ? k_i : k_v)++;
    if (images_left > 0 && videos_left > 0) {
      CHECK(k_i >= 1);
      CHECK(k_v >= 1);
    }
    images_left -= k_i;
    videos_left -= k_v;
  }
  CHECK(images_left == 0);
  CHECK(videos_left == 0);
}

TEST_CASE("modality counts track the remaining pool proportions") {
  Rng rng(3);
  std::vector<Batch> epoch = mixed_batches(90, 10, 10, rng);
  // 90:10 at batch 10 → every full batch should hold exactly one video
  for (size_t i = 0; i + 1 < epoch.size(); ++i) {
    int k_v = 0;
    for (const BatchItem& item : epoch[i])
      if (item.modality == Modality::video) ++k_v;
    CHECK(k_v == 1);
  }

  Rng rng2(3);
  std::vector<Batch> balanced = mixed_batches(100, 100, 8, rng2);
  for (size_t i = 0; i + 1 < balanced.size(); ++i) {
    int k_i = 0;
    for (const BatchItem& item : balanced[i])
      if (item.modality == Modality::image) ++k_i;
    CHECK(k_i == 4);
  }
}

TEST_CASE("a lone pool fills whole batches without the mixing rule") {
  Rng rng(4);
  std::vector<Batch> epoch = mixed_batches(7, 0, 3, rng);
  REQUIRE(epoch.size() == 3);
  CHECK(epoch[0].size() == 3);
  CHECK(epoch[2].size() == 1);
  for (const Batch& b : epoch)
    for (const BatchItem& item : b) CHECK(item.modality == Modality::image);

  Rng rng2(4);
  std::vector<Batch> videos = mixed_batches(0, 5, 1, rng2);
  CHECK(videos.size() == 5);
}

TEST_CASE("the same seed reproduces the same batch sequence") {
  Rng a(9), b(9), c(10);
  std::vector<Batch> ea = mixed_batches(40, 25, 8, a);
  std::vector<Batch> eb = mixed_batches(40, 25, 8, b);
  std::vector<Batch> ec = mixed_batches(40, 25, 8, c);
  REQUIRE(ea.size() == eb.size());
  bool identical = true, differs_somewhere = false;
  for (size_t i = 0; i < ea.size(); ++i)
    for (size_t j = 0; j < ea[i].size(); ++j) {
      identical = identical && ea[i][j].modality == eb[i][j].modality &&
                  ea[i][j].index == eb[i][j].index;
      if (i < ec.size() && j < ec[i].size())
        differs_somewhere = differs_somewhere || ea[i][j].index != ec[i][j].index ||
                            ea[i][j].modality != ec[i][j].modality;
    }
  CHECK(identical);
  CHECK(differs_somewhere);
}

TEST_CASE("invalid sampler arguments are rejected") {
  Rng rng(5);
  CHECK_THROWS_AS(mixed_batches(10, 10, 1, rng), InvalidArgument);
  CHECK_THROWS_AS(mixed_batches(0, 0, 4, rng), InvalidArgument);
  CHECK_THROWS_AS(mixed_batches(-1, 5, 4, rng), InvalidArgument);
  CHECK_THROWS_AS(mixed_batches(5, 5, 0, rng), InvalidArgument);
}
