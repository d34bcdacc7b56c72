#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uvlm/common.hpp"
#include "uvlm/conversation.hpp"
#include "uvlm/tokenizer.hpp"
#include "uvlm/visual.hpp"

namespace uvlm {

// ---------------------------------------------------------------------------
// Glyph world: colored shapes on a black 32x32 canvas. Images place 1-3
// glyphs on a 4x4 cell grid; videos move a single glyph 2 px per frame in a
// cardinal direction while its brightness ramps up, so even a time-averaged
// encoding can tell the direction from the intensity gradient along the path.
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& glyph_colors() {
  static const std::vector<std::string> v = {"red", "green", "blue",
                                             "yellow", "purple", "orange"};
  return v;
}

inline std::array<float, 3> glyph_rgb(int color) {
  static const std::array<std::array<float, 3>, 6> table = {{{1.0f, 0.0f, 0.0f},
                                                             {0.0f, 1.0f, 0.0f},
                                                             {0.0f, 0.0f, 1.0f},
                                                             {1.0f, 1.0f, 0.0f},
                                                             {0.6f, 0.0f, 0.8f},
                                                             {1.0f, 0.55f, 0.0f}}};
  require(color >= 0 && color < int(table.size()), "glyph color index out of range");
  return table[size_t(color)];
}

inline const std::vector<std::string>& glyph_shapes() {
  static const std::vector<std::string> v = {"square", "circle", "triangle"};
  return v;
}

inline const std::vector<std::string>& glyph_directions() {
  static const std::vector<std::string> v = {"left", "right", "up", "down"};
  return v;
}

constexpr int kCanvas = 32;
constexpr int kCell = 8;
constexpr int kGridCells = (kCanvas / kCell) * (kCanvas / kCell);
constexpr int kStep = 2;  // px per frame of video motion

struct Glyph {
  int color = 0;
  int shape = 0;
};

struct ImageScene {
  std::vector<Glyph> glyphs;
  std::vector<int> cells;  // one grid cell per glyph, all distinct
};

struct VideoScene {
  Glyph glyph;
  int direction = 0;
  int frames = 8;
  int x0 = 0, y0 = 0;  // top-left of the glyph box in frame 0
};

namespace detail {

inline bool glyph_pixel(int shape, int r, int c) {
  switch (shape) {
    case 0:  // square with a 1 px margin
      return r >= 1 && r <= 6 && c >= 1 && c <= 6;
    case 1: {  // disc around the cell center
      float dr = float(r) - 3.5f, dc = float(c) - 3.5f;
      return dr * dr + dc * dc <= 12.25f;
    }
    default: {  // upward-pointing triangle
      if (r < 1 || r > 6) return false;
      float half = 0.5f * float(r);
      return std::abs(float(c) - 3.5f) <= half;
    }
  }
}

inline void draw_glyph(std::vector<float>& canvas, const Glyph& g, int x0, int y0,
                       float intensity) {
  std::array<float, 3> rgb = glyph_rgb(g.color);
  for (int r = 0; r < kCell; ++r)
    for (int c = 0; c < kCell; ++c) {
      if (!glyph_pixel(g.shape, r, c)) continue;
      int rr = y0 + r, cc = x0 + c;
      if (rr < 0 || rr >= kCanvas || cc < 0 || cc >= kCanvas) continue;
      size_t at = (size_t(rr) * kCanvas + size_t(cc)) * 3;
      for (int ch = 0; ch < 3; ++ch) canvas[at + size_t(ch)] = rgb[size_t(ch)] * intensity;
    }
}

}  // namespace detail

inline std::vector<float> render_image(const ImageScene& s) {
  require(!s.glyphs.empty() && s.glyphs.size() == s.cells.size(),
          "render_image: glyph/cell count mismatch");
  std::vector<float> canvas(size_t(kCanvas) * kCanvas * 3, 0.0f);
  int per_side = kCanvas / kCell;
  for (size_t i = 0; i < s.glyphs.size(); ++i) {
    int cell = s.cells[i];
    require(cell >= 0 && cell < kGridCells, "render_image: cell index out of range");
    detail::draw_glyph(canvas, s.glyphs[i], (cell % per_side) * kCell,
                       (cell / per_side) * kCell, 1.0f);
  }
  return canvas;
}

inline std::vector<std::vector<float>> render_video(const VideoScene& s) {
  require(s.frames >= 2, "render_video: need at least two frames");
  require(s.direction >= 0 && s.direction < 4, "render_video: bad direction");
  static const int dx[4] = {-kStep, kStep, 0, 0};
  static const int dy[4] = {0, 0, -kStep, kStep};
  std::vector<std::vector<float>> frames;
  for (int f = 0; f < s.frames; ++f) {
    std::vector<float> canvas(size_t(kCanvas) * kCanvas * 3, 0.0f);
    float ramp = 0.55f + 0.45f * float(f) / float(s.frames - 1);
    int x = s.x0 + dx[s.direction] * f;
    int y = s.y0 + dy[s.direction] * f;
    require(x >= 0 && y >= 0 && x + kCell <= kCanvas && y + kCell <= kCanvas,
            "render_video: glyph leaves the canvas");
    detail::draw_glyph(frames.emplace_back(std::move(canvas)), s.glyph, x, y, ramp);
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Captions and QA over a scene. Every word used here is in the vocabulary.
// ---------------------------------------------------------------------------

inline std::string glyph_term(const Glyph& g) {
  return glyph_colors()[size_t(g.color)] + " " + glyph_shapes()[size_t(g.shape)];
}

inline std::string image_caption(const ImageScene& s) {
  if (s.glyphs.size() == 1) return "a " + glyph_term(s.glyphs[0]);
  std::string out = "the image shows a " + glyph_term(s.glyphs[0]);
  for (size_t i = 1; i < s.glyphs.size(); ++i) out += " and a " + glyph_term(s.glyphs[i]);
  return out;
}

inline std::string video_caption(const VideoScene& s) {
  return "a " + glyph_term(s.glyph) + " moves " + glyph_directions()[size_t(s.direction)];
}

inline const std::vector<std::string>& count_words() {
  static const std::vector<std::string> v = {"one", "two", "three"};
  return v;
}

namespace detail {

inline Glyph absent_combo(const std::vector<Glyph>& present, Rng& rng) {
  for (;;) {
    Glyph g{int(rng.below(uint64_t(glyph_colors().size()))),
            int(rng.below(uint64_t(glyph_shapes().size())))};
    bool hit = false;
    for (const Glyph& p : present) hit = hit || (p.color == g.color && p.shape == g.shape);
    if (!hit) return g;
  }
}

inline Round existence_round(const std::vector<Glyph>& present, const std::string& medium,
                             Rng& rng) {
  bool positive = rng.below(2) == 0;
  Glyph probe = positive ? present[size_t(rng.below(uint64_t(present.size())))]
                         : absent_combo(present, rng);
  return {"is there a " + glyph_term(probe) + " in the " + medium, positive ? "yes" : "no"};
}

}  // namespace detail

inline Conversation image_qa(const ImageScene& s, int n_rounds, Rng& rng) {
  require(n_rounds >= 1 && n_rounds <= 3, "image_qa: rounds must be 1..3");
  std::vector<int> kinds = {0, 1, 2, 3};
  rng.shuffle(kinds);
  Conversation conv;
  for (int i = 0; i < n_rounds; ++i) {
    const Glyph& g = s.glyphs[size_t(rng.below(uint64_t(s.glyphs.size())))];
    switch (kinds[size_t(i)]) {
      case 0:
        conv.rounds.push_back({"what color is the " + glyph_shapes()[size_t(g.shape)],
                               glyph_colors()[size_t(g.color)]});
        break;
      case 1:
        conv.rounds.push_back({"what shape is the " + glyph_colors()[size_t(g.color)] + " one",
                               glyph_shapes()[size_t(g.shape)]});
        break;
      case 2:
        conv.rounds.push_back({"how many shapes are in the image",
                               count_words()[s.glyphs.size() - 1]});
        break;
      default:
        conv.rounds.push_back(detail::existence_round(s.glyphs, "image", rng));
    }
  }
  return conv;
}

inline Conversation video_qa(const VideoScene& s, int n_rounds, Rng& rng) {
  require(n_rounds >= 1 && n_rounds <= 3, "video_qa: rounds must be 1..3");
  std::vector<int> kinds = {0, 1, 2};
  rng.shuffle(kinds);
  Conversation conv;
  for (int i = 0; i < n_rounds; ++i) {
    switch (kinds[size_t(i)]) {
      case 0:
        conv.rounds.push_back({"which direction does the " +
                                   glyph_shapes()[size_t(s.glyph.shape)] + " move",
                               glyph_directions()[size_t(s.direction)]});
        break;
      case 1:
        conv.rounds.push_back({"what color is the " + glyph_shapes()[size_t(s.glyph.shape)],
                               glyph_colors()[size_t(s.glyph.color)]});
        break;
      default:
        conv.rounds.push_back(detail::existence_round({s.glyph}, "video", rng));
    }
  }
  return conv;
}

// ---------------------------------------------------------------------------
// Manifest records. `pair` links the matched image/video renderings of one
// scene in the alignment validation split; -1 everywhere else.
// ---------------------------------------------------------------------------

struct CorpusRecord {
  std::string id;
  Modality modality = Modality::image;
  std::string payload;  // path relative to the corpus root
  Conversation conv;
  std::vector<std::string> inventory;  // "{color} {shape}" per glyph present
  std::string split;                   // train | val | test
  std::string stage;                   // align | sft
  int pair = -1;
  std::string direction;  // videos only
};

struct CorpusManifest {
  std::filesystem::path root;
  std::vector<CorpusRecord> records;
};

inline void write_manifest(const CorpusManifest& m, const std::filesystem::path& path) {
  std::ofstream os = io::open_out(path);
  for (const CorpusRecord& r : m.records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["modality"] = modality_name(r.modality);
    j["payload"] = r.payload;
    nlohmann::json rounds = nlohmann::json::array();
    for (const Round& round : r.conv.rounds)
      rounds.push_back(nlohmann::json::array({round.question, round.answer}));
    j["rounds"] = rounds;
    j["inventory"] = r.inventory;
    j["split"] = r.split;
    j["stage"] = r.stage;
    j["pair"] = r.pair;
    j["direction"] = r.direction;
    os << j.dump() << "\n";
  }
  if (!os) throw Error("short write: " + path.string());
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is = io::open_in(path);
  CorpusManifest m;
  m.root = path.parent_path();
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    auto fail = [&](const std::string& what) -> void {
      throw FormatError(path.string() + " line " + std::to_string(lineno) + ": " + what);
    };
    for (const char* key : {"id", "modality", "payload", "rounds", "inventory", "split", "stage"})
      if (!j.contains(key)) fail(std::string("missing field \"") + key + "\"");
    CorpusRecord r;
    r.id = j["id"].get<std::string>();
    if (!seen.insert(r.id).second) fail("duplicate record id \"" + r.id + "\"");
    r.modality = modality_from(j["modality"].get<std::string>());
    r.payload = j["payload"].get<std::string>();
    for (const auto& round : j["rounds"]) {
      if (!round.is_array() || round.size() != 2) fail("malformed round");
      r.conv.rounds.push_back({round[0].get<std::string>(), round[1].get<std::string>()});
    }
    r.conv.validate();
    r.inventory = j["inventory"].get<std::vector<std::string>>();
    r.split = j["split"].get<std::string>();
    r.stage = j["stage"].get<std::string>();
    r.pair = j.value("pair", -1);
    r.direction = j.value("direction", std::string());
    m.records.push_back(std::move(r));
  }
  return m;
}

inline VisualInput load_visual(const CorpusManifest& m, const CorpusRecord& r) {
  return VisualInput::load(m.root / r.payload);
}

// ---------------------------------------------------------------------------
// Corpus generation. Every record draws from its own seed mixed from (seed,
// running index), so output is bit-identical however generation is split up.
// ---------------------------------------------------------------------------

struct CorpusConfig {
  int align_images = 256;
  int align_videos = 256;
  int align_val_pairs = 48;
  int sft_train_images = 384;
  int sft_train_videos = 256;
  int sft_test_images = 96;
  int sft_test_videos = 64;

  void validate() const {
    for (int n : {align_images, align_videos, align_val_pairs, sft_train_images,
                  sft_train_videos, sft_test_images, sft_test_videos})
      require(n >= 0, "corpus config: counts must be non-negative");
    require(align_images + align_videos + align_val_pairs + sft_train_images +
                    sft_train_videos + sft_test_images + sft_test_videos >
                0,
            "corpus config: empty corpus");
  }
};

namespace detail {

inline ImageScene sample_image_scene(Rng& rng) {
  ImageScene s;
  int k = 1 + int(rng.below(3));
  std::vector<int> colors(glyph_colors().size());
  std::iota(colors.begin(), colors.end(), 0);
  rng.shuffle(colors);
  std::vector<int> shapes(glyph_shapes().size());
  std::iota(shapes.begin(), shapes.end(), 0);
  rng.shuffle(shapes);
  std::vector<int> cells(kGridCells);
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(cells);
  for (int i = 0; i < k; ++i) {
    s.glyphs.push_back({colors[size_t(i)], shapes[size_t(i)]});
    s.cells.push_back(cells[size_t(i)]);
  }
  return s;
}

inline VideoScene sample_video_scene(Rng& rng) {
  VideoScene s;
  s.glyph = {int(rng.below(uint64_t(glyph_colors().size()))),
             int(rng.below(uint64_t(glyph_shapes().size())))};
  s.direction = int(rng.below(4));
  s.frames = 8 + int(rng.below(5));
  int span = kStep * (s.frames - 1);
  int slack = kCanvas - kCell - span;  // free room along the motion axis
  int along = int(rng.below(uint64_t(slack + 1)));
  int across = int(rng.below(kCanvas - kCell + 1));
  switch (s.direction) {
    case 0: s.x0 = along + span; s.y0 = across; break;  // left: start right of the span
    case 1: s.x0 = along; s.y0 = across; break;
    case 2: s.x0 = across; s.y0 = along + span; break;  // up
    default: s.x0 = across; s.y0 = along; break;        // down
  }
  return s;
}

inline std::vector<std::string> image_inventory(const ImageScene& s) {
  std::vector<std::string> inv;
  for (const Glyph& g : s.glyphs) inv.push_back(glyph_term(g));
  return inv;
}

struct RecordSink {
  CorpusManifest& manifest;
  const std::filesystem::path& root;

  void add(CorpusRecord r, const VisualInput& visual) {
    r.payload = "payloads/" + r.id + ".uvlm";
    visual.save(root / r.payload);
    manifest.records.push_back(std::move(r));
  }
};

}  // namespace detail

inline CorpusManifest gen_corpus(const CorpusConfig& cfg, uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  cfg.validate();
  CorpusManifest m;
  m.root = out_dir;
  std::filesystem::create_directories(out_dir / "payloads");
  detail::RecordSink sink{m, out_dir};
  uint64_t counter = 0;
  auto next_rng = [&] { return Rng(mix_seed(seed, counter++)); };
  auto tag = [](const char* prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", i);
    return std::string(prefix) + buf;
  };

  for (int i = 0; i < cfg.align_images; ++i) {
    Rng rng = next_rng();
    ImageScene s = detail::sample_image_scene(rng);
    CorpusRecord r;
    r.id = tag("align-img-", i);
    r.modality = Modality::image;
    r.conv.rounds = {{"describe the image", image_caption(s)}};
    r.inventory = detail::image_inventory(s);
    r.split = "train";
    r.stage = "align";
    sink.add(std::move(r), VisualInput::image(kCanvas, kCanvas, 3, render_image(s)));
  }

  for (int i = 0; i < cfg.align_videos; ++i) {
    Rng rng = next_rng();
    VideoScene s = detail::sample_video_scene(rng);
    CorpusRecord r;
    r.id = tag("align-vid-", i);
    r.modality = Modality::video;
    r.conv.rounds = {{"describe the video", video_caption(s)}};
    r.inventory = {glyph_term(s.glyph)};
    r.split = "train";
    r.stage = "align";
    r.direction = glyph_directions()[size_t(s.direction)];
    sink.add(std::move(r), VisualInput::video(kCanvas, kCanvas, 3, render_video(s)));
  }

  // matched image/video pairs of the same scene for the alignment-gap probe
  for (int i = 0; i < cfg.align_val_pairs; ++i) {
    Rng rng = next_rng();
    VideoScene vs = detail::sample_video_scene(rng);
    ImageScene is;
    is.glyphs = {vs.glyph};
    is.cells = {int(rng.below(kGridCells))};

    CorpusRecord ri;
    ri.id = tag("gap-img-", i);
    ri.modality = Modality::image;
    ri.conv.rounds = {{"describe the image", image_caption(is)}};
    ri.inventory = {glyph_term(vs.glyph)};
    ri.split = "val";
    ri.stage = "align";
    ri.pair = i;
    sink.add(std::move(ri), VisualInput::image(kCanvas, kCanvas, 3, render_image(is)));

    CorpusRecord rv;
    rv.id = tag("gap-vid-", i);
    rv.modality = Modality::video;
    rv.conv.rounds = {{"describe the video", video_caption(vs)}};
    rv.inventory = {glyph_term(vs.glyph)};
    rv.split = "val";
    rv.stage = "align";
    rv.pair = i;
    rv.direction = glyph_directions()[size_t(vs.direction)];
    sink.add(std::move(rv), VisualInput::video(kCanvas, kCanvas, 3, render_video(vs)));
  }

  auto add_sft_images = [&](const char* prefix, int count, const char* split) {
    for (int i = 0; i < count; ++i) {
      Rng rng = next_rng();
      ImageScene s = detail::sample_image_scene(rng);
      CorpusRecord r;
      r.id = tag(prefix, i);
      r.modality = Modality::image;
      r.conv = image_qa(s, 1 + int(rng.below(3)), rng);
      r.inventory = detail::image_inventory(s);
      r.split = split;
      r.stage = "sft";
      sink.add(std::move(r), VisualInput::image(kCanvas, kCanvas, 3, render_image(s)));
    }
  };
  auto add_sft_videos = [&](const char* prefix, int count, const char* split) {
    for (int i = 0; i < count; ++i) {
      Rng rng = next_rng();
      VideoScene s = detail::sample_video_scene(rng);
      CorpusRecord r;
      r.id = tag(prefix, i);
      r.modality = Modality::video;
      r.conv = video_qa(s, 1 + int(rng.below(3)), rng);
      r.inventory = {glyph_term(s.glyph)};
      r.split = split;
      r.stage = "sft";
      r.direction = glyph_directions()[size_t(s.direction)];
      sink.add(std::move(r), VisualInput::video(kCanvas, kCanvas, 3, render_video(s)));
    }
  };
  add_sft_images("sft-img-", cfg.sft_train_images, "train");
  add_sft_videos("sft-vid-", cfg.sft_train_videos, "train");
  add_sft_images("sft-test-img-", cfg.sft_test_images, "test");
  add_sft_videos("sft-test-vid-", cfg.sft_test_videos, "test");

  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace uvlm
