#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/io.hpp"

namespace uvlm {

enum class Modality { image, video };

inline std::string modality_name(Modality m) { return m == Modality::image ? "image" : "video"; }

inline Modality modality_from(const std::string& s) {
  if (s == "image") return Modality::image;
  if (s == "video") return Modality::video;
  throw InvalidArgument("unknown modality: " + s);
}

// An image or an ordered stack of frames, row-major H x W x C, values in [0,1].
struct VisualInput {
  Modality tag = Modality::image;
  int height = 0, width = 0, channels = 0;
  std::vector<std::vector<float>> frames;  // exactly one for images

  static VisualInput image(int h, int w, int c, std::vector<float> pixels) {
    VisualInput v;
    v.tag = Modality::image;
    v.height = h;
    v.width = w;
    v.channels = c;
    v.frames.push_back(std::move(pixels));
    v.validate();
    return v;
  }

  static VisualInput video(int h, int w, int c, std::vector<std::vector<float>> frames) {
    VisualInput v;
    v.tag = Modality::video;
    v.height = h;
    v.width = w;
    v.channels = c;
    v.frames = std::move(frames);
    v.validate();
    return v;
  }

  int n_frames() const { return int(frames.size()); }

  void validate() const {
    require(height > 0 && width > 0 && channels > 0, "visual input: non-positive dimensions");
    require(!frames.empty(), "visual input: no frames");
    require(tag == Modality::video || frames.size() == 1, "image input must have exactly one frame");
    size_t expect = size_t(height) * size_t(width) * size_t(channels);
    for (const auto& f : frames) {
      require(f.size() == expect, "frame size does not match dimensions");
      for (float v : f)
        require(v >= 0.0f && v <= 1.0f, "pixel value outside [0,1]: " + std::to_string(v));
    }
  }

  io::Payload to_payload() const {
    io::Payload p;
    if (tag == Modality::video) p.dims = {n_frames(), height, width, channels};
    else p.dims = {height, width, channels};
    for (const auto& f : frames) p.values.insert(p.values.end(), f.begin(), f.end());
    return p;
  }

  static VisualInput from_payload(const io::Payload& p) {
    if (p.dims.size() == 3) {
      return image(p.dims[0], p.dims[1], p.dims[2], p.values);
    }
    int t = p.dims[0], h = p.dims[1], w = p.dims[2], c = p.dims[3];
    size_t per = size_t(h) * size_t(w) * size_t(c);
    std::vector<std::vector<float>> frames;
    frames.reserve(size_t(t));
    for (int f = 0; f < t; ++f)
      frames.emplace_back(p.values.begin() + long(per) * f, p.values.begin() + long(per) * (f + 1));
    return video(h, w, c, std::move(frames));
  }

  static VisualInput load(const std::filesystem::path& path) {
    return from_payload(io::read_payload(path));
  }

  void save(const std::filesystem::path& path) const { io::write_payload(path, to_payload()); }
};

// Uniform temporal sampling: index i of k maps to frame floor((i+0.5)*T/k).
inline std::vector<int> sample_frame_indices(int t, int k) {
  require(t >= 1, "frame sampling: empty video");
  require(k >= 1, "frame sampling: k must be positive");
  std::vector<int> idx(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) idx[size_t(i)] = int(std::floor((double(i) + 0.5) * double(t) / double(k)));
  return idx;
}

inline std::vector<int> sample_frames(const VisualInput& v, int k) {
  require(v.tag == Modality::video, "frame sampling requires a video input");
  return sample_frame_indices(v.n_frames(), k);
}

// Non-overlapping patch rows: (H/P)*(W/P) rows of P*P*C pixel values, raster
// order over patches and within each patch.
inline std::vector<float> patchify(const std::vector<float>& frame, int h, int w, int c, int patch) {
  require(patch > 0 && h % patch == 0 && w % patch == 0,
          "patch size " + std::to_string(patch) + " must divide " + std::to_string(h) + "x" +
              std::to_string(w));
  int ph = h / patch, pw = w / patch;
  std::vector<float> out;
  out.reserve(frame.size());
  for (int py = 0; py < ph; ++py)
    for (int px = 0; px < pw; ++px)
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int ch = 0; ch < c; ++ch) {
            int y = py * patch + dy, x = px * patch + dx;
            out.push_back(frame[(size_t(y) * size_t(w) + size_t(x)) * size_t(c) + size_t(ch)]);
          }
  return out;
}

}  // namespace uvlm
