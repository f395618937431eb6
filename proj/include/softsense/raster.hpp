#pragma once

// Silhouette rasterisation of the body's quadrilateral cells into fixed-size
// binary frames, plus the SSIM1 frame container and PGM export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "softsense/binary_io.hpp"
#include "softsense/errors.hpp"
#include "softsense/physics.hpp"

namespace softsense {

inline constexpr std::size_t kImageWidth = 84;
inline constexpr std::size_t kImageHeight = 52;

/// World rectangle mapped onto the image; x grows right, y grows up in world
/// space while pixel rows grow downward.
struct Viewport {
  double min_x = 0.0;
  double min_y = 0.0;
  double width = 1.0;
  double height = 1.0;
  std::size_t pixels_x = kImageWidth;
  std::size_t pixels_y = kImageHeight;

  void validate() const {
    if (!(width > 0.0) || !(height > 0.0) || pixels_x == 0 || pixels_y == 0) {
      throw ConfigError("viewport must have positive extent");
    }
  }
  /// Continuous pixel coordinates (column, row) of a world point.
  [[nodiscard]] Vec2 to_pixel(Vec2 p) const {
    return {(p.x - min_x) / width * static_cast<double>(pixels_x),
            (min_y + height - p.y) / height * static_cast<double>(pixels_y)};
  }
};

struct BinaryImage {
  std::size_t width = kImageWidth;
  std::size_t height = kImageHeight;
  std::vector<std::uint8_t> pixels;  // row-major, 0 background, 1 body

  BinaryImage() : pixels(width * height, 0) {}
  BinaryImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h, 0) {}

  [[nodiscard]] std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
  }
  friend bool operator==(const BinaryImage&, const BinaryImage&) = default;
};

struct FrameSequence {
  double record_dt = 0.01;
  Viewport viewport;
  std::vector<BinaryImage> frames;

  [[nodiscard]] std::size_t size() const { return frames.size(); }
};

/// Bounding box of every node over the whole trajectory, inflated by
/// `margin_fraction` of its extent on each side.
inline Viewport compute_viewport(const Trajectory& traj, double margin_fraction = 0.05,
                                 std::size_t pixels_x = kImageWidth, std::size_t pixels_y = kImageHeight) {
  if (traj.states.empty()) throw ConfigError("cannot compute a viewport for an empty trajectory");
  if (!(margin_fraction >= 0.0)) throw ConfigError("margin fraction must be non-negative");
  double lo_x = std::numeric_limits<double>::infinity(), lo_y = lo_x;
  double hi_x = -lo_x, hi_y = -lo_x;
  for (const BodyState& s : traj.states) {
    for (Vec2 p : s.positions) {
      lo_x = std::min(lo_x, p.x);
      hi_x = std::max(hi_x, p.x);
      lo_y = std::min(lo_y, p.y);
      hi_y = std::max(hi_y, p.y);
    }
  }
  const double w = hi_x - lo_x;
  const double h = hi_y - lo_y;
  Viewport vp{lo_x - margin_fraction * w, lo_y - margin_fraction * h, w * (1.0 + 2.0 * margin_fraction),
              h * (1.0 + 2.0 * margin_fraction), pixels_x, pixels_y};
  vp.validate();
  return vp;
}

namespace detail {

inline double cross(Vec2 o, Vec2 a, Vec2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Simple, positively oriented quad: positive area and one diagonal splits it
// into two positive triangles.
inline bool quad_is_valid(const std::array<Vec2, 4>& q) {
  const double area2 = cross(q[0], q[1], q[2]) + cross(q[0], q[2], q[3]);
  if (!(area2 > 0.0)) return false;
  const bool diag02 = cross(q[0], q[1], q[2]) > 0.0 && cross(q[0], q[2], q[3]) > 0.0;
  const bool diag13 = cross(q[0], q[1], q[3]) > 0.0 && cross(q[1], q[2], q[3]) > 0.0;
  return diag02 || diag13;
}

}  // namespace detail

/// Scanline fill of a polygon given in pixel coordinates. A pixel is set iff
/// its centre lies inside; edges are half-open in y ([y0, y1)) and spans are
/// half-open in x ([left, right)), the usual top-left rule.
inline void fill_polygon(BinaryImage& img, const Vec2* verts, std::size_t n) {
  double lo_y = std::numeric_limits<double>::infinity(), hi_y = -lo_y;
  for (std::size_t i = 0; i < n; ++i) {
    lo_y = std::min(lo_y, verts[i].y);
    hi_y = std::max(hi_y, verts[i].y);
  }
  const auto h = static_cast<long>(img.height);
  const auto w = static_cast<long>(img.width);
  const long row_begin = std::max(0L, static_cast<long>(std::ceil(lo_y - 0.5)));
  const long row_end = std::min(h, static_cast<long>(std::ceil(hi_y - 0.5)));
  std::array<double, 16> xs{};
  for (long row = row_begin; row < row_end; ++row) {
    const double yc = static_cast<double>(row) + 0.5;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n && hits < xs.size(); ++i) {
      const Vec2 a = verts[i];
      const Vec2 b = verts[(i + 1) % n];
      if ((a.y <= yc && yc < b.y) || (b.y <= yc && yc < a.y)) {
        xs[hits++] = a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y);
      }
    }
    std::sort(xs.begin(), xs.begin() + static_cast<long>(hits));
    for (std::size_t k = 0; k + 1 < hits; k += 2) {
      const long col_begin = std::max(0L, static_cast<long>(std::ceil(xs[k] - 0.5)));
      const long col_end = std::min(w, static_cast<long>(std::ceil(xs[k + 1] - 0.5)));
      for (long col = col_begin; col < col_end; ++col) {
        img.pixels[static_cast<std::size_t>(row) * img.width + static_cast<std::size_t>(col)] = 1;
      }
    }
  }
}

inline BinaryImage render_frame(const BodyState& state, const BodyModel& model, const Viewport& vp) {
  vp.validate();
  BinaryImage img(vp.pixels_x, vp.pixels_y);
  for (std::size_t c = 0; c < model.cells.size(); ++c) {
    const Cell& cell = model.cells[c];
    std::array<Vec2, 4> world{};
    for (std::size_t i = 0; i < 4; ++i) world[i] = state.positions[cell[i]];
    if (!detail::quad_is_valid(world)) {
      throw DegenerateGeometryError("cell " + std::to_string(c) + " is inverted or self-intersecting at t = " +
                                    std::to_string(state.t) + " s");
    }
    std::array<Vec2, 4> px{};
    for (std::size_t i = 0; i < 4; ++i) px[i] = vp.to_pixel(world[i]);
    fill_polygon(img, px.data(), px.size());
  }
  return img;
}

inline FrameSequence render_sequence(const Trajectory& traj, const BodyModel& model, const Viewport& vp) {
  FrameSequence seq;
  seq.record_dt = traj.record_dt;
  seq.viewport = vp;
  seq.frames.reserve(traj.size());
  for (const BodyState& s : traj.states) seq.frames.push_back(render_frame(s, model, vp));
  return seq;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Binary PGM (P5) with 0 = background and 255 = body.
inline void write_pgm(const std::filesystem::path& path, const BinaryImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  for (std::uint8_t p : img.pixels) out.put(static_cast<char>(p ? 255 : 0));
}

/// Grayscale PGM of a probability image with values in [0, 1].
inline void write_pgm(const std::filesystem::path& path, const std::vector<double>& probs, std::size_t width,
                      std::size_t height) {
  if (probs.size() != width * height) throw ShapeError("probability image size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (double p : probs) {
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0))));
  }
}

// SSIM1 dataset container:
//   "SSIM1" | u64 count | u32 width | u32 height | f64 record_dt
//   | f64 min_x, min_y, world_width, world_height | count * width * height bytes
inline constexpr std::string_view kFramesMagic = "SSIM1";

inline void write_frames(std::ostream& out, const FrameSequence& seq) {
  binio::write_magic(out, kFramesMagic);
  binio::write<std::uint64_t>(out, seq.frames.size());
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(seq.viewport.pixels_x));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(seq.viewport.pixels_y));
  binio::write<double>(out, seq.record_dt);
  binio::write<double>(out, seq.viewport.min_x);
  binio::write<double>(out, seq.viewport.min_y);
  binio::write<double>(out, seq.viewport.width);
  binio::write<double>(out, seq.viewport.height);
  for (const BinaryImage& img : seq.frames) {
    if (img.width != seq.viewport.pixels_x || img.height != seq.viewport.pixels_y) {
      throw ShapeError("frame size differs from viewport");
    }
    binio::write_array(out, img.pixels.data(), img.pixels.size());
  }
}

inline FrameSequence read_frames(std::istream& in) {
  binio::expect_magic(in, kFramesMagic);
  FrameSequence seq;
  const auto count = binio::read<std::uint64_t>(in);
  seq.viewport.pixels_x = binio::read<std::uint32_t>(in);
  seq.viewport.pixels_y = binio::read<std::uint32_t>(in);
  seq.record_dt = binio::read<double>(in);
  seq.viewport.min_x = binio::read<double>(in);
  seq.viewport.min_y = binio::read<double>(in);
  seq.viewport.width = binio::read<double>(in);
  seq.viewport.height = binio::read<double>(in);
  if (count > (1ULL << 32)) throw FormatError("implausible frame count");
  seq.frames.assign(count, BinaryImage(seq.viewport.pixels_x, seq.viewport.pixels_y));
  for (BinaryImage& img : seq.frames) binio::read_array(in, img.pixels.data(), img.pixels.size());
  return seq;
}

inline void save_frames(const std::filesystem::path& path, const FrameSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_frames(out, seq);
}

inline FrameSequence load_frames(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing frame file " + path.string());
  return read_frames(in);
}

}  // namespace softsense
