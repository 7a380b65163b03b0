#pragma once

// Software rasterizer for the toy body: flat-shaded frames, exact per-vertex
// visibility, and ground-truth optical flow between two parameter sets.
// Pixel (row i, col j) has its center at (j + 0.5, i + 0.5); a point is in
// frame when 0 <= x < W and 0 <= y < H.

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <random>

#include "flowfit/body_model.hpp"

namespace flowfit {

constexpr double kDepthEpsilon = 1e-3;  // meters

struct RenderOptions {
  // Added to model z to get camera depth; surfaces at depth <= 0 are behind
  // the camera.
  double camera_distance = 3.0;
};

struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // HWC, values in [0, 1]

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0f) {}
  float& at(int i, int j, int c) { return data[(static_cast<size_t>(i) * width + j) * 3 + c]; }
  float at(int i, int j, int c) const { return data[(static_cast<size_t>(i) * width + j) * 3 + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

struct FlowMap {
  int height = 0;
  int width = 0;
  std::vector<float> dx, dy;
  std::vector<uint8_t> valid;

  FlowMap() = default;
  FlowMap(int h, int w)
      : height(h), width(w), dx(static_cast<size_t>(h) * w, 0.0f),
        dy(static_cast<size_t>(h) * w, 0.0f), valid(static_cast<size_t>(h) * w, 0) {}

  size_t index(int i, int j) const { return static_cast<size_t>(i) * width + j; }
  int valid_count() const { return static_cast<int>(std::count(valid.begin(), valid.end(), 1)); }
  friend bool operator==(const FlowMap&, const FlowMap&) = default;

  // Bilinear sample at a continuous pixel position. Taps that are invalid are
  // left out and the remaining weights renormalized; returns nullopt when the
  // position is out of frame or no tap is valid.
  std::optional<Vec2<double>> sample(double x, double y) const {
    if (!(x >= 0.0 && x < width && y >= 0.0 && y < height)) return std::nullopt;
    const double u = std::clamp(x - 0.5, 0.0, width - 1.0);
    const double v = std::clamp(y - 0.5, 0.0, height - 1.0);
    const int j0 = std::min(static_cast<int>(u), width - 1), i0 = std::min(static_cast<int>(v), height - 1);
    const int j1 = std::min(j0 + 1, width - 1), i1 = std::min(i0 + 1, height - 1);
    const double fu = u - j0, fv = v - i0;
    const std::array<std::pair<size_t, double>, 4> taps = {{{index(i0, j0), (1 - fu) * (1 - fv)},
                                                           {index(i0, j1), fu * (1 - fv)},
                                                           {index(i1, j0), (1 - fu) * fv},
                                                           {index(i1, j1), fu * fv}}};
    double wsum = 0.0;
    Vec2<double> acc = Vec2<double>::Zero();
    for (const auto& [k, w] : taps) {
      if (!valid[k] || w <= 0.0) continue;
      acc += w * Vec2<double>(dx[k], dy[k]);
      wsum += w;
    }
    if (wsum <= 1e-12) {
      // Exactly on a tap with zero weight elsewhere.
      for (const auto& [k, w] : taps) {
        if (valid[k] && w > 0.0) return Vec2<double>(dx[k], dy[k]);
      }
      const size_t k = index(std::min(static_cast<int>(y), height - 1), std::min(static_cast<int>(x), width - 1));
      if (valid[k]) return Vec2<double>(dx[k], dy[k]);
      return std::nullopt;
    }
    return acc / wsum;
  }
};

struct VisibilityMask {
  std::vector<uint8_t> mask;

  int count() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }
  size_t size() const { return mask.size(); }
  bool operator[](size_t v) const { return mask[v] != 0; }

  VisibilityMask operator&(const VisibilityMask& o) const {
    if (o.mask.size() != mask.size()) throw ValidationError("visibility masks differ in length");
    VisibilityMask out{mask};
    for (size_t i = 0; i < mask.size(); ++i) out.mask[i] = mask[i] & o.mask[i];
    return out;
  }
};

struct RenderedFrame {
  Image image;
  std::vector<float> depth;  // +inf where empty
  BodyParams<double> params;
};

// Projected mesh in pixel coordinates with camera depths.
struct ScreenMesh {
  Points2<double> xy;
  VecX<double> depth;
  Points3<double> world;  // posed model-space vertices
};

inline ScreenMesh screen_mesh(const MeshTemplate& tpl, const BodyParams<double>& params,
                              ImageSize size, const RenderOptions& opts = {}) {
  ScreenMesh m;
  m.world = forward(tpl, params).vertices;
  m.xy = project<double>(m.world, params.camera, size);
  m.depth = m.world.col(2).array() + opts.camera_distance;
  return m;
}

// Depth buffer with face ids plus per-pixel face bins for exact depth queries
// at continuous positions.
class DepthRaster {
 public:
  DepthRaster(const ScreenMesh& mesh, const Faces& faces, ImageSize size)
      : size_(size), mesh_(&mesh), faces_(&faces) {
    const size_t npix = static_cast<size_t>(size.height) * size.width;
    depth_.assign(npix, std::numeric_limits<double>::infinity());
    face_.assign(npix, -1);
    bin_start_.assign(npix + 1, 0);

    std::vector<std::array<int, 4>> boxes(faces.rows());
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
      auto& box = boxes[f];
      box = {1, 0, 1, 0};  // empty
      if (degenerate(f)) continue;
      double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
      for (int k = 0; k < 3; ++k) {
        const int v = faces(f, k);
        xmin = std::min(xmin, mesh.xy(v, 0));
        xmax = std::max(xmax, mesh.xy(v, 0));
        ymin = std::min(ymin, mesh.xy(v, 1));
        ymax = std::max(ymax, mesh.xy(v, 1));
      }
      box[0] = std::max(0, static_cast<int>(std::floor(xmin)));
      box[1] = std::min(size.width - 1, static_cast<int>(std::floor(xmax)));
      box[2] = std::max(0, static_cast<int>(std::floor(ymin)));
      box[3] = std::min(size.height - 1, static_cast<int>(std::floor(ymax)));
      for (int i = box[2]; i <= box[3]; ++i)
        for (int j = box[0]; j <= box[1]; ++j) ++bin_start_[pix(i, j) + 1];
    }
    for (size_t k = 0; k < npix; ++k) bin_start_[k + 1] += bin_start_[k];
    bins_.resize(bin_start_[npix]);
    std::vector<int> fill(bin_start_.begin(), bin_start_.end() - 1);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
      const auto& box = boxes[f];
      for (int i = box[2]; i <= box[3]; ++i)
        for (int j = box[0]; j <= box[1]; ++j) bins_[fill[pix(i, j)]++] = static_cast<int>(f);
    }
    for (Eigen::Index f = 0; f < faces.rows(); ++f) rasterize(static_cast<int>(f), boxes[f]);
  }

  ImageSize size() const { return size_; }
  double depth(int i, int j) const { return depth_[pix(i, j)]; }
  int face(int i, int j) const { return face_[pix(i, j)]; }
  const std::vector<double>& depth_buffer() const { return depth_; }

  // Nearest positive surface depth at (x, y), +inf if no surface covers it.
  double depth_at(double x, double y) const {
    if (!(x >= 0.0 && x < size_.width && y >= 0.0 && y < size_.height)) {
      return std::numeric_limits<double>::infinity();
    }
    const size_t p = pix(static_cast<int>(y), static_cast<int>(x));
    double best = std::numeric_limits<double>::infinity();
    for (int k = bin_start_[p]; k < bin_start_[p + 1]; ++k) {
      const int f = bins_[k];
      Eigen::Vector3d b;
      if (!barycentric(f, x, y, b, 1e-9)) continue;
      const double z = interpolate_depth(f, b);
      if (z > 0.0) best = std::min(best, z);
    }
    return best;
  }

  // Barycentric coordinates of the pixel center w.r.t. the covering face.
  Eigen::Vector3d pixel_barycentric(int i, int j) const {
    Eigen::Vector3d b;
    barycentric(face(i, j), j + 0.5, i + 0.5, b, 1e-6);
    return b;
  }

 private:
  size_t pix(int i, int j) const { return static_cast<size_t>(i) * size_.width + j; }

  double signed_area(int f) const {
    const auto& xy = mesh_->xy;
    const Eigen::Vector2d a = xy.row((*faces_)(f, 0)), b = xy.row((*faces_)(f, 1)),
                          c = xy.row((*faces_)(f, 2));
    return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
  }

  bool degenerate(int f) const {
    if (std::abs(signed_area(f)) < 1e-12) return true;
    for (int k = 0; k < 3; ++k) {
      const int v = (*faces_)(f, k);
      if (!std::isfinite(mesh_->xy(v, 0)) || !std::isfinite(mesh_->xy(v, 1))) return true;
    }
    return false;
  }

  bool barycentric(int f, double x, double y, Eigen::Vector3d& b, double tol) const {
    const auto& xy = mesh_->xy;
    const Eigen::Vector2d a = xy.row((*faces_)(f, 0)), bb = xy.row((*faces_)(f, 1)),
                          c = xy.row((*faces_)(f, 2));
    const double area = signed_area(f);
    if (std::abs(area) < 1e-12) return false;
    const double w0 = ((bb.x() - x) * (c.y() - y) - (bb.y() - y) * (c.x() - x)) / area;
    const double w1 = ((c.x() - x) * (a.y() - y) - (c.y() - y) * (a.x() - x)) / area;
    const double w2 = 1.0 - w0 - w1;
    b = Eigen::Vector3d(w0, w1, w2);
    return w0 >= -tol && w1 >= -tol && w2 >= -tol;
  }

  double interpolate_depth(int f, const Eigen::Vector3d& b) const {
    return b[0] * mesh_->depth[(*faces_)(f, 0)] + b[1] * mesh_->depth[(*faces_)(f, 1)] +
           b[2] * mesh_->depth[(*faces_)(f, 2)];
  }

  void rasterize(int f, const std::array<int, 4>& box) {
    if (box[0] > box[1] || box[2] > box[3]) return;
    const auto& xy = mesh_->xy;
    std::array<int, 3> idx = {(*faces_)(f, 0), (*faces_)(f, 1), (*faces_)(f, 2)};
    if (signed_area(f) < 0) std::swap(idx[1], idx[2]);
    const Eigen::Vector2d p[3] = {xy.row(idx[0]), xy.row(idx[1]), xy.row(idx[2])};
    const double area = (p[1].x() - p[0].x()) * (p[2].y() - p[0].y()) -
                        (p[1].y() - p[0].y()) * (p[2].x() - p[0].x());
    // Edge k runs from p[k] to p[k+1]; an edge owns its boundary pixels when
    // it points down, or exactly left. Shared edges run opposite ways in the
    // two neighbours, so exactly one of them takes the pixel.
    bool owns[3];
    for (int k = 0; k < 3; ++k) {
      const Eigen::Vector2d d = p[(k + 1) % 3] - p[k];
      owns[k] = d.y() > 0 || (d.y() == 0 && d.x() < 0);
    }
    for (int i = box[2]; i <= box[3]; ++i) {
      const double y = i + 0.5;
      for (int j = box[0]; j <= box[1]; ++j) {
        const double x = j + 0.5;
        double w[3];
        bool inside = true;
        for (int k = 0; k < 3 && inside; ++k) {
          const Eigen::Vector2d& a = p[k];
          const Eigen::Vector2d& b = p[(k + 1) % 3];
          w[k] = (b.x() - a.x()) * (y - a.y()) - (b.y() - a.y()) * (x - a.x());
          inside = w[k] > 0 || (w[k] == 0 && owns[k]);
        }
        if (!inside) continue;
        // w[k] is opposite vertex (k + 2) % 3.
        const double z = (w[1] * mesh_->depth[idx[0]] + w[2] * mesh_->depth[idx[1]] +
                          w[0] * mesh_->depth[idx[2]]) / area;
        if (!(z > 0.0)) continue;
        const size_t q = pix(i, j);
        if (z < depth_[q]) {
          depth_[q] = z;
          face_[q] = f;
        }
      }
    }
  }

  ImageSize size_;
  const ScreenMesh* mesh_;
  const Faces* faces_;
  std::vector<double> depth_;
  std::vector<int> face_;
  std::vector<int> bin_start_;
  std::vector<int> bins_;
};

namespace detail {

inline Eigen::Vector3f hsv_to_rgb(float h, float s, float v) {
  const float c = v * s;
  const float hp = std::fmod(h, 1.0f) * 6.0f;
  const float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
  Eigen::Vector3f rgb;
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return rgb + Eigen::Vector3f::Constant(v - c);
}

// Smooth value noise: a coarse random grid upsampled bilinearly.
inline Image background_texture(ImageSize size, uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<float> u(0.25f, 0.75f);
  constexpr int kGrid = 9;
  std::array<std::array<Eigen::Vector3f, kGrid>, kGrid> grid;
  for (auto& row : grid)
    for (auto& c : row) c = {u(rng), u(rng), u(rng)};
  Image img(size.height, size.width);
  for (int i = 0; i < size.height; ++i) {
    const float gy = (i + 0.5f) / size.height * (kGrid - 1);
    const int y0 = std::min(static_cast<int>(gy), kGrid - 2);
    const float fy = gy - y0;
    for (int j = 0; j < size.width; ++j) {
      const float gx = (j + 0.5f) / size.width * (kGrid - 1);
      const int x0 = std::min(static_cast<int>(gx), kGrid - 2);
      const float fx = gx - x0;
      const Eigen::Vector3f c = (1 - fy) * ((1 - fx) * grid[y0][x0] + fx * grid[y0][x0 + 1]) +
                                fy * ((1 - fx) * grid[y0 + 1][x0] + fx * grid[y0 + 1][x0 + 1]);
      const float grey = c.mean();
      for (int k = 0; k < 3; ++k) img.at(i, j, k) = 0.5f * c[k] + 0.5f * grey;
    }
  }
  return img;
}

}  // namespace detail

// Flat-shaded frame: per-part hue, small per-face jitter from the seed, and a
// Lambert-like factor from the face normal over a smooth noise background.
inline RenderedFrame render(const MeshTemplate& tpl, const BodyParams<double>& params,
                            ImageSize size, uint64_t appearance_seed,
                            const RenderOptions& opts = {}) {
  params.validate();
  const ScreenMesh mesh = screen_mesh(tpl, params, size, opts);
  const DepthRaster raster(mesh, tpl.faces, size);

  RenderedFrame frame;
  frame.params = params;
  frame.image = detail::background_texture(size, appearance_seed);
  frame.depth.assign(raster.depth_buffer().begin(), raster.depth_buffer().end());

  const std::vector<int> parts = tpl.vertex_parts();
  std::mt19937_64 rng(appearance_seed);
  std::uniform_real_distribution<float> jitter(-0.06f, 0.06f);
  const float hue_shift = std::uniform_real_distribution<float>(0.0f, 0.08f)(rng);
  std::vector<Eigen::Vector3f> face_color(tpl.num_faces());
  for (int f = 0; f < tpl.num_faces(); ++f) {
    const int part = parts[tpl.faces(f, 0)];
    // Left/right parts get clearly different hues.
    const float hue = std::fmod(part * 0.381966f + hue_shift, 1.0f);
    Eigen::Vector3f c = detail::hsv_to_rgb(hue, 0.75f, 0.9f);
    const Eigen::Vector3d a = mesh.world.row(tpl.faces(f, 0)), b = mesh.world.row(tpl.faces(f, 1)),
                          d = mesh.world.row(tpl.faces(f, 2));
    const Eigen::Vector3d n = (b - a).cross(d - a);
    const float shade = n.norm() > 0 ? 0.55f + 0.45f * static_cast<float>(std::abs(n.z()) / n.norm()) : 1.0f;
    const float jit = jitter(rng);
    c = (c * shade).array() + jit;
    face_color[f] = c.cwiseMax(0.0f).cwiseMin(1.0f);
  }
  for (int i = 0; i < size.height; ++i) {
    for (int j = 0; j < size.width; ++j) {
      const int f = raster.face(i, j);
      if (f < 0) continue;
      for (int k = 0; k < 3; ++k) frame.image.at(i, j, k) = face_color[f][k];
    }
  }
  return frame;
}

// Number of pixels covered by the body.
inline int silhouette_area(const MeshTemplate& tpl, const BodyParams<double>& params, ImageSize size,
                           const RenderOptions& opts = {}) {
  const ScreenMesh mesh = screen_mesh(tpl, params, size, opts);
  const DepthRaster raster(mesh, tpl.faces, size);
  int n = 0;
  for (double d : raster.depth_buffer()) n += std::isfinite(d) ? 1 : 0;
  return n;
}

inline VisibilityMask visibility_from(const ScreenMesh& mesh, const DepthRaster& raster) {
  const ImageSize size = raster.size();
  VisibilityMask out;
  out.mask.assign(mesh.xy.rows(), 0);
  for (Eigen::Index v = 0; v < mesh.xy.rows(); ++v) {
    const double x = mesh.xy(v, 0), y = mesh.xy(v, 1);
    if (!(x >= 0.0 && x < size.width && y >= 0.0 && y < size.height)) continue;
    const double z = mesh.depth[v];
    if (!(z > 0.0)) continue;
    if (z <= raster.depth_at(x, y) + kDepthEpsilon) out.mask[v] = 1;
  }
  return out;
}

// Vertex v is visible when it projects inside the frame and no surface lies
// more than kDepthEpsilon in front of it.
inline VisibilityMask visibility(const MeshTemplate& tpl, const BodyParams<double>& params,
                                 ImageSize size, const RenderOptions& opts = {}) {
  const ScreenMesh mesh = screen_mesh(tpl, params, size, opts);
  const DepthRaster raster(mesh, tpl.faces, size);
  return visibility_from(mesh, raster);
}

// Flow from frame 1 to frame 2 for every body pixel of frame 1: the pixel's
// surface point is carried to params_2 and projected. Pixels whose point
// leaves the frame or is hidden in frame 2 are invalid, as is background.
inline FlowMap ground_truth_flow(const MeshTemplate& tpl, const BodyParams<double>& params_1,
                                 const BodyParams<double>& params_2, ImageSize size,
                                 const RenderOptions& opts = {}) {
  params_1.validate();
  params_2.validate();
  const ScreenMesh m1 = screen_mesh(tpl, params_1, size, opts);
  const ScreenMesh m2 = screen_mesh(tpl, params_2, size, opts);
  const DepthRaster r1(m1, tpl.faces, size);
  const DepthRaster r2(m2, tpl.faces, size);

  FlowMap flow(size.height, size.width);
  for (int i = 0; i < size.height; ++i) {
    for (int j = 0; j < size.width; ++j) {
      const int f = r1.face(i, j);
      if (f < 0) continue;
      const Eigen::Vector3d b = r1.pixel_barycentric(i, j);
      Eigen::Vector2d p2 = Eigen::Vector2d::Zero();
      double z2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        const int v = tpl.faces(f, k);
        p2 += b[k] * m2.xy.row(v).transpose();
        z2 += b[k] * m2.depth[v];
      }
      if (!(p2.x() >= 0.0 && p2.x() < size.width && p2.y() >= 0.0 && p2.y() < size.height)) continue;
      if (!(z2 > 0.0) || z2 > r2.depth_at(p2.x(), p2.y()) + kDepthEpsilon) continue;
      const size_t q = flow.index(i, j);
      flow.dx[q] = static_cast<float>(p2.x() - (j + 0.5));
      flow.dy[q] = static_cast<float>(p2.y() - (i + 0.5));
      flow.valid[q] = 1;
    }
  }
  return flow;
}

// A flat rectangle in front of everything, moving with constant velocity.
struct Occluder {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel rectangle in frame 1
  Vec2<double> velocity = Vec2<double>::Zero();  // pixels per frame
  Eigen::Vector3f color = Eigen::Vector3f(0.5f, 0.5f, 0.5f);

  bool covers(double x, double y, double t = 0.0) const {
    const double ox = velocity.x() * t, oy = velocity.y() * t;
    return x >= x0 + ox && x < x1 + ox && y >= y0 + oy && y < y1 + oy;
  }
};

// Draws the occluder into a frame at time offset t (frames).
inline void overlay_occluder(Image& img, const Occluder& occ, double t = 0.0) {
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j)
      if (occ.covers(j + 0.5, i + 0.5, t))
        for (int k = 0; k < 3; ++k) img.at(i, j, k) = occ.color[k];
}

// Pixels covered by the occluder in frame 1 carry the occluder's motion, as
// an estimator observing the composited frames would report.
inline void overlay_occluder(FlowMap& flow, const Occluder& occ, double dt = 1.0) {
  for (int i = 0; i < flow.height; ++i) {
    for (int j = 0; j < flow.width; ++j) {
      if (!occ.covers(j + 0.5, i + 0.5)) continue;
      const size_t q = flow.index(i, j);
      flow.dx[q] = static_cast<float>(occ.velocity.x() * dt);
      flow.dy[q] = static_cast<float>(occ.velocity.y() * dt);
      flow.valid[q] = 1;
    }
  }
}

// ---------------------------------------------------------------------------
// Flow file: "FFLO", u32 H, u32 W, f32 dx[H*W], f32 dy[H*W], u8 valid[H*W],
// little-endian, row-major planes.

inline void write_flow(const FlowMap& flow, std::ostream& os) {
  os.write("FFLO", 4);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(flow.height));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(flow.width));
  os.write(reinterpret_cast<const char*>(flow.dx.data()), flow.dx.size() * sizeof(float));
  os.write(reinterpret_cast<const char*>(flow.dy.data()), flow.dy.size() * sizeof(float));
  os.write(reinterpret_cast<const char*>(flow.valid.data()), flow.valid.size());
}

inline void save_flow(const FlowMap& flow, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_flow(flow, os);
  if (!os) throw Error("write failed: " + path);
}

inline FlowMap read_flow(std::istream& is, const std::string& what = "flow") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FFLO", 4) != 0) throw FormatError(what + ": bad flow magic");
  const auto h = detail::read_pod<uint32_t>(is, "flow height");
  const auto w = detail::read_pod<uint32_t>(is, "flow width");
  if (h == 0 || w == 0 || h > 16384 || w > 16384) throw FormatError(what + ": bad flow size");
  FlowMap flow(static_cast<int>(h), static_cast<int>(w));
  is.read(reinterpret_cast<char*>(flow.dx.data()), flow.dx.size() * sizeof(float));
  is.read(reinterpret_cast<char*>(flow.dy.data()), flow.dy.size() * sizeof(float));
  is.read(reinterpret_cast<char*>(flow.valid.data()), flow.valid.size());
  if (!is) throw FormatError(what + ": truncated flow file");
  for (size_t k = 0; k < flow.valid.size(); ++k) {
    if (flow.valid[k] > 1) throw FormatError(what + ": valid plane must be 0/1");
    if (flow.valid[k] && !(std::isfinite(flow.dx[k]) && std::isfinite(flow.dy[k]))) {
      throw FormatError(what + ": non-finite flow at a valid pixel");
    }
  }
  return flow;
}

inline FlowMap load_flow(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open flow file " + path);
  return read_flow(is, path);
}

}  // namespace flowfit
