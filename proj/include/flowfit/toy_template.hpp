#pragma once

// Procedural 24-joint humanoid made of capsule tubes (V = 402, F = 748).
// Coordinates: x to the subject's left (image right), y down, z away from
// the camera; the rest pose is a T-pose facing the camera.

#include <cmath>
#include <numbers>
#include <vector>

#include "flowfit/body_model.hpp"

namespace flowfit {

namespace joints {
enum : int {
  kPelvis = 0, kLHip, kRHip, kSpine1, kLKnee, kRKnee, kSpine2, kLAnkle, kRAnkle, kSpine3,
  kLFoot, kRFoot, kNeck, kLCollar, kRCollar, kHead, kLShoulder, kRShoulder, kLElbow,
  kRElbow, kLWrist, kRWrist, kLHand, kRHand
};
}  // namespace joints

inline constexpr std::array<int, kNumJoints> kSmplParents = {
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

namespace detail {

struct TubeBuilder {
  std::vector<Eigen::Vector3d> verts;
  std::vector<Eigen::Vector3d> radial;  // unit radial direction, zero for caps
  std::vector<std::array<double, kNumJoints>> weights;
  std::vector<std::array<int, 3>> faces;
  std::vector<int> segment_of;

  int add_vertex(const Eigen::Vector3d& p, const Eigen::Vector3d& r, int segment) {
    verts.push_back(p);
    radial.push_back(r);
    weights.push_back({});
    segment_of.push_back(segment);
    return static_cast<int>(verts.size()) - 1;
  }

  // Rings along a polyline of centers with elliptical cross-sections; returns
  // the index of the first vertex of every ring. Caps are added at both ends.
  std::vector<int> tube(const std::vector<Eigen::Vector3d>& centers,
                        const std::vector<Eigen::Vector2d>& radii, int sides,
                        const Eigen::Vector3d& start_cap, const Eigen::Vector3d& end_cap,
                        int segment, const Eigen::Vector3d& up_hint) {
    const Eigen::Vector3d axis = (centers.back() - centers.front()).normalized();
    Eigen::Vector3d e1 = up_hint - up_hint.dot(axis) * axis;
    if (e1.norm() < 1e-9) e1 = axis.unitOrthogonal();
    e1.normalize();
    const Eigen::Vector3d e2 = axis.cross(e1);
    std::vector<int> ring_start;
    for (size_t r = 0; r < centers.size(); ++r) {
      ring_start.push_back(static_cast<int>(verts.size()));
      for (int k = 0; k < sides; ++k) {
        const double phi = 2.0 * std::numbers::pi * (k + 0.5) / sides;
        const Eigen::Vector3d dir = std::cos(phi) * e1 + std::sin(phi) * e2;
        const Eigen::Vector3d off =
            radii[r].x() * std::cos(phi) * e1 + radii[r].y() * std::sin(phi) * e2;
        add_vertex(centers[r] + off, dir, segment);
      }
    }
    const int cap0 = add_vertex(start_cap, Eigen::Vector3d::Zero(), segment);
    const int cap1 = add_vertex(end_cap, Eigen::Vector3d::Zero(), segment);
    for (size_t r = 0; r + 1 < centers.size(); ++r) {
      for (int k = 0; k < sides; ++k) {
        const int a = ring_start[r] + k, b = ring_start[r] + (k + 1) % sides;
        const int c = ring_start[r + 1] + k, d = ring_start[r + 1] + (k + 1) % sides;
        faces.push_back({a, b, d});
        faces.push_back({a, d, c});
      }
    }
    const int last = ring_start.back();
    for (int k = 0; k < sides; ++k) {
      faces.push_back({cap0, ring_start[0] + (k + 1) % sides, ring_start[0] + k});
      faces.push_back({cap1, last + k, last + (k + 1) % sides});
    }
    return ring_start;
  }

  void set_ring_weight(int ring_start, int sides, int joint, double w, int other = -1) {
    for (int k = 0; k < sides; ++k) {
      auto& row = weights[ring_start + k];
      row.fill(0.0);
      row[joint] = w;
      if (other >= 0) row[other] += 1.0 - w;
    }
  }
};

}  // namespace detail

// Builds the default template. Values are rounded to float32 so that the
// in-memory template and its archive file are identical.
inline MeshTemplate build_toy_template() {
  using Eigen::Vector2d;
  using Eigen::Vector3d;
  using namespace joints;

  std::array<Vector3d, kNumJoints> nominal;
  nominal[kPelvis] = {0, 0, 0};
  nominal[kLHip] = {0.09, 0.05, 0};
  nominal[kRHip] = {-0.09, 0.05, 0};
  nominal[kSpine1] = {0, -0.10, 0};
  nominal[kLKnee] = {0.09, 0.45, 0};
  nominal[kRKnee] = {-0.09, 0.45, 0};
  nominal[kSpine2] = {0, -0.22, 0};
  nominal[kLAnkle] = {0.09, 0.85, 0};
  nominal[kRAnkle] = {-0.09, 0.85, 0};
  nominal[kSpine3] = {0, -0.35, 0};
  nominal[kLFoot] = {0.09, 0.90, -0.13};
  nominal[kRFoot] = {-0.09, 0.90, -0.13};
  nominal[kNeck] = {0, -0.50, 0};
  nominal[kHead] = {0, -0.64, 0};
  nominal[kLShoulder] = {0.18, -0.45, 0};
  nominal[kRShoulder] = {-0.18, -0.45, 0};
  nominal[kLElbow] = {0.45, -0.45, 0};
  nominal[kRElbow] = {-0.45, -0.45, 0};
  nominal[kLWrist] = {0.70, -0.45, 0};
  nominal[kRWrist] = {-0.70, -0.45, 0};
  nominal[kLHand] = {0.80, -0.45, 0};
  nominal[kRHand] = {-0.80, -0.45, 0};

  detail::TubeBuilder b;
  std::array<std::vector<std::pair<int, double>>, kNumJoints> regressor;

  // Torso: vertical tube, ellipse wider in x, rings at the spine joints.
  const int torso_sides = 10;
  const std::vector<double> torso_y = {0.08, 0.0, -0.05, -0.10, -0.16,
                                       -0.22, -0.28, -0.35, -0.42, -0.50};
  {
    std::vector<Vector3d> centers;
    std::vector<Vector2d> radii;
    for (double y : torso_y) {
      centers.emplace_back(0, y, 0);
      const double rx = (y < -0.40) ? 0.11 : 0.14;
      radii.emplace_back(rx, 0.09);
    }
    // e1 = x so the wide radius is left-right.
    auto rings = b.tube(centers, radii, torso_sides, {0, 0.12, 0}, {0, -0.53, 0}, 0,
                        Vector3d(1, 0, 0));
    const std::array<std::pair<double, int>, 5> chain = {
        {{0.0, kPelvis}, {-0.10, kSpine1}, {-0.22, kSpine2}, {-0.35, kSpine3}, {-0.50, kNeck}}};
    for (size_t r = 0; r < torso_y.size(); ++r) {
      const double y = torso_y[r];
      int owner = kPelvis;
      bool at_joint = false;
      for (const auto& [cy, j] : chain) {
        if (y <= cy + 1e-9) owner = j;
        if (std::abs(y - cy) < 1e-9) at_joint = true;
      }
      const int parent = kSmplParents[owner];
      if (at_joint && parent >= 0) {
        b.set_ring_weight(rings[r], torso_sides, owner, 0.5, parent);
      } else {
        b.set_ring_weight(rings[r], torso_sides, owner, 1.0);
      }
      for (const auto& [cy, j] : chain) {
        if (std::abs(y - cy) < 1e-9) {
          for (int k = 0; k < torso_sides; ++k) regressor[j].push_back({rings[r] + k, 1.0 / torso_sides});
        }
      }
    }
    const int cap0 = rings.back() + torso_sides, cap1 = cap0 + 1;
    b.weights[cap0].fill(0.0);
    b.weights[cap0][kPelvis] = 1.0;
    b.weights[cap1].fill(0.0);
    b.weights[cap1][kNeck] = 1.0;
  }
  const int torso_spine3_ring = 7;  // index into torso_y of y = -0.35

  // Head: sphere of 5 latitude rings around the head joint.
  {
    const int sides = 10;
    const double radius = 0.11;
    const Vector3d c = nominal[kHead];
    std::vector<Vector3d> centers;
    std::vector<Vector2d> radii;
    for (int r = 0; r < 5; ++r) {
      const double lat = std::numbers::pi * (r - 2) / 6.0;  // -60..60 degrees
      centers.push_back(c + Vector3d(0, radius * std::sin(lat), 0));
      radii.emplace_back(radius * std::cos(lat), radius * std::cos(lat));
    }
    auto rings = b.tube(centers, radii, sides, c + Vector3d(0, -radius, 0),
                        c + Vector3d(0, radius, 0), 1, Vector3d(1, 0, 0));
    for (int r = 0; r < 5; ++r) {
      if (r == 4) {
        b.set_ring_weight(rings[r], sides, kHead, 0.5, kNeck);
      } else {
        b.set_ring_weight(rings[r], sides, kHead, 1.0);
      }
    }
    const int cap0 = rings.back() + sides;
    b.weights[cap0].fill(0.0);
    b.weights[cap0][kHead] = 1.0;
    b.weights[cap0 + 1].fill(0.0);
    b.weights[cap0 + 1][kHead] = 0.5;
    b.weights[cap0 + 1][kNeck] = 0.5;
    for (int k = 0; k < sides; ++k) regressor[kHead].push_back({rings[2] + k, 1.0 / sides});
  }

  // Limbs: tube from joint a to joint b, skinned to a.
  struct Limb {
    int a, b;
    std::vector<double> u;
    double radius;
    int leaf = -1;  // joint regressed from the far end
  };
  const std::vector<Limb> limbs = {
      {kLShoulder, kLElbow, {0.0, 0.5, 0.9}, 0.045},
      {kLElbow, kLWrist, {0.0, 0.8}, 0.04},
      {kLWrist, kLHand, {0.0, 0.8}, 0.035, kLHand},
      {kRShoulder, kRElbow, {0.0, 0.5, 0.9}, 0.045},
      {kRElbow, kRWrist, {0.0, 0.8}, 0.04},
      {kRWrist, kRHand, {0.0, 0.8}, 0.035, kRHand},
      {kLHip, kLKnee, {0.0, 0.5, 0.9}, 0.07},
      {kLKnee, kLAnkle, {0.0, 0.8}, 0.05},
      {kLAnkle, kLFoot, {0.0, 0.8}, 0.04, kLFoot},
      {kRHip, kRKnee, {0.0, 0.5, 0.9}, 0.07},
      {kRKnee, kRAnkle, {0.0, 0.8}, 0.05},
      {kRAnkle, kRFoot, {0.0, 0.8}, 0.04, kRFoot},
  };
  const int limb_sides = 8;
  std::array<int, kNumJoints> first_ring{};
  first_ring.fill(-1);
  int segment = 2;
  for (const Limb& l : limbs) {
    const Vector3d pa = nominal[l.a], pb = nominal[l.b];
    const Vector3d dir = (pb - pa).normalized();
    const double length = (pb - pa).norm();
    std::vector<Vector3d> centers;
    std::vector<Vector2d> radii;
    for (double u : l.u) {
      centers.push_back(pa + u * (pb - pa));
      radii.emplace_back(l.radius, l.radius);
    }
    const double cap_out = 0.5 * l.radius;
    const Vector3d up = std::abs(dir.z()) > 0.9 ? Vector3d(1, 0, 0) : Vector3d(0, 0, 1);
    auto rings = b.tube(centers, radii, limb_sides, pa - cap_out * dir, pb + cap_out * dir,
                        segment++, up);
    const int parent = kSmplParents[l.a];
    b.set_ring_weight(rings[0], limb_sides, l.a, 0.5, parent);
    for (size_t r = 1; r < rings.size(); ++r) b.set_ring_weight(rings[r], limb_sides, l.a, 1.0);
    const int cap0 = rings.back() + limb_sides, cap1 = cap0 + 1;
    b.weights[cap0].fill(0.0);
    b.weights[cap0][l.a] = 0.5;
    b.weights[cap0][parent] = 0.5;
    b.weights[cap1].fill(0.0);
    b.weights[cap1][l.a] = 1.0;
    first_ring[l.a] = rings[0];
    for (int k = 0; k < limb_sides; ++k) regressor[l.a].push_back({rings[0] + k, 1.0 / limb_sides});
    if (l.leaf >= 0) {
      // alpha * ring_centroid + (1 - alpha) * cap == pb
      const double u_last = l.u.back();
      const double alpha = cap_out / ((1.0 - u_last) * length + cap_out);
      for (int k = 0; k < limb_sides; ++k) {
        regressor[l.leaf].push_back({rings.back() + k, alpha / limb_sides});
      }
      regressor[l.leaf].push_back({cap1, 1.0 - alpha});
    }
  }
  // Collars: halfway between the spine3 ring and the shoulder ring.
  for (auto [collar, shoulder] : {std::pair{kLCollar, kLShoulder}, std::pair{kRCollar, kRShoulder}}) {
    const int spine_ring = torso_spine3_ring * torso_sides;  // torso rings start at vertex 0
    for (int k = 0; k < torso_sides; ++k) regressor[collar].push_back({spine_ring + k, 0.5 / torso_sides});
    for (int k = 0; k < limb_sides; ++k) {
      regressor[collar].push_back({first_ring[shoulder] + k, 0.5 / limb_sides});
    }
  }

  const int nv = static_cast<int>(b.verts.size());
  MeshTemplate tpl;
  tpl.kinematic_parents = kSmplParents;
  tpl.rest_vertices.resize(nv, 3);
  tpl.skinning_weights = MatX<double>::Zero(nv, kNumJoints);
  for (int v = 0; v < nv; ++v) {
    tpl.rest_vertices.row(v) = b.verts[v].transpose();
    for (int j = 0; j < kNumJoints; ++j) tpl.skinning_weights(v, j) = b.weights[v][j];
  }
  tpl.faces.resize(static_cast<Eigen::Index>(b.faces.size()), 3);
  for (size_t f = 0; f < b.faces.size(); ++f) {
    for (int d = 0; d < 3; ++d) tpl.faces(static_cast<Eigen::Index>(f), d) = b.faces[f][d];
  }
  tpl.joint_regressor = MatX<double>::Zero(kNumJoints, nv);
  for (int j = 0; j < kNumJoints; ++j) {
    for (auto [v, w] : regressor[j]) tpl.joint_regressor(j, v) += w;
  }

  // Shape directions.
  tpl.shape_basis = Eigen::MatrixXd::Zero(3 * nv, kNumShape);
  auto set = [&](int k, int v, const Vector3d& d) { tpl.shape_basis.block<3, 1>(3 * v, k) = d; };
  for (int v = 0; v < nv; ++v) {
    const Vector3d p = b.verts[v];
    const int seg = b.segment_of[v];
    const bool is_arm = std::abs(p.x()) > 0.17 && p.y() < -0.3 && seg >= 2;
    const bool is_torso = seg == 0;
    set(0, v, 0.05 * p);                                                        // overall size
    set(1, v, Vector3d(0, p.y() > 0.05 ? 0.05 * (p.y() - 0.05) : 0.0, 0));     // leg length
    set(2, v, 0.012 * b.radial[v]);                                             // girth
    set(3, v, Vector3d(is_arm ? 0.03 * (p.x() > 0 ? 1 : -1) : 0.0, 0, 0));      // shoulder width
    set(4, v, Vector3d(0, p.y() < 0 ? 0.05 * p.y() : 0.0, 0));                  // torso height
    set(5, v, Vector3d(is_arm ? 0.05 * (p.x() - (p.x() > 0 ? 0.18 : -0.18)) : 0.0, 0, 0));  // arm length
    set(6, v, Vector3d(0, 0, is_torso && p.z() < 0 && p.y() > -0.3 ? -0.02 : 0.0));         // belly
    for (int k = 7; k < kNumShape; ++k) {
      set(k, v, 0.01 * Vector3d(std::sin(5.0 * p.y() + k), 0.0, std::cos(4.0 * p.x() + 2.0 * k)));
    }
  }

  auto round32 = [](auto& m) { m = m.unaryExpr([](double x) { return double(float(x)); }); };
  round32(tpl.rest_vertices);
  round32(tpl.joint_regressor);
  round32(tpl.skinning_weights);
  round32(tpl.shape_basis);
  tpl.validate();
  return tpl;
}

}  // namespace flowfit
