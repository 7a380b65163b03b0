#pragma once

// Articulated toy body: linear blend skinning over a 24-joint kinematic tree
// plus a weak-perspective camera. Every map here has a hand-written
// vector-Jacobian product so the losses can backpropagate into the
// regressor without an autodiff engine.

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <span>
#include <string>

#include "flowfit/core.hpp"
#include "flowfit/rotation.hpp"

namespace flowfit {

// Pose theta (24 axis-angle rows), shape beta (10), camera (s, tx, ty).
template <typename T>
struct BodyParams {
  Eigen::Matrix<T, kNumJoints, 3, Eigen::RowMajor> theta =
      Eigen::Matrix<T, kNumJoints, 3, Eigen::RowMajor>::Zero();
  Eigen::Matrix<T, kNumShape, 1> beta = Eigen::Matrix<T, kNumShape, 1>::Zero();
  Vec3<T> camera = Vec3<T>(T(1), T(0), T(0));

  T scale() const { return camera[0]; }

  // Flattened [theta(72), beta(10), s, tx, ty].
  VecX<T> flat() const {
    VecX<T> v(kParamDim);
    v.head(kPoseDim) = Eigen::Map<const VecX<T>>(theta.data(), kPoseDim);
    v.segment(kPoseDim, kNumShape) = beta;
    v.tail(kNumCamera) = camera;
    return v;
  }

  // No validation; used on raw regressor outputs and in gradient code.
  static BodyParams unchecked(const Eigen::Ref<const VecX<T>>& v) {
    if (v.size() != kParamDim) {
      throw ValidationError("body params: expected " + std::to_string(kParamDim) +
                            " values, got " + std::to_string(v.size()));
    }
    BodyParams p;
    Eigen::Map<VecX<T>>(p.theta.data(), kPoseDim) = v.head(kPoseDim);
    p.beta = v.segment(kPoseDim, kNumShape);
    p.camera = v.tail(kNumCamera);
    return p;
  }

  // Validates and canonicalizes axis-angle rows.
  static BodyParams from_flat(const Eigen::Ref<const VecX<T>>& v) {
    BodyParams p = unchecked(v);
    p.validate();
    p.canonicalize();
    return p;
  }

  void canonicalize() {
    for (int j = 0; j < kNumJoints; ++j) {
      theta.row(j) = canonicalize_axis_angle<T>(theta.row(j).transpose()).transpose();
    }
  }

  void validate() const {
    if (!theta.allFinite()) throw ValidationError("body params: theta is not finite");
    if (!beta.allFinite()) throw ValidationError("body params: beta is not finite");
    if (!camera.allFinite()) throw ValidationError("body params: camera is not finite");
    if (!(camera[0] > T(0))) throw ValidationError("body params: camera scale s must be > 0");
  }

  template <typename U>
  BodyParams<U> cast() const {
    BodyParams<U> out;
    out.theta = theta.template cast<U>();
    out.beta = beta.template cast<U>();
    out.camera = camera.template cast<U>();
    return out;
  }
};

struct MeshTemplate {
  Points3<double> rest_vertices;
  Faces faces;
  MatX<double> joint_regressor;    // J x V
  MatX<double> skinning_weights;   // V x J
  Eigen::MatrixXd shape_basis;     // (3V) x 10 column-major; column k is direction k, xyz interleaved
  std::array<int, kNumJoints> kinematic_parents{};

  int num_vertices() const { return static_cast<int>(rest_vertices.rows()); }
  int num_faces() const { return static_cast<int>(faces.rows()); }

  Points3<double> shape_direction(int k) const {
    return Eigen::Map<const Points3<double>>(shape_basis.col(k).data(), num_vertices(), 3);
  }

  // Joint with the largest skinning weight, per vertex.
  std::vector<int> vertex_parts() const {
    std::vector<int> parts(num_vertices());
    for (int v = 0; v < num_vertices(); ++v) {
      Eigen::Index j;
      skinning_weights.row(v).maxCoeff(&j);
      parts[v] = static_cast<int>(j);
    }
    return parts;
  }

  // Throws ValidationError describing the first broken invariant.
  void validate() const {
    const int nv = num_vertices();
    if (nv == 0) throw ValidationError("template: no vertices");
    if (faces.size() > 0 && (faces.minCoeff() < 0 || faces.maxCoeff() >= nv)) {
      throw ValidationError("template: face index out of range");
    }
    if (joint_regressor.rows() != kNumJoints || joint_regressor.cols() != nv) {
      throw ValidationError("template: joint_regressor must be J x V");
    }
    if (skinning_weights.rows() != nv || skinning_weights.cols() != kNumJoints) {
      throw ValidationError("template: skinning_weights must be V x J");
    }
    if (shape_basis.rows() != 3 * nv || shape_basis.cols() != kNumShape) {
      throw ValidationError("template: shape_basis must be 3V x 10");
    }
    if (skinning_weights.minCoeff() < 0.0) {
      throw ValidationError("template: negative skinning weight");
    }
    for (int v = 0; v < nv; ++v) {
      if (std::abs(skinning_weights.row(v).sum() - 1.0) > 1e-6) {
        throw ValidationError("template: skinning row " + std::to_string(v) + " does not sum to 1");
      }
    }
    for (int j = 0; j < kNumJoints; ++j) {
      if (std::abs(joint_regressor.row(j).sum() - 1.0) > 1e-6) {
        throw ValidationError("template: joint_regressor row " + std::to_string(j) +
                              " does not sum to 1");
      }
    }
    int roots = 0;
    for (int j = 0; j < kNumJoints; ++j) {
      const int p = kinematic_parents[j];
      if (p == -1) {
        ++roots;
      } else if (p < 0 || p >= kNumJoints) {
        throw ValidationError("template: parent index out of range");
      }
      // Walking up must terminate at the root within J steps.
      int cur = j, steps = 0;
      while (cur != -1) {
        cur = kinematic_parents[cur];
        if (++steps > kNumJoints) throw ValidationError("template: kinematic tree has a cycle");
      }
    }
    if (roots != 1) throw ValidationError("template: kinematic tree must have exactly one root");
  }
};

template <typename T>
struct BodyMesh {
  Points3<T> vertices;
  Points3<T> joints;
};

// Intermediate values of forward() kept for the backward pass.
template <typename T>
struct ForwardCache {
  Points3<T> shaped;                  // rest + shape offsets
  Points3<T> rest_joints;             // J x 3, regressed from shaped
  std::array<Mat3<T>, kNumJoints> local;
  std::array<Mat3<T>, kNumJoints> world;
  Points3<T> world_joints;            // J x 3
};

namespace detail {

// Parents are required to precede children so one sweep suffices.
inline void check_topological(const MeshTemplate& tpl) {
  for (int j = 0; j < kNumJoints; ++j) {
    if (tpl.kinematic_parents[j] >= j) {
      throw ValidationError("template: parents must precede children in joint order");
    }
  }
}

}  // namespace detail

template <typename T>
BodyMesh<T> forward(const MeshTemplate& tpl, const BodyParams<T>& params,
                    ForwardCache<T>* cache = nullptr) {
  params.validate();
  detail::check_topological(tpl);
  const int nv = tpl.num_vertices();

  ForwardCache<T> local_cache;
  ForwardCache<T>& c = cache ? *cache : local_cache;

  c.shaped = tpl.rest_vertices.template cast<T>();
  for (int k = 0; k < kNumShape; ++k) {
    const T b = params.beta[k];
    c.shaped += b * Eigen::Map<const Points3<double>>(tpl.shape_basis.col(k).data(), nv, 3)
                        .template cast<T>();
  }
  const MatX<T> reg = tpl.joint_regressor.template cast<T>();
  c.rest_joints = reg * c.shaped;

  // Displacement of each joint from its rest position; exactly zero at theta = 0.
  Points3<T> disp = Points3<T>::Zero(kNumJoints, 3);
  c.world_joints.resize(kNumJoints, 3);
  for (int j = 0; j < kNumJoints; ++j) {
    c.local[j] = rodrigues<T>(params.theta.row(j).transpose());
    const int p = tpl.kinematic_parents[j];
    if (p < 0) {
      c.world[j] = c.local[j];
    } else {
      c.world[j] = c.world[p] * c.local[j];
      const Vec3<T> bone = (c.rest_joints.row(j) - c.rest_joints.row(p)).transpose();
      disp.row(j) = disp.row(p) + ((c.world[p] - Mat3<T>::Identity()) * bone).transpose();
    }
    c.world_joints.row(j) = c.rest_joints.row(j) + disp.row(j);
  }

  BodyMesh<T> mesh;
  mesh.vertices = c.shaped;
  const MatX<T> w = tpl.skinning_weights.template cast<T>();
  for (int v = 0; v < nv; ++v) {
    Vec3<T> offset = Vec3<T>::Zero();
    const Vec3<T> x = c.shaped.row(v).transpose();
    for (int j = 0; j < kNumJoints; ++j) {
      const T wj = w(v, j);
      if (wj == T(0)) continue;
      offset += wj * ((c.world[j] - Mat3<T>::Identity()) *
                          (x - c.rest_joints.row(j).transpose()) +
                      disp.row(j).transpose());
    }
    mesh.vertices.row(v) += offset.transpose();
  }
  mesh.joints = reg * mesh.vertices;
  return mesh;
}

template <typename T>
struct BodyParamsGrad {
  Eigen::Matrix<T, kNumJoints, 3, Eigen::RowMajor> theta =
      Eigen::Matrix<T, kNumJoints, 3, Eigen::RowMajor>::Zero();
  Eigen::Matrix<T, kNumShape, 1> beta = Eigen::Matrix<T, kNumShape, 1>::Zero();
  Vec3<T> camera = Vec3<T>::Zero();

  VecX<T> flat() const {
    VecX<T> v(kParamDim);
    v.head(kPoseDim) = Eigen::Map<const VecX<T>>(theta.data(), kPoseDim);
    v.segment(kPoseDim, kNumShape) = beta;
    v.tail(kNumCamera) = camera;
    return v;
  }
};

// Backpropagates dL/dvertices and dL/djoints (either may be empty) into
// dL/dtheta and dL/dbeta, accumulating into `grad`.
template <typename T>
void forward_vjp(const MeshTemplate& tpl, const BodyParams<T>& params, const ForwardCache<T>& c,
                 const Points3<T>& grad_vertices, const Points3<T>& grad_joints,
                 BodyParamsGrad<T>& grad) {
  const int nv = tpl.num_vertices();
  const MatX<T> reg = tpl.joint_regressor.template cast<T>();
  const MatX<T> w = tpl.skinning_weights.template cast<T>();

  Points3<T> gv = grad_vertices.size() ? grad_vertices : Points3<T>::Zero(nv, 3);
  if (grad_joints.size()) gv += reg.transpose() * grad_joints;

  std::array<Mat3<T>, kNumJoints> g_world;
  std::array<Vec3<T>, kNumJoints> g_world_joint;
  for (auto& m : g_world) m.setZero();
  for (auto& v : g_world_joint) v.setZero();
  Points3<T> g_shaped = Points3<T>::Zero(nv, 3);
  Points3<T> g_rest_joints = Points3<T>::Zero(kNumJoints, 3);

  // v' = sum_j w_vj (R_j (x - J_j) + Jw_j)
  for (int v = 0; v < nv; ++v) {
    const Vec3<T> g = gv.row(v).transpose();
    if (g.isZero(T(0))) continue;
    const Vec3<T> x = c.shaped.row(v).transpose();
    Mat3<T> blended = Mat3<T>::Zero();
    for (int j = 0; j < kNumJoints; ++j) {
      const T wj = w(v, j);
      if (wj == T(0)) continue;
      const Vec3<T> rel = x - c.rest_joints.row(j).transpose();
      g_world[j] += wj * g * rel.transpose();
      g_world_joint[j] += wj * g;
      blended += wj * c.world[j];
      g_rest_joints.row(j) -= (wj * (c.world[j].transpose() * g)).transpose();
    }
    g_shaped.row(v) += (blended.transpose() * g).transpose();
  }

  // Jw_j = Jw_p + R_p (J_j - J_p);  R_j = R_p L_j
  std::array<Mat3<T>, kNumJoints> g_local;
  for (int j = kNumJoints - 1; j >= 0; --j) {
    const int p = tpl.kinematic_parents[j];
    if (p < 0) {
      g_rest_joints.row(j) += g_world_joint[j].transpose();
      g_local[j] = g_world[j];
      continue;
    }
    const Vec3<T> bone = (c.rest_joints.row(j) - c.rest_joints.row(p)).transpose();
    g_world_joint[p] += g_world_joint[j];
    g_world[p] += g_world_joint[j] * bone.transpose();
    const Vec3<T> gb = c.world[p].transpose() * g_world_joint[j];
    g_rest_joints.row(j) += gb.transpose();
    g_rest_joints.row(p) -= gb.transpose();
    g_world[p] += g_world[j] * c.local[j].transpose();
    g_local[j] = c.world[p].transpose() * g_world[j];
  }

  for (int j = 0; j < kNumJoints; ++j) {
    grad.theta.row(j) +=
        rodrigues_vjp<T>(params.theta.row(j).transpose(), g_local[j]).transpose();
  }
  g_shaped += reg.transpose() * g_rest_joints;
  const Eigen::Map<const VecX<T>> gflat(g_shaped.data(), 3 * nv);
  for (int k = 0; k < kNumShape; ++k) {
    grad.beta[k] += tpl.shape_basis.col(k).template cast<T>().dot(gflat);
  }
}

// Weak perspective: normalized square [-1, 1] mapped onto the image, y down.
// p_x = (s (v_x + t_x) + 1) / 2 * W, p_y = (s (v_y + t_y) + 1) / 2 * H.
template <typename T>
Points2<T> project(const Points3<T>& points, const Vec3<T>& camera, ImageSize size) {
  const T s = camera[0];
  const T hw = T(size.width) / T(2), hh = T(size.height) / T(2);
  Points2<T> p(points.rows(), 2);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    p(i, 0) = (s * (points(i, 0) + camera[1]) + T(1)) * hw;
    p(i, 1) = (s * (points(i, 1) + camera[2]) + T(1)) * hh;
  }
  return p;
}

// Accumulates dL/dpoints and dL/dcamera from dL/dprojected.
template <typename T>
void project_vjp(const Points3<T>& points, const Vec3<T>& camera, ImageSize size,
                 const Points2<T>& grad_proj, Points3<T>& grad_points, Vec3<T>& grad_camera) {
  const T s = camera[0];
  const T hw = T(size.width) / T(2), hh = T(size.height) / T(2);
  if (grad_points.rows() != points.rows()) grad_points = Points3<T>::Zero(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const T gx = grad_proj(i, 0) * hw, gy = grad_proj(i, 1) * hh;
    grad_points(i, 0) += gx * s;
    grad_points(i, 1) += gy * s;
    grad_camera[0] += gx * (points(i, 0) + camera[1]) + gy * (points(i, 1) + camera[2]);
    grad_camera[1] += gx * s;
    grad_camera[2] += gy * s;
  }
}

// ---------------------------------------------------------------------------
// Template archive: "FFTM" magic, u32 version, u32 V, F, J, K (shape dims),
// then little-endian arrays in field order: rest f32[V*3], faces i32[F*3],
// joint_regressor f32[J*V], skinning f32[V*J], shape_basis f32[K*V*3]
// (direction-major), parents i32[J].

namespace detail {

template <typename U>
void write_pod(std::ostream& os, const U& value) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is, const char* what) {
  U value;
  is.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (!is) throw FormatError(std::string("truncated file while reading ") + what);
  return value;
}

}  // namespace detail

inline void save_template(const MeshTemplate& tpl, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  const uint32_t nv = tpl.num_vertices(), nf = tpl.num_faces(), nj = kNumJoints, nk = kNumShape;
  os.write("FFTM", 4);
  detail::write_pod<uint32_t>(os, 1);
  detail::write_pod(os, nv);
  detail::write_pod(os, nf);
  detail::write_pod(os, nj);
  detail::write_pod(os, nk);
  for (uint32_t v = 0; v < nv; ++v)
    for (int d = 0; d < 3; ++d) detail::write_pod(os, static_cast<float>(tpl.rest_vertices(v, d)));
  for (uint32_t f = 0; f < nf; ++f)
    for (int d = 0; d < 3; ++d) detail::write_pod<int32_t>(os, tpl.faces(f, d));
  for (uint32_t j = 0; j < nj; ++j)
    for (uint32_t v = 0; v < nv; ++v)
      detail::write_pod(os, static_cast<float>(tpl.joint_regressor(j, v)));
  for (uint32_t v = 0; v < nv; ++v)
    for (uint32_t j = 0; j < nj; ++j)
      detail::write_pod(os, static_cast<float>(tpl.skinning_weights(v, j)));
  for (uint32_t k = 0; k < nk; ++k)
    for (uint32_t i = 0; i < 3 * nv; ++i)
      detail::write_pod(os, static_cast<float>(tpl.shape_basis(i, k)));
  for (uint32_t j = 0; j < nj; ++j) detail::write_pod<int32_t>(os, tpl.kinematic_parents[j]);
  if (!os) throw Error("write failed: " + path);
}

inline MeshTemplate load_template(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open template " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FFTM", 4) != 0) throw FormatError(path + ": bad template magic");
  const auto version = detail::read_pod<uint32_t>(is, "version");
  if (version != 1) throw FormatError(path + ": unsupported template version");
  const auto nv = detail::read_pod<uint32_t>(is, "V");
  const auto nf = detail::read_pod<uint32_t>(is, "F");
  const auto nj = detail::read_pod<uint32_t>(is, "J");
  const auto nk = detail::read_pod<uint32_t>(is, "K");
  if (nj != kNumJoints || nk != kNumShape) throw FormatError(path + ": unsupported J or K");
  if (nv == 0 || nv > (1u << 24) || nf > (1u << 26)) throw FormatError(path + ": bad sizes");

  MeshTemplate tpl;
  tpl.rest_vertices.resize(nv, 3);
  tpl.faces.resize(nf, 3);
  tpl.joint_regressor.resize(nj, nv);
  tpl.skinning_weights.resize(nv, nj);
  tpl.shape_basis.resize(3 * nv, nk);
  for (uint32_t v = 0; v < nv; ++v)
    for (int d = 0; d < 3; ++d) tpl.rest_vertices(v, d) = detail::read_pod<float>(is, "rest");
  for (uint32_t f = 0; f < nf; ++f)
    for (int d = 0; d < 3; ++d) tpl.faces(f, d) = detail::read_pod<int32_t>(is, "faces");
  for (uint32_t j = 0; j < nj; ++j)
    for (uint32_t v = 0; v < nv; ++v)
      tpl.joint_regressor(j, v) = detail::read_pod<float>(is, "joint_regressor");
  for (uint32_t v = 0; v < nv; ++v)
    for (uint32_t j = 0; j < nj; ++j)
      tpl.skinning_weights(v, j) = detail::read_pod<float>(is, "skinning");
  for (uint32_t k = 0; k < nk; ++k)
    for (uint32_t i = 0; i < 3 * nv; ++i)
      tpl.shape_basis(i, k) = detail::read_pod<float>(is, "shape_basis");
  for (uint32_t j = 0; j < nj; ++j)
    tpl.kinematic_parents[j] = detail::read_pod<int32_t>(is, "parents");
  tpl.validate();
  return tpl;
}

}  // namespace flowfit
