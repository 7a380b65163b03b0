#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "flowfit/body_model.hpp"
#include "flowfit/finite_difference.hpp"
#include "flowfit/toy_template.hpp"
#include "test_util.hpp"

namespace flowfit {
namespace {

using testing::random_params;
using testing::toy;

TEST(ToyTemplate, SizesAndInvariants) {
  const MeshTemplate& tpl = toy();
  EXPECT_EQ(tpl.num_vertices(), 402);
  EXPECT_EQ(tpl.num_faces(), 748);
  EXPECT_NO_THROW(tpl.validate());
  EXPECT_EQ(tpl.kinematic_parents[0], -1);
}

TEST(ToyTemplate, ValidateRejectsBrokenTemplates) {
  MeshTemplate bad = toy();
  bad.faces(3, 1) = bad.num_vertices();
  EXPECT_THROW(bad.validate(), ValidationError);

  bad = toy();
  bad.skinning_weights(10, 0) += 0.1;
  EXPECT_THROW(bad.validate(), ValidationError);

  bad = toy();
  bad.kinematic_parents[1] = 4;  // 1 -> 4 -> 1
  EXPECT_THROW(bad.validate(), ValidationError);

  bad = toy();
  bad.kinematic_parents[3] = -1;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(ToyTemplate, ShippedArchiveMatchesProceduralTemplate) {
  if (!std::filesystem::exists(FLOWFIT_TOY_TEMPLATE)) GTEST_SKIP() << "template data file missing";
  const MeshTemplate loaded = load_template(FLOWFIT_TOY_TEMPLATE);
  const MeshTemplate& built = toy();
  EXPECT_EQ(loaded.rest_vertices, built.rest_vertices);
  EXPECT_EQ(loaded.faces, built.faces);
  EXPECT_EQ(loaded.joint_regressor, built.joint_regressor);
  EXPECT_EQ(loaded.skinning_weights, built.skinning_weights);
  EXPECT_EQ(loaded.shape_basis, built.shape_basis);
  EXPECT_EQ(loaded.kinematic_parents, built.kinematic_parents);
}

TEST(ToyTemplate, ArchiveRoundTripIsBitExact) {
  const auto path = std::filesystem::temp_directory_path() / "flowfit_tpl_roundtrip.fftm";
  save_template(toy(), path.string());
  const MeshTemplate back = load_template(path.string());
  EXPECT_EQ(back.rest_vertices, toy().rest_vertices);
  EXPECT_EQ(back.shape_basis, toy().shape_basis);
  std::filesystem::remove(path);
}

TEST(ToyTemplate, TruncatedArchiveIsRejected) {
  const auto path = std::filesystem::temp_directory_path() / "flowfit_tpl_trunc.fftm";
  save_template(toy(), path.string());
  std::filesystem::resize_file(path, 1000);
  EXPECT_THROW(load_template(path.string()), FormatError);
  std::filesystem::remove(path);
}

TEST(Forward, RestPoseIsBitExact) {
  const BodyParams<double> p;
  const auto mesh = forward(toy(), p);
  EXPECT_TRUE((mesh.vertices.array() == toy().rest_vertices.array()).all());
}

TEST(Forward, UnitShapeCoefficientAddsBasisExactly) {
  BodyParams<double> p;
  p.beta[0] = 1.0;
  const auto mesh = forward(toy(), p);
  const Points3<double> expected = toy().rest_vertices + toy().shape_direction(0);
  EXPECT_TRUE((mesh.vertices.array() == expected.array()).all());
}

TEST(Forward, JointsAreRegressedFromVertices) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_params(rng);
    const auto mesh = forward(toy(), p);
    const Points3<double> oracle = toy().joint_regressor * mesh.vertices;
    EXPECT_LT((mesh.joints - oracle).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Forward, NonFiniteParamsNameTheField) {
  BodyParams<double> p;
  p.beta[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    forward(toy(), p);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  BodyParams<double> q;
  q.theta(5, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(toy(), q), ValidationError);
  BodyParams<double> r;
  r.camera[0] = 0.0;
  EXPECT_THROW(forward(toy(), r), ValidationError);
}

TEST(Forward, RootRotationIsRigid) {
  std::mt19937_64 rng(3);
  auto p = random_params(rng);
  p.theta.setZero();
  const auto rest = forward(toy(), p);
  p.theta.row(0) << 0.4, -1.1, 0.7;
  const auto rotated = forward(toy(), p);
  double worst = 0.0;
  for (int a = 0; a < toy().num_vertices(); a += 7) {
    for (int b = a + 1; b < toy().num_vertices(); b += 5) {
      const double d0 = (rest.vertices.row(a) - rest.vertices.row(b)).norm();
      const double d1 = (rotated.vertices.row(a) - rotated.vertices.row(b)).norm();
      worst = std::max(worst, std::abs(d0 - d1));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(BodyParams, CanonicalizationKeepsRotation) {
  VecX<double> flat = BodyParams<double>().flat();
  flat.segment<3>(3 * 5) << 0.0, 7.0, 0.0;  // norm 7 > 2 pi
  const auto p = BodyParams<double>::from_flat(flat);
  EXPECT_LT(p.theta.row(5).norm(), 2.0 * std::numbers::pi);
  const Mat3<double> r0 = rodrigues<double>(Vec3<double>(0, 7.0, 0));
  const Mat3<double> r1 = rodrigues<double>(p.theta.row(5).transpose());
  EXPECT_LT((r0 - r1).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(p.flat().size(), kParamDim);
}

TEST(Rotation, JacobianMatchesFiniteDifferences) {
  for (const Vec3<double> w : {Vec3<double>(0.3, -0.2, 0.9), Vec3<double>(1e-6, 2e-6, -1e-6),
                               Vec3<double>(0, 0, 0), Vec3<double>(2.5, 1.0, -0.5)}) {
    const auto jac = rodrigues_jacobian<double>(w);
    for (int i = 0; i < 3; ++i) {
      const double h = 1e-6;
      Vec3<double> wp = w, wm = w;
      wp[i] += h;
      wm[i] -= h;
      const Mat3<double> fd = (rodrigues<double>(wp) - rodrigues<double>(wm)) / (2 * h);
      EXPECT_LT((fd - jac[i]).cwiseAbs().maxCoeff(), 1e-8) << "w=" << w.transpose();
    }
  }
}

TEST(Project, CenterMapsToImageCenter) {
  Points3<double> v(1, 3);
  v << 0, 0, 5.0;
  const auto p = project<double>(v, Vec3<double>(1, 0, 0), {64, 64});
  EXPECT_DOUBLE_EQ(p(0, 0), 32.0);
  EXPECT_DOUBLE_EQ(p(0, 1), 32.0);
}

TEST(Project, TranslationShiftsLinearly) {
  const auto mesh = forward(toy(), BodyParams<double>());
  const ImageSize size{64, 48};
  const auto a = project<double>(mesh.vertices, Vec3<double>(1, 0.1, 0), size);
  const auto b = project<double>(mesh.vertices, Vec3<double>(1, 0.1 + 0.25, 0), size);
  const Eigen::VectorXd dx = b.col(0) - a.col(0);
  EXPECT_LT((dx.array() - 0.25 * size.width / 2.0).abs().maxCoeff(), 1e-12);
  EXPECT_LT((b.col(1) - a.col(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Project, DoublingScaleDoublesSpread) {
  std::mt19937_64 rng(11);
  const auto mesh = forward(toy(), random_params(rng));
  const Vec3<double> cam(0.6, 0.0, 0.0);
  const auto a = project<double>(mesh.vertices, cam, {64, 64});
  const auto b = project<double>(mesh.vertices, Vec3<double>(1.2, 0.0, 0.0), {64, 64});
  for (int i = 0; i < 50; ++i) {
    const int u = (i * 37) % mesh.vertices.rows(), w = (i * 101 + 5) % mesh.vertices.rows();
    const double da = (a.row(u) - a.row(w)).norm(), db = (b.row(u) - b.row(w)).norm();
    EXPECT_NEAR(db, 2.0 * da, 1e-9);
  }
}

TEST(FiniteDifference, Quadratic) {
  VecX<double> x(1);
  x << 3.0;
  const auto g = finite_difference_gradient([](const VecX<double>& v) { return v[0] * v[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDifference, RejectsNonScalarAndBadEps) {
  VecX<double> x = VecX<double>::Ones(2);
  EXPECT_THROW(finite_difference_gradient([](const VecX<double>& v) -> VecX<double> { return v; }, x),
               Error);
  EXPECT_THROW(finite_difference_gradient([](const VecX<double>& v) { return v.sum(); }, x, 1e-2),
               Error);
}

TEST(FiniteDifference, ProjectTranslationGradient) {
  Points3<double> v(1, 3);
  v << 0.2, -0.3, 1.0;
  const double s = 0.8;
  const int width = 64;
  VecX<double> tx(1);
  tx << 0.1;
  const auto g = finite_difference_gradient(
      [&](const VecX<double>& t) { return project<double>(v, Vec3<double>(s, t[0], 0), {64, width})(0, 0); },
      tx);
  EXPECT_NEAR(g[0], width / 2.0 * s, 1e-6);
}

TEST(FiniteDifference, ShapeGradientIsBasisAtRestPose) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  const int nv = toy().num_vertices();
  Points3<double> weights(nv, 3);
  for (int i = 0; i < weights.size(); ++i) weights.data()[i] = n(rng);
  auto f = [&](const VecX<double>& beta) {
    BodyParams<double> p;
    p.beta = beta;
    return forward(toy(), p).vertices.cwiseProduct(weights).sum();
  };
  const auto g = finite_difference_gradient(f, VecX<double>::Zero(kNumShape), 1e-4);
  for (int k = 0; k < kNumShape; ++k) {
    EXPECT_NEAR(g[k], toy().shape_direction(k).cwiseProduct(weights).sum(), 1e-7);
  }
}

// Random linear functional of the projected vertices and joints.
struct ProjectedProbe {
  Points2<double> gv, gj;
  double operator()(const BodyParams<double>& p) const {
    const auto mesh = forward(toy(), p);
    return project<double>(mesh.vertices, p.camera, {64, 64}).cwiseProduct(gv).sum() +
           project<double>(mesh.joints, p.camera, {64, 64}).cwiseProduct(gj).sum();
  }
  VecX<double> analytic(const BodyParams<double>& p) const {
    ForwardCache<double> cache;
    const auto mesh = forward(toy(), p, &cache);
    Points3<double> grad_v = Points3<double>::Zero(mesh.vertices.rows(), 3);
    Points3<double> grad_j = Points3<double>::Zero(kNumJoints, 3);
    BodyParamsGrad<double> g;
    project_vjp<double>(mesh.vertices, p.camera, {64, 64}, gv, grad_v, g.camera);
    project_vjp<double>(mesh.joints, p.camera, {64, 64}, gj, grad_j, g.camera);
    forward_vjp(toy(), p, cache, grad_v, grad_j, g);
    return g.flat();
  }
};

TEST(Gradient, ProjectedForwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n;
  const int nv = toy().num_vertices();
  for (int draw = 0; draw < 20; ++draw) {
    ProjectedProbe probe;
    probe.gv.resize(nv, 2);
    probe.gj.resize(kNumJoints, 2);
    for (int i = 0; i < probe.gv.size(); ++i) probe.gv.data()[i] = n(rng);
    for (int i = 0; i < probe.gj.size(); ++i) probe.gj.data()[i] = n(rng);
    const auto p = random_params(rng, 0.5);
    const VecX<double> analytic = probe.analytic(p);
    const VecX<double> numeric = finite_difference_gradient(
        [&](const VecX<double>& x) { return probe(BodyParams<double>::unchecked(x)); }, p.flat(), 1e-6);
    EXPECT_LT(relative_error(analytic, numeric), 1e-4) << "draw " << draw;
  }
}

}  // namespace
}  // namespace flowfit
