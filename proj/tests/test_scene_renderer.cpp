#include <filesystem>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "flowfit/image_io.hpp"
#include "flowfit/scene_renderer.hpp"
#include "test_util.hpp"

namespace flowfit {
namespace {

using testing::random_params;
using testing::toy;

constexpr ImageSize kSize{64, 64};

BodyParams<double> standing() {
  BodyParams<double> p;
  p.camera << 0.95, 0.0, -0.08;
  return p;
}

// Brute-force nearest positive depth along the view ray through (x, y).
double ray_cast(const ScreenMesh& m, const Faces& faces, double x, double y) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    const Eigen::Vector2d a = m.xy.row(faces(f, 0)), b = m.xy.row(faces(f, 1)), c = m.xy.row(faces(f, 2));
    const double det = (b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y());
    if (std::abs(det) < 1e-12) continue;
    const double l1 = ((x - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (y - a.y())) / det;
    const double l2 = ((b.x() - a.x()) * (y - a.y()) - (x - a.x()) * (b.y() - a.y())) / det;
    const double l0 = 1.0 - l1 - l2;
    if (l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9) continue;
    const double z = l0 * m.depth[faces(f, 0)] + l1 * m.depth[faces(f, 1)] + l2 * m.depth[faces(f, 2)];
    if (z > 0) best = std::min(best, z);
  }
  return best;
}

TEST(Render, DeterministicForFixedSeed) {
  const auto a = render(toy(), standing(), kSize, 17);
  const auto b = render(toy(), standing(), kSize, 17);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.depth, b.depth);
  const auto c = render(toy(), standing(), kSize, 18);
  EXPECT_NE(a.image, c.image);
}

TEST(Render, BodyBehindCameraLeavesBackgroundOnly) {
  RenderOptions behind;
  behind.camera_distance = -5.0;
  const auto frame = render(toy(), standing(), kSize, 3, behind);
  for (float d : frame.depth) EXPECT_TRUE(std::isinf(d));
  EXPECT_EQ(frame.image, detail::background_texture(kSize, 3));
}

TEST(Render, DepthIsFiniteExactlyOnSilhouette) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_params(rng);
    const ScreenMesh m = screen_mesh(toy(), p, kSize);
    const auto frame = render(toy(), p, kSize, 1);
    int finite = 0, oracle = 0;
    for (int i = 0; i < kSize.height; ++i) {
      for (int j = 0; j < kSize.width; ++j) {
        finite += std::isfinite(frame.depth[i * kSize.width + j]) ? 1 : 0;
        oracle += std::isfinite(ray_cast(m, toy().faces, j + 0.5, i + 0.5)) ? 1 : 0;
      }
    }
    EXPECT_GT(finite, 100);
    EXPECT_EQ(finite, oracle);
    EXPECT_EQ(finite, silhouette_area(toy(), p, kSize));
  }
}

TEST(Visibility, FrontTorsoVisibleBackHidden) {
  const auto p = standing();
  const auto mask = visibility(toy(), p, kSize);
  const ScreenMesh m = screen_mesh(toy(), p, kSize);
  int front_visible = 0, front = 0, back_visible = 0, back = 0;
  // Torso tube vertices come first (10 rings of 10).
  for (int v = 0; v < 100; ++v) {
    const double z = toy().rest_vertices(v, 2);
    const bool oracle = m.depth[v] <= ray_cast(m, toy().faces, m.xy(v, 0), m.xy(v, 1)) + kDepthEpsilon;
    EXPECT_EQ(mask[v], oracle) << "vertex " << v;
    if (z < -0.05) {
      ++front;
      front_visible += mask[v];
    } else if (z > 0.05) {
      ++back;
      back_visible += mask[v];
    }
  }
  EXPECT_GT(front, 0);
  EXPECT_EQ(front_visible, front);
  EXPECT_EQ(back_visible, 0);
}

TEST(Visibility, MatchesRayCastOracleOnRandomPoses) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_params(rng, 0.5);
    const auto mask = visibility(toy(), p, kSize);
    const ScreenMesh m = screen_mesh(toy(), p, kSize);
    for (int v = 0; v < toy().num_vertices(); ++v) {
      const double x = m.xy(v, 0), y = m.xy(v, 1);
      const bool inside = x >= 0 && x < kSize.width && y >= 0 && y < kSize.height;
      const bool oracle = inside && m.depth[v] <= ray_cast(m, toy().faces, x, y) + kDepthEpsilon;
      EXPECT_EQ(mask[v], oracle) << "trial " << trial << " vertex " << v;
    }
  }
}

TEST(Visibility, OffscreenCameraHidesEverything) {
  auto p = standing();
  p.camera[1] = 5.0;
  EXPECT_EQ(visibility(toy(), p, kSize).count(), 0);
}

TEST(Visibility, VisibleVerticesPassDepthConsistency) {
  std::mt19937_64 rng(4);
  const auto p = random_params(rng, 0.5);
  const ScreenMesh m = screen_mesh(toy(), p, kSize);
  const DepthRaster raster(m, toy().faces, kSize);
  const auto mask = visibility_from(m, raster);
  ASSERT_GT(mask.count(), 50);
  for (int v = 0; v < toy().num_vertices(); ++v) {
    if (!mask[v]) continue;
    EXPECT_LT(std::abs(raster.depth_at(m.xy(v, 0), m.xy(v, 1)) - m.depth[v]), kDepthEpsilon);
  }
}

TEST(Visibility, IndependentOfAppearance) {
  const auto p = standing();
  const auto a = render(toy(), p, kSize, 1), b = render(toy(), p, kSize, 99);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(visibility(toy(), p, kSize).mask, visibility(toy(), p, kSize).mask);
}

TEST(GroundTruthFlow, StaticPairHasZeroFlow) {
  std::mt19937_64 rng(12);
  const auto p = random_params(rng);
  const auto flow = ground_truth_flow(toy(), p, p, kSize);
  ASSERT_GT(flow.valid_count(), 100);
  for (size_t k = 0; k < flow.valid.size(); ++k) {
    if (!flow.valid[k]) continue;
    EXPECT_LT(std::abs(flow.dx[k]), 1e-5);
    EXPECT_LT(std::abs(flow.dy[k]), 1e-5);
  }
}

TEST(GroundTruthFlow, CameraTranslationIsUniform) {
  const auto p1 = standing();
  auto p2 = p1;
  p2.camera[1] += 0.05;
  const auto flow = ground_truth_flow(toy(), p1, p2, kSize);
  const double expected = 0.05 * kSize.width / 2.0 * p1.camera[0];
  ASSERT_GT(flow.valid_count(), 100);
  for (size_t k = 0; k < flow.valid.size(); ++k) {
    if (!flow.valid[k]) continue;
    EXPECT_LT(std::abs(flow.dx[k] - expected), 0.51);
    EXPECT_LT(std::abs(flow.dy[k]), 0.51);
  }
}

TEST(GroundTruthFlow, AgreesWithVertexMotion) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p1 = random_params(rng, 0.4);
    auto p2 = p1;
    std::normal_distribution<double> n(0.0, 0.02);
    for (int j = 0; j < kNumJoints; ++j)
      for (int d = 0; d < 3; ++d) p2.theta(j, d) += n(rng);
    p2.camera[1] += 0.02;
    const auto flow = ground_truth_flow(toy(), p1, p2, kSize);
    const ScreenMesh m1 = screen_mesh(toy(), p1, kSize), m2 = screen_mesh(toy(), p2, kSize);
    const auto vis = visibility(toy(), p1, kSize) & visibility(toy(), p2, kSize);
    int checked = 0;
    for (int v = 0; v < toy().num_vertices(); ++v) {
      if (!vis[v]) continue;
      const auto s = flow.sample(m1.xy(v, 0), m1.xy(v, 1));
      if (!s) continue;
      const Eigen::Vector2d motion = (m2.xy.row(v) - m1.xy.row(v)).transpose();
      EXPECT_LT((*s - motion).norm(), 1.0) << "vertex " << v;
      ++checked;
    }
    EXPECT_GT(checked, 50);
  }
}

TEST(GroundTruthFlow, ValidPixelsAreUnoccludedInBothFrames) {
  std::mt19937_64 rng(33);
  std::uniform_int_distribution<int> pick(0, kSize.height * kSize.width - 1);
  for (int trial = 0; trial < 3; ++trial) {
    const auto p1 = random_params(rng, 0.5);
    auto p2 = p1;
    p2.theta.row(0) += Eigen::RowVector3d(0.0, 0.25, 0.0);
    p2.theta.row(16) += Eigen::RowVector3d(0.0, 0.0, 0.3);
    const auto flow = ground_truth_flow(toy(), p1, p2, kSize);
    const ScreenMesh m1 = screen_mesh(toy(), p1, kSize), m2 = screen_mesh(toy(), p2, kSize);
    const DepthRaster r1(m1, toy().faces, kSize);
    int checked = 0;
    for (int draw = 0; checked < 100 && draw < 100000; ++draw) {
      const int q = pick(rng);
      if (!flow.valid[q]) continue;
      const int i = q / kSize.width, j = q % kSize.width;
      const int f = r1.face(i, j);
      ASSERT_GE(f, 0);
      const Eigen::Vector3d b = r1.pixel_barycentric(i, j);
      double z1 = 0, z2 = 0;
      Eigen::Vector2d p2xy = Eigen::Vector2d::Zero();
      for (int k = 0; k < 3; ++k) {
        const int v = toy().faces(f, k);
        z1 += b[k] * m1.depth[v];
        z2 += b[k] * m2.depth[v];
        p2xy += b[k] * m2.xy.row(v).transpose();
      }
      EXPECT_LE(z1, ray_cast(m1, toy().faces, j + 0.5, i + 0.5) + kDepthEpsilon);
      EXPECT_LE(z2, ray_cast(m2, toy().faces, p2xy.x(), p2xy.y()) + kDepthEpsilon);
      ++checked;
    }
    EXPECT_EQ(checked, 100);
  }
}

TEST(FlowMap, BilinearSampleOfAffineField) {
  FlowMap flow(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      flow.dx[flow.index(i, j)] = 0.5f * j;
      flow.dy[flow.index(i, j)] = 2.0f * i - 1.0f;
      flow.valid[flow.index(i, j)] = 1;
    }
  const auto s = flow.sample(3.25, 4.75);
  ASSERT_TRUE(s);
  EXPECT_NEAR(s->x(), 0.5 * (3.25 - 0.5), 1e-6);
  EXPECT_NEAR(s->y(), 2.0 * (4.75 - 0.5) - 1.0, 1e-6);
  EXPECT_FALSE(flow.sample(-0.1, 2.0));
  EXPECT_FALSE(flow.sample(2.0, 8.0));
  flow.valid.assign(flow.valid.size(), 0);
  EXPECT_FALSE(flow.sample(3.0, 3.0));
}

TEST(FlowMap, FileRoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  const auto p1 = random_params(rng), p2 = random_params(rng);
  const auto flow = ground_truth_flow(toy(), p1, p2, kSize);
  std::stringstream ss;
  write_flow(flow, ss);
  EXPECT_EQ(read_flow(ss), flow);
  EXPECT_EQ(ss.str().size(), 12u + 64 * 64 * 9);
}

TEST(FlowMap, MalformedFilesAreRejected) {
  std::stringstream bad_magic("XXXX");
  EXPECT_THROW(read_flow(bad_magic), FormatError);
  FlowMap flow(4, 4);
  std::stringstream ss;
  write_flow(flow, ss);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_flow(truncated), FormatError);
  bytes[bytes.size() - 1] = 7;
  std::stringstream bad_valid(bytes);
  EXPECT_THROW(read_flow(bad_valid), FormatError);
}

TEST(ImageIo, PpmRoundTripOfQuantizedFrame) {
  auto frame = render(toy(), standing(), kSize, 5);
  quantize_u8(frame.image);
  const auto path = std::filesystem::temp_directory_path() / "flowfit_frame.ppm";
  save_ppm(frame.image, path.string());
  EXPECT_EQ(load_ppm(path.string()), frame.image);
  std::filesystem::remove(path);
}

TEST(Occluder, OverridesFlowInsideRectangle) {
  const auto p = standing();
  auto flow = ground_truth_flow(toy(), p, p, kSize);
  Occluder occ;
  occ.x0 = 20;
  occ.x1 = 40;
  occ.y0 = 10;
  occ.y1 = 30;
  occ.velocity = Vec2<double>(-3.0, 0.0);
  overlay_occluder(flow, occ);
  const auto s = flow.sample(30.0, 20.0);
  ASSERT_TRUE(s);
  EXPECT_DOUBLE_EQ(s->x(), -3.0);
}

}  // namespace
}  // namespace flowfit
