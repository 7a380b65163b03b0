#include <filesystem>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "flowfit/dataset.hpp"
#include "test_util.hpp"

namespace flowfit {
namespace {

namespace fs = std::filesystem;
using testing::toy;

SynthConfig small_config(uint64_t seed = 5) {
  SynthConfig c;
  c.num_sequences = 3;
  c.test_sequences = 1;
  c.frames = 6;
  c.size = {32, 32};
  c.seed = seed;
  c.label_fraction = 0.5;
  c.occluder_probability = 0.5;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowfit_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> archive_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

bool same_flow(const FlowMap& a, const FlowMap& b) {
  return a.height == b.height && a.width == b.width && a.dx == b.dx && a.dy == b.dy && a.valid == b.valid;
}

TEST(Dataset, SameSeedGivesByteIdenticalArchives) {
  const fs::path a = temp_dir("det_a"), b = temp_dir("det_b"), c = temp_dir("det_c");
  save_dataset(generate_dataset(toy(), small_config(5)), a.string());
  save_dataset(generate_dataset(toy(), small_config(5)), b.string());
  save_dataset(generate_dataset(toy(), small_config(6)), c.string());
  const auto fa = archive_files(a), fb = archive_files(b), fc = archive_files(c);
  EXPECT_EQ(fa.size(), 1u + 1u + 3u * (6u + 2u * 5u));
  EXPECT_TRUE(fa == fb);
  EXPECT_FALSE(fa == fc);
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST(Dataset, ConsecutivePairCount) {
  SynthConfig c;
  c.num_sequences = 10;
  c.test_sequences = 2;
  c.frames = 60;
  c.size = {16, 16};
  const Dataset ds = generate_dataset(toy(), c);
  const fs::path dir = temp_dir("pairs");
  save_dataset(ds, dir.string());
  std::ifstream man(dir / "manifest.txt");
  std::string line;
  int pairs = 0;
  while (std::getline(man, line)) pairs += line.rfind("pair ", 0) == 0 ? 1 : 0;
  EXPECT_EQ(pairs, 590);
  EXPECT_EQ(ds.split(Split::kTest).size(), 2u);
  EXPECT_EQ(ds.split(Split::kTest).front()->id, 8);
  fs::remove_all(dir);
}

TEST(Dataset, ArchiveRoundTripIsExact) {
  const Dataset ds = generate_dataset(toy(), small_config());
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(ds, dir.string());
  const Dataset back = load_dataset(dir.string());
  ASSERT_EQ(back.sequences.size(), ds.sequences.size());
  EXPECT_EQ(back.size.height, ds.size.height);
  EXPECT_EQ(back.fps, ds.fps);
  for (size_t s = 0; s < ds.sequences.size(); ++s) {
    const auto &q = ds.sequences[s], &r = back.sequences[s];
    EXPECT_EQ(r.id, q.id);
    EXPECT_EQ(r.split, q.split);
    EXPECT_EQ(r.speed, q.speed);
    EXPECT_EQ(r.labeled, q.labeled);
    ASSERT_EQ(r.length(), q.length());
    for (int t = 0; t < q.length(); ++t) EXPECT_TRUE(r.frames[t] == q.frames[t]);
    for (int t = 0; t + 1 < q.length(); ++t) {
      EXPECT_TRUE(same_flow(r.flow_fwd[t], q.flow_fwd[t]));
      EXPECT_TRUE(same_flow(r.flow_bwd[t], q.flow_bwd[t]));
    }
  }
  ASSERT_EQ(back.labels.size(), ds.labels.size());
  for (const auto& [key, e] : ds.labels.entries()) {
    const auto& f = back.labels.entries().at(key);
    EXPECT_EQ(f.params.flat(), e.params.flat());
    EXPECT_EQ(f.keypoints.xy, e.keypoints.xy);
    EXPECT_EQ(f.keypoints.confidence, e.keypoints.confidence);
  }
  fs::remove_all(dir);
}

TEST(Dataset, MissingOrForeignArchiveIsRejected) {
  const fs::path dir = temp_dir("bad");
  fs::create_directories(dir);
  EXPECT_THROW(load_dataset(dir.string()), Error);
  std::ofstream(dir / "manifest.txt") << "hello\n";
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, ImagesAreQuantized) {
  const Dataset ds = generate_dataset(toy(), small_config());
  for (float v : ds.sequences[0].frames[0].data) EXPECT_FLOAT_EQ(v * 255.0f, std::round(v * 255.0f));
}

TEST(Dataset, TrajectoryMatchesLabels) {
  const SynthConfig c = small_config();
  const Dataset ds = generate_dataset(toy(), c);
  const auto traj = sequence_trajectory(c, 1);
  for (int t = 0; t < c.frames; ++t) EXPECT_EQ(traj[t].flat(), ds.labels.get(1, t).params.flat());
}

TEST(Dataset, InvalidConfigsAreRejected) {
  SynthConfig c = small_config();
  c.test_sequences = c.num_sequences;
  EXPECT_THROW(generate_dataset(toy(), c), ConfigError);
  c = small_config();
  c.frames = 1;
  EXPECT_THROW(generate_dataset(toy(), c), ConfigError);
  c = small_config();
  c.occluder_probability = 2;
  EXPECT_THROW(generate_dataset(toy(), c), ConfigError);
}

TEST(Keypoints, OffscreenJointsAreInvisible) {
  BodyParams<double> p;
  p.camera << 0.9, 0.0, -0.08;
  const auto in = keypoints_for(toy(), p, {64, 64});
  EXPECT_GT(in.confidence.sum(), 12.0);
  for (int j = 0; j < kNumJoints; ++j) EXPECT_TRUE(in.confidence[j] == 0.0 || in.confidence[j] == 1.0);
  p.camera << 0.9, 5.0, 0.0;
  EXPECT_EQ(keypoints_for(toy(), p, {64, 64}).confidence.sum(), 0.0);
}

TEST(LabelStore, CountsAccesses) {
  const Dataset ds = generate_dataset(toy(), small_config());
  EXPECT_EQ(ds.labels.accesses(), 0);
  ds.labels.get(0, 1);
  ds.labels.get(0, 1);
  ds.labels.get(2, 3);
  EXPECT_EQ(ds.labels.accesses(), 3);
  EXPECT_EQ(ds.labels.accessed().size(), 2u);
  EXPECT_THROW(ds.labels.get(9, 0), Error);
}

TEST(MixSeed, StreamsAreDistinct) {
  std::set<uint64_t> seen;
  for (uint64_t a = 0; a < 4; ++a)
    for (uint64_t b = 0; b < 8; ++b)
      for (uint64_t c = 0; c < 8; ++c) seen.insert(mix_seed(a, b, c));
  EXPECT_EQ(seen.size(), 256u);
  EXPECT_EQ(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
}

}  // namespace
}  // namespace flowfit
