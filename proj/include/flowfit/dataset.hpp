#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "flowfit/image_io.hpp"
#include "flowfit/scene_renderer.hpp"
#include "flowfit/toy_template.hpp"

namespace flowfit {

namespace fs = std::filesystem;

// splitmix64 finalizer, used to derive independent stream seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1) + 0xbf58476d1ce4e5b9ull * (c + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct SynthConfig {
  int num_sequences = 50;
  int test_sequences = 10;  // the last ones are held out
  int frames = 60;
  ImageSize size{64, 64};
  double fps = 30.0;
  double label_fraction = 1.0;  // fraction of frames marked labeled
  uint64_t seed = 0;

  double pose_amplitude = 0.45;  // radians, limb joints
  double out_of_plane = 0.4;     // amplitude factor for rotations about x and y
  double base_frequency = 0.6;   // Hz at speed 1
  double speed_min = 0.5;
  double speed_max = 1.5;
  double yaw_amplitude = 0.5;
  double camera_drift = 0.002;  // normalized units per frame
  double beta_std = 0.5;
  double occluder_probability = 0.0;

  void validate() const {
    if (num_sequences < 1) throw ConfigError("num_sequences must be >= 1");
    if (test_sequences < 0 || test_sequences >= num_sequences) {
      throw ConfigError("test_sequences must be in [0, num_sequences)");
    }
    if (frames < 2) throw ConfigError("frames must be >= 2");
    if (size.height < 8 || size.width < 8) throw ConfigError("image size must be at least 8x8");
    if (!(fps > 0)) throw ConfigError("fps must be > 0");
    if (!(label_fraction >= 0 && label_fraction <= 1)) throw ConfigError("label_fraction must be in [0, 1]");
    if (!(speed_min > 0 && speed_max >= speed_min)) throw ConfigError("need 0 < speed_min <= speed_max");
    if (pose_amplitude < 0 || out_of_plane < 0 || yaw_amplitude < 0 || camera_drift < 0 || beta_std < 0) {
      throw ConfigError("motion amplitudes must be >= 0");
    }
    if (!(occluder_probability >= 0 && occluder_probability <= 1)) {
      throw ConfigError("occluder_probability must be in [0, 1]");
    }
  }
};

// Ground-truth 2D joints of one frame with per-joint visibility confidences.
struct Keypoints {
  Points2<double> xy;
  VecX<double> confidence;
};

// Joints count as visible when in frame and no surface lies more than
// `tolerance` in front of them.
inline Keypoints keypoints_for(const MeshTemplate& tpl, const BodyParams<double>& params, ImageSize size,
                               double tolerance = 0.12, const RenderOptions& opts = {}) {
  ForwardCache<double> cache;
  const BodyMesh<double> mesh = forward(tpl, params, &cache);
  ScreenMesh sm{project<double>(mesh.vertices, params.camera, size),
                mesh.vertices.col(2).array() + opts.camera_distance, mesh.vertices};
  const DepthRaster raster(sm, tpl.faces, size);
  Keypoints k;
  k.xy = project<double>(mesh.joints, params.camera, size);
  k.confidence = VecX<double>::Zero(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) {
    const double x = k.xy(j, 0), y = k.xy(j, 1);
    if (!(x >= 0 && x < size.width && y >= 0 && y < size.height)) continue;
    const double zj = mesh.joints(j, 2) + opts.camera_distance;
    const double front = raster.depth_at(x, y);
    if (!std::isfinite(front) || front >= zj - tolerance) k.confidence[j] = 1.0;
  }
  return k;
}

// Access-counted store of ground truth; training code that must not see
// labels never calls get().
class LabelStore {
 public:
  struct Entry {
    BodyParams<double> params;
    Keypoints keypoints;
  };

  void put(int seq, int frame, Entry e) { entries_[{seq, frame}] = std::move(e); }
  bool contains(int seq, int frame) const { return entries_.count({seq, frame}) > 0; }
  size_t size() const { return entries_.size(); }

  const Entry& get(int seq, int frame) const {
    const auto it = entries_.find({seq, frame});
    if (it == entries_.end()) {
      throw Error("no label for sequence " + std::to_string(seq) + " frame " + std::to_string(frame));
    }
    std::lock_guard lock(*mu_);
    ++accesses_;
    accessed_.insert({seq, frame});
    return it->second;
  }

  long accesses() const {
    std::lock_guard lock(*mu_);
    return accesses_;
  }
  std::set<std::pair<int, int>> accessed() const {
    std::lock_guard lock(*mu_);
    return accessed_;
  }
  void reset_audit() const {
    std::lock_guard lock(*mu_);
    accesses_ = 0;
    accessed_.clear();
  }

  const std::map<std::pair<int, int>, Entry>& entries() const { return entries_; }

 private:
  std::map<std::pair<int, int>, Entry> entries_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  mutable long accesses_ = 0;
  mutable std::set<std::pair<int, int>> accessed_;
};

enum class Split { kTrain, kTest };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

struct Sequence {
  int id = 0;
  Split split = Split::kTrain;
  double speed = 1.0;
  std::vector<Image> frames;
  std::vector<uint8_t> labeled;      // per frame
  std::vector<FlowMap> flow_fwd;     // t -> t+1
  std::vector<FlowMap> flow_bwd;     // t+1 -> t

  int length() const { return static_cast<int>(frames.size()); }
};

struct Dataset {
  ImageSize size{64, 64};
  double fps = 30.0;
  std::vector<Sequence> sequences;
  LabelStore labels;

  std::vector<const Sequence*> split(Split s) const {
    std::vector<const Sequence*> out;
    for (const auto& q : sequences)
      if (q.split == s) out.push_back(&q);
    return out;
  }

  const Sequence& sequence(int id) const {
    for (const auto& q : sequences)
      if (q.id == id) return q;
    throw Error("no sequence " + std::to_string(id));
  }
};

// Per-sequence motion: sinusoidal joint rotations around a random static
// offset, a yawing root, drifting camera and random shape.
struct MotionModel {
  struct Wave {
    double amplitude = 0, frequency = 0, phase = 0;
  };
  std::array<std::array<Wave, 3>, kNumJoints> waves{};
  std::array<std::array<double, 3>, kNumJoints> offset{};
  Wave yaw;
  VecX<double> beta = VecX<double>::Zero(kNumShape);
  Vec3<double> camera0 = Vec3<double>(0.9, 0.0, -0.08);
  Vec3<double> camera_velocity = Vec3<double>::Zero();
  double speed = 1.0;
  double fps = 30.0;

  static double joint_weight(int j) {
    using namespace joints;
    switch (j) {
      case kLShoulder: case kRShoulder: case kLElbow: case kRElbow:
      case kLHip: case kRHip: case kLKnee: case kRKnee:
        return 1.0;
      case kPelvis:
        return 0.0;
      default:
        return 0.3;
    }
  }

  static MotionModel sample(const SynthConfig& cfg, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    MotionModel m;
    m.fps = cfg.fps;
    m.speed = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * u(rng);
    for (int j = 0; j < kNumJoints; ++j) {
      const double w = joint_weight(j);
      for (int d = 0; d < 3; ++d) {
        const double a = (d == 2 ? 1.0 : cfg.out_of_plane) * w * cfg.pose_amplitude;
        m.offset[j][d] = 0.25 * a * n(rng);
        m.waves[j][d] = {a * (0.3 + 0.7 * u(rng)),
                         cfg.base_frequency * m.speed * (0.7 + 0.6 * u(rng)), 2 * std::numbers::pi * u(rng)};
      }
    }
    m.yaw = {cfg.yaw_amplitude * u(rng), cfg.base_frequency * m.speed * (0.3 + 0.4 * u(rng)),
             2 * std::numbers::pi * u(rng)};
    for (int k = 0; k < kNumShape; ++k) m.beta[k] = cfg.beta_std * n(rng);
    m.camera0 = Vec3<double>(0.8 + 0.15 * u(rng), 0.1 * (u(rng) - 0.5), -0.08 + 0.08 * (u(rng) - 0.5));
    m.camera_velocity = Vec3<double>(0.0, cfg.camera_drift * n(rng), cfg.camera_drift * n(rng));
    return m;
  }

  BodyParams<double> at(double frame) const {
    const double t = frame / fps;
    BodyParams<double> p;
    for (int j = 0; j < kNumJoints; ++j)
      for (int d = 0; d < 3; ++d) {
        const Wave& w = waves[j][d];
        p.theta(j, d) = offset[j][d] + w.amplitude * std::sin(2 * std::numbers::pi * w.frequency * t + w.phase);
      }
    p.theta(0, 1) = yaw.amplitude * std::sin(2 * std::numbers::pi * yaw.frequency * t + yaw.phase);
    p.beta = beta;
    p.camera = camera0 + frame * camera_velocity;
    return p;
  }
};

// Ground-truth parameter trajectory of one generated sequence.
inline std::vector<BodyParams<double>> sequence_trajectory(const SynthConfig& cfg, int seq) {
  const MotionModel m = MotionModel::sample(cfg, mix_seed(cfg.seed, 1, seq));
  std::vector<BodyParams<double>> out;
  for (int t = 0; t < cfg.frames; ++t) out.push_back(m.at(t));
  return out;
}

inline Dataset generate_dataset(const MeshTemplate& tpl, const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.size = cfg.size;
  ds.fps = cfg.fps;
  for (int s = 0; s < cfg.num_sequences; ++s) {
    Sequence q;
    q.id = s;
    q.split = s >= cfg.num_sequences - cfg.test_sequences ? Split::kTest : Split::kTrain;
    const MotionModel motion = MotionModel::sample(cfg, mix_seed(cfg.seed, 1, s));
    q.speed = motion.speed;
    const uint64_t appearance = mix_seed(cfg.seed, 2, s);
    std::mt19937_64 rng(mix_seed(cfg.seed, 3, s));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::optional<Occluder> occ;
    if (u(rng) < cfg.occluder_probability) {
      Occluder o;
      const double w = cfg.size.width, h = cfg.size.height;
      o.x0 = w * (0.1 + 0.6 * u(rng));
      o.y0 = h * (0.1 + 0.6 * u(rng));
      o.x1 = o.x0 + w * (0.1 + 0.15 * u(rng));
      o.y1 = o.y0 + h * (0.1 + 0.15 * u(rng));
      o.velocity = Vec2<double>(2.0 * (u(rng) - 0.5), 2.0 * (u(rng) - 0.5));
      o.color = Eigen::Vector3f(u(rng), u(rng), u(rng));
      occ = o;
    }
    auto occluder_at = [&](int t) {
      Occluder o = *occ;
      o.x0 += o.velocity.x() * t;
      o.x1 += o.velocity.x() * t;
      o.y0 += o.velocity.y() * t;
      o.y1 += o.velocity.y() * t;
      return o;
    };
    std::vector<BodyParams<double>> params;
    for (int t = 0; t < cfg.frames; ++t) {
      params.push_back(motion.at(t));
      Image img = render(tpl, params.back(), cfg.size, appearance).image;
      if (occ) overlay_occluder(img, occluder_at(t));
      quantize_u8(img);
      q.frames.push_back(std::move(img));
      q.labeled.push_back(u(rng) < cfg.label_fraction ? 1 : 0);
      ds.labels.put(s, t, {params.back(), keypoints_for(tpl, params.back(), cfg.size)});
    }
    for (int t = 0; t + 1 < cfg.frames; ++t) {
      FlowMap fwd = ground_truth_flow(tpl, params[t], params[t + 1], cfg.size);
      FlowMap bwd = ground_truth_flow(tpl, params[t + 1], params[t], cfg.size);
      if (occ) {
        Occluder back = occluder_at(t + 1);
        back.velocity = -back.velocity;
        overlay_occluder(fwd, occluder_at(t));
        overlay_occluder(bwd, back);
      }
      q.flow_fwd.push_back(std::move(fwd));
      q.flow_bwd.push_back(std::move(bwd));
    }
    ds.sequences.push_back(std::move(q));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Archive layout:
//   manifest.txt           "# key=value" header, then one record per pair
//   labels.txt             one line per frame: seq frame 85 params,
//                          24 x (x y confidence)
//   seq_NNN/frame_TTT.ppm  8-bit frames
//   seq_NNN/fwd_TTT.fflo   flow t -> t+1;  bwd_TTT.fflo: t+1 -> t

namespace detail {

inline std::string seq_dir(int s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%03d", s);
  return buf;
}

inline std::string numbered(const char* stem, int t, const char* ext) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, t, ext);
  return buf;
}

inline std::map<std::string, std::string> parse_record(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("manifest token without '=': " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("manifest record is missing '" + key + "'");
  return it->second;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream man(fs::path(dir) / "manifest.txt");
  if (!man) throw Error("cannot write manifest in " + dir);
  man << "# flowfit-dataset version=1\n";
  man << "# height=" << ds.size.height << " width=" << ds.size.width << " fps=" << ds.fps
      << " sequences=" << ds.sequences.size() << "\n";
  for (const auto& q : ds.sequences) {
    const fs::path sd = fs::path(dir) / detail::seq_dir(q.id);
    fs::create_directories(sd);
    char speed[32];
    std::snprintf(speed, sizeof speed, "%.17g", q.speed);
    man << "# sequence id=" << q.id << " frames=" << q.length() << " split=" << split_name(q.split)
        << " speed=" << speed << "\n";
    for (int t = 0; t < q.length(); ++t) save_ppm(q.frames[t], (sd / detail::numbered("frame", t, "ppm")).string());
    for (int t = 0; t + 1 < q.length(); ++t) {
      save_flow(q.flow_fwd[t], (sd / detail::numbered("fwd", t, "fflo")).string());
      save_flow(q.flow_bwd[t], (sd / detail::numbered("bwd", t, "fflo")).string());
      const std::string s = detail::seq_dir(q.id) + "/";
      man << "pair seq=" << q.id << " frame=" << t << " delta_t=1"
          << " image_1=" << s << detail::numbered("frame", t, "ppm")
          << " image_2=" << s << detail::numbered("frame", t + 1, "ppm")
          << " flow_12=" << s << detail::numbered("fwd", t, "fflo")
          << " flow_21=" << s << detail::numbered("bwd", t, "fflo")
          << " labeled_1=" << int(q.labeled[t]) << " labeled_2=" << int(q.labeled[t + 1])
          << " split=" << split_name(q.split) << "\n";
    }
  }
  if (!man) throw Error("failed writing manifest in " + dir);

  std::ofstream lab(fs::path(dir) / "labels.txt");
  if (!lab) throw Error("cannot write labels in " + dir);
  char buf[40];
  for (const auto& [key, e] : ds.labels.entries()) {
    lab << key.first << " " << key.second;
    const VecX<double> flat = e.params.flat();
    for (int k = 0; k < kParamDim; ++k) {
      std::snprintf(buf, sizeof buf, " %.17g", flat[k]);
      lab << buf;
    }
    for (int j = 0; j < kNumJoints; ++j) {
      std::snprintf(buf, sizeof buf, " %.17g", e.keypoints.xy(j, 0));
      lab << buf;
      std::snprintf(buf, sizeof buf, " %.17g", e.keypoints.xy(j, 1));
      lab << buf << " " << e.keypoints.confidence[j];
    }
    lab << "\n";
  }
  if (!lab) throw Error("failed writing labels in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream man(fs::path(dir) / "manifest.txt");
  if (!man) throw Error("no manifest.txt in " + dir + " (run synth-gen first)");
  Dataset ds;
  std::string line;
  std::map<int, Sequence> seqs;
  std::map<int, int> lengths;
  bool versioned = false;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    if (line.rfind("# flowfit-dataset", 0) == 0) {
      versioned = true;
      continue;
    }
    if (line.rfind("# sequence ", 0) == 0) {
      const auto kv = detail::parse_record(line.substr(11));
      Sequence q;
      q.id = std::stoi(detail::field(kv, "id"));
      q.split = detail::field(kv, "split") == "test" ? Split::kTest : Split::kTrain;
      q.speed = std::stod(detail::field(kv, "speed"));
      lengths[q.id] = std::stoi(detail::field(kv, "frames"));
      q.labeled.assign(lengths[q.id], 0);
      seqs[q.id] = std::move(q);
      continue;
    }
    if (line.rfind("# ", 0) == 0) {
      const auto kv = detail::parse_record(line.substr(2));
      ds.size.height = std::stoi(detail::field(kv, "height"));
      ds.size.width = std::stoi(detail::field(kv, "width"));
      ds.fps = std::stod(detail::field(kv, "fps"));
      continue;
    }
    if (line.rfind("pair ", 0) != 0) throw FormatError("unknown manifest record: " + line);
    const auto kv = detail::parse_record(line.substr(5));
    const int s = std::stoi(detail::field(kv, "seq"));
    const int t = std::stoi(detail::field(kv, "frame"));
    auto it = seqs.find(s);
    if (it == seqs.end() || t < 0 || t + 1 >= lengths[s]) throw FormatError("pair record out of range: " + line);
    if (std::stoi(detail::field(kv, "delta_t")) != 1) throw FormatError("only delta_t=1 pairs are stored");
    Sequence& q = it->second;
    if (static_cast<int>(q.flow_fwd.size()) != t) throw FormatError("pair records out of order: " + line);
    const fs::path root(dir);
    if (t == 0) q.frames.push_back(load_ppm((root / detail::field(kv, "image_1")).string()));
    q.frames.push_back(load_ppm((root / detail::field(kv, "image_2")).string()));
    q.flow_fwd.push_back(load_flow((root / detail::field(kv, "flow_12")).string()));
    q.flow_bwd.push_back(load_flow((root / detail::field(kv, "flow_21")).string()));
    q.labeled[t] = static_cast<uint8_t>(std::stoi(detail::field(kv, "labeled_1")));
    q.labeled[t + 1] = static_cast<uint8_t>(std::stoi(detail::field(kv, "labeled_2")));
  }
  if (!versioned) throw FormatError(dir + "/manifest.txt is not a flowfit dataset manifest");
  for (auto& [id, q] : seqs) {
    if (q.length() != lengths[id]) throw FormatError("sequence " + std::to_string(id) + " is incomplete");
    for (const auto& img : q.frames)
      if (img.height != ds.size.height || img.width != ds.size.width) {
        throw FormatError("frame size does not match manifest in sequence " + std::to_string(id));
      }
    ds.sequences.push_back(std::move(q));
  }

  std::ifstream lab(fs::path(dir) / "labels.txt");
  if (lab) {
    while (std::getline(lab, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      int s = 0, t = 0;
      ss >> s >> t;
      VecX<double> flat(kParamDim);
      for (int k = 0; k < kParamDim; ++k) ss >> flat[k];
      LabelStore::Entry e{BodyParams<double>::unchecked(flat), {Points2<double>(kNumJoints, 2), VecX<double>(kNumJoints)}};
      for (int j = 0; j < kNumJoints; ++j) ss >> e.keypoints.xy(j, 0) >> e.keypoints.xy(j, 1) >> e.keypoints.confidence[j];
      if (!ss) throw FormatError("malformed labels.txt line for sequence " + std::to_string(s));
      ds.labels.put(s, t, std::move(e));
    }
  }
  return ds;
}

}  // namespace flowfit
