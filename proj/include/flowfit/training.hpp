#pragma once

#include <cstdlib>
#include <functional>
#include <thread>

#include "flowfit/dataset.hpp"
#include "flowfit/flow_supervision.hpp"
#include "flowfit/regressor.hpp"
#include "flowfit/rotation.hpp"

namespace flowfit {

class TrainingError : public Error {
 public:
  using Error::Error;
};

// Worker count from FLOWFIT_NUM_WORKERS, default 1.
inline int default_workers() {
  const char* env = std::getenv("FLOWFIT_NUM_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw ConfigError("FLOWFIT_NUM_WORKERS must be an integer in [1, 256]");
  return static_cast<int>(n);
}

// Runs fn(i) for i in [0, n). Each index must write only its own output slot,
// so results do not depend on the worker count.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct SupervisedWeights {
  double rotation = 1.0;
  double beta = 1.0;
  double camera = 1.0;
  double joints_2d = 1.0;
  double joints_3d = 1.0;
};

struct TrainConfig {
  double lambda_sup = 1.0;
  double lambda_of = 0.01;
  double lambda_tp = 10.0;  // reserved, unused
  double lambda_2d = 0.0;
  double lambda_theta = 1.0;
  double lambda_beta = 1.0;
  double lambda_smooth = 0.0;
  int smooth_window = 30;

  double label_fraction = 1.0;
  double unlabeled_fraction = 1.0;  // share of training pairs in the unlabeled pool
  int labeled_batch = 8;
  int pair_batch = 8;
  double color_noise_std = 0.02;
  bool flow_threshold = true;
  bool flow_scale = true;

  double learning_rate = 1e-4;
  int steps = 1000;
  uint64_t seed = 0;

  int context_length = 0;  // N - 1
  bool freeze_baseline = false;
  int context_refresh = 100;

  SupervisedWeights sup;
  int workers = 1;

  void validate() const {
    for (double w : {lambda_sup, lambda_of, lambda_tp, lambda_2d, lambda_theta, lambda_beta, lambda_smooth}) {
      if (!(w >= 0)) throw ConfigError("loss weights must be >= 0");
    }
    for (double w : {sup.rotation, sup.beta, sup.camera, sup.joints_2d, sup.joints_3d}) {
      if (!(w >= 0)) throw ConfigError("supervised loss weights must be >= 0");
    }
    if (!(label_fraction > 0 && label_fraction <= 1)) throw ConfigError("label_fraction p must be in (0, 1]");
    if (!(unlabeled_fraction > 0 && unlabeled_fraction <= 1)) {
      throw ConfigError("unlabeled_fraction must be in (0, 1]");
    }
    if (labeled_batch < 0 || pair_batch < 0 || labeled_batch + pair_batch == 0) {
      throw ConfigError("batch sizes must be >= 0 and not both zero");
    }
    if (!(color_noise_std >= 0)) throw ConfigError("color_noise_std must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (context_length < 0 || context_length > 8) throw ConfigError("context_length must be in [0, 8]");
    if (context_refresh < 1) throw ConfigError("context_refresh must be >= 1");
    if (smooth_window < 1) throw ConfigError("smooth_window must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
  }

  FlowLossOptions flow_options() const {
    FlowLossOptions o;
    o.threshold = flow_threshold;
    o.scale = flow_scale;
    return o;
  }
};

// One logged optimization step. total == lambda_sup*sup + lambda_of*of +
// lambda_2d*keypoints + anchor + smooth.
struct StepLog {
  int step = 0;
  double total = 0, sup = 0, of = 0, keypoints = 0, anchor = 0, smooth = 0;
  int pairs_used = 0, pairs_skipped = 0;
};

struct TrainLog {
  std::vector<StepLog> steps;
  long skipped_pairs = 0;
};

// ---------------------------------------------------------------------------
// Losses on body parameters, evaluated in double.

struct SupervisedTarget {
  BodyParams<double> params;
  Points3<double> joints;  // root-relative, meters
  Points2<double> joints_2d;  // normalized image units
  std::array<Mat3<double>, kNumJoints> rotations;
};

inline Points2<double> normalized_joints(const Points3<double>& joints, const Vec3<double>& camera) {
  Points2<double> n(joints.rows(), 2);
  for (Eigen::Index j = 0; j < joints.rows(); ++j) {
    n(j, 0) = camera[0] * (joints(j, 0) + camera[1]);
    n(j, 1) = camera[0] * (joints(j, 1) + camera[2]);
  }
  return n;
}

inline Points3<double> root_relative(const Points3<double>& joints) {
  return joints.rowwise() - joints.row(0);
}

inline SupervisedTarget make_target(const MeshTemplate& tpl, const BodyParams<double>& gt) {
  SupervisedTarget t;
  t.params = gt;
  const BodyMesh<double> mesh = forward(tpl, gt);
  t.joints = root_relative(mesh.joints);
  t.joints_2d = normalized_joints(mesh.joints, gt.camera);
  for (int j = 0; j < kNumJoints; ++j) t.rotations[j] = rodrigues<double>(gt.theta.row(j).transpose());
  return t;
}

struct SupervisedParts {
  double rotation = 0, beta = 0, camera = 0, joints_2d = 0, joints_3d = 0, total = 0;
};

// Squared-error parameter, 2D and 3D joint terms; each term is a mean over
// its elements (per joint for rotations and joints).
inline SupervisedParts supervised_loss(const MeshTemplate& tpl, const BodyParams<double>& pred,
                                       const SupervisedTarget& target, const SupervisedWeights& w,
                                       BodyParamsGrad<double>* grad) {
  SupervisedParts p;
  ForwardCache<double> cache;
  const BodyMesh<double> mesh = forward(tpl, pred, &cache);
  const double inv_j = 1.0 / kNumJoints;

  for (int j = 0; j < kNumJoints; ++j) {
    const Vec3<double> wj = pred.theta.row(j).transpose();
    const Mat3<double> d = rodrigues<double>(wj) - target.rotations[j];
    p.rotation += d.squaredNorm() * inv_j;
    if (grad && w.rotation > 0) grad->theta.row(j) += (w.rotation * rodrigues_vjp<double>(wj, 2.0 * inv_j * d)).transpose();
  }
  const VecX<double> db = pred.beta - target.params.beta;
  p.beta = db.squaredNorm() / kNumShape;
  const Vec3<double> dc = pred.camera - target.params.camera;
  p.camera = dc.squaredNorm();

  const Points3<double> rel = root_relative(mesh.joints);
  const Points3<double> d3 = rel - target.joints;
  p.joints_3d = d3.squaredNorm() * inv_j;
  const Points2<double> n2 = normalized_joints(mesh.joints, pred.camera);
  const Points2<double> d2 = n2 - target.joints_2d;
  p.joints_2d = d2.squaredNorm() * inv_j;

  p.total = w.rotation * p.rotation + w.beta * p.beta + w.camera * p.camera + w.joints_2d * p.joints_2d +
            w.joints_3d * p.joints_3d;
  if (!grad) return p;

  grad->beta += w.beta * 2.0 / kNumShape * db;
  grad->camera += w.camera * 2.0 * dc;
  Points3<double> gj = Points3<double>::Zero(kNumJoints, 3);
  const Points3<double> g3 = w.joints_3d * 2.0 * inv_j * d3;
  gj += g3;
  gj.row(0) -= g3.colwise().sum();
  const Points2<double> g2 = w.joints_2d * 2.0 * inv_j * d2;
  const double s = pred.camera[0];
  for (int j = 0; j < kNumJoints; ++j) {
    gj(j, 0) += s * g2(j, 0);
    gj(j, 1) += s * g2(j, 1);
    grad->camera[0] += g2(j, 0) * (mesh.joints(j, 0) + pred.camera[1]) + g2(j, 1) * (mesh.joints(j, 1) + pred.camera[2]);
    grad->camera[1] += s * g2(j, 0);
    grad->camera[2] += s * g2(j, 1);
  }
  forward_vjp(tpl, pred, cache, Points3<double>(), gj, *grad);
  return p;
}

// lambda_theta * |theta - theta0| + lambda_beta * |beta - beta0| (unsquared
// norms, zero subgradient at the anchor).
inline double anchor_loss(const BodyParams<double>& pred, const BodyParams<double>& anchor, double lambda_theta,
                          double lambda_beta, BodyParamsGrad<double>* grad) {
  const VecX<double> dt = Eigen::Map<const VecX<double>>(pred.theta.data(), kPoseDim) -
                          Eigen::Map<const VecX<double>>(anchor.theta.data(), kPoseDim);
  const VecX<double> db = pred.beta - anchor.beta;
  const double nt = dt.norm(), nb = db.norm();
  if (grad) {
    if (nt > 0) {
      const VecX<double> g = lambda_theta / nt * dt;
      grad->theta += Eigen::Map<const Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor>>(g.data());
    }
    if (nb > 0) grad->beta += lambda_beta / nb * db;
  }
  return lambda_theta * nt + lambda_beta * nb;
}

// I.i.d. Gaussian noise per channel, clipped to [0, 1].
inline Image apply_color_noise(const Image& image, double stddev, uint64_t seed) {
  if (!(stddev >= 0)) throw ValidationError("color noise std must be >= 0");
  if (stddev == 0) return image;
  Image out = image;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, static_cast<float>(stddev));
  for (float& v : out.data) v = std::clamp(v + n(rng), 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Samples.

struct LabeledFrame {
  const Image* image = nullptr;
  SupervisedTarget target;
  int sequence_id = 0;
  int frame_index = 0;
};

struct PairKeypoints {
  Points2<double> xy_1, xy_2;  // pixels
  VecX<double> confidence_1, confidence_2;
};

struct FramePairSample {
  const Image* image_1 = nullptr;
  const Image* image_2 = nullptr;
  const FlowMap* flow_1to2 = nullptr;
  const FlowMap* flow_2to1 = nullptr;
  std::optional<BodyParams<double>> gt_params_1, gt_params_2;
  std::optional<PairKeypoints> keypoints;
  int sequence_id = 0;
  int frame_index = 0;
  int delta_t = 1;

  void validate() const {
    if (!image_1 || !image_2 || !flow_1to2) throw ValidationError("pair sample needs both images and flow_1to2");
    if (delta_t < 1) throw ValidationError("pair delta_t must be >= 1");
    const ImageSize size{image_1->height, image_1->width};
    auto check = [&](const FlowMap* f) {
      if (f && (f->height != size.height || f->width != size.width)) {
        throw ValidationError("flow size does not match image size");
      }
    };
    check(flow_1to2);
    check(flow_2to1);
  }
};

// Deterministic labeled subset of training frames: the first ceil(p * N) of a
// seeded permutation of frames marked labeled.
inline std::vector<std::pair<int, int>> select_labeled(const Dataset& ds, double p, uint64_t seed) {
  if (!(p > 0 && p <= 1)) throw ConfigError("label fraction p must be in (0, 1]");
  std::vector<std::pair<int, int>> all;
  for (const Sequence* q : ds.split(Split::kTrain))
    for (int t = 0; t < q->length(); ++t)
      if (q->labeled[t]) all.emplace_back(q->id, t);
  std::mt19937_64 rng(mix_seed(seed, 11));
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<size_t>(std::ceil(p * static_cast<double>(all.size()) - 1e-9)));
  std::sort(all.begin(), all.end());
  return all;
}

inline std::vector<LabeledFrame> labeled_frames(const MeshTemplate& tpl, const Dataset& ds,
                                                const std::vector<std::pair<int, int>>& keys) {
  std::vector<LabeledFrame> out;
  for (const auto& [s, t] : keys) {
    const Sequence& q = ds.sequence(s);
    out.push_back({&q.frames[t], make_target(tpl, ds.labels.get(s, t).params), s, t});
  }
  return out;
}

// Consecutive training pairs carrying images and flows only.
inline std::vector<FramePairSample> unlabeled_pairs(const Dataset& ds, double fraction = 1.0, uint64_t seed = 0) {
  std::vector<FramePairSample> out;
  for (const Sequence* q : ds.split(Split::kTrain))
    for (int t = 0; t + 1 < q->length(); ++t) {
      FramePairSample s;
      s.image_1 = &q->frames[t];
      s.image_2 = &q->frames[t + 1];
      s.flow_1to2 = &q->flow_fwd[t];
      s.flow_2to1 = &q->flow_bwd[t];
      s.sequence_id = q->id;
      s.frame_index = t;
      out.push_back(s);
    }
  if (fraction < 1.0) {
    std::mt19937_64 rng(mix_seed(seed, 12));
    std::shuffle(out.begin(), out.end(), rng);
    out.resize(std::max<size_t>(1, static_cast<size_t>(std::ceil(fraction * out.size() - 1e-9))));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return std::pair(a.sequence_id, a.frame_index) < std::pair(b.sequence_id, b.frame_index);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction with temporal context.

// Flat no-context predictions for every frame of a sequence.
inline MatX<float> predict_sequence_plain(const Regressor<float>& net, const Sequence& q, int batch = 32) {
  MatX<float> out(q.length(), kParamDim);
  for (int t0 = 0; t0 < q.length(); t0 += batch) {
    std::vector<const Image*> imgs;
    for (int t = t0; t < std::min(q.length(), t0 + batch); ++t) imgs.push_back(&q.frames[t]);
    out.middleRows(t0, imgs.size()) = net.forward(imgs);
  }
  return out;
}

// Up to `length` rows preceding frame t, oldest first.
inline MatX<float> history_rows(const MatX<float>& plain, int t, int length) {
  const int start = std::max(0, t - length);
  return plain.middleRows(start, t - start);
}

// Per-frame predictions; with a context network each frame is modulated by
// the no-context predictions of its preceding frames.
inline std::vector<BodyParams<double>> predict_sequence(const Model<float>& model, const Sequence& q) {
  const MatX<float> plain = predict_sequence_plain(model.regressor, q);
  MatX<float> out = plain;
  if (model.context) {
    const int length = model.context->config().max_history;
    for (int t = 0; t < q.length(); ++t) {
      const auto ctx = model.context->forward(history_rows(plain, t, length));
      out.row(t) = model.regressor.predict(q.frames[t], ctx).flat().transpose();
    }
  }
  std::vector<BodyParams<double>> params;
  for (int t = 0; t < q.length(); ++t) params.push_back(BodyParams<double>::unchecked(out.row(t).transpose().cast<double>()));
  return params;
}

// ---------------------------------------------------------------------------
// Training loop shared by all network regimes.

namespace detail {

enum class PairMode { kNone, kFlow, kAnchored };

struct LoopInputs {
  const MeshTemplate* tpl = nullptr;
  const Dataset* dataset = nullptr;  // for context histories; may be null without context
  std::vector<LabeledFrame> labeled;
  std::vector<FramePairSample> pairs;
  // Frozen per-frame anchors keyed by (sequence, frame), for kAnchored.
  std::map<std::pair<int, int>, BodyParams<double>> anchors;
  PairMode mode = PairMode::kNone;
};

struct ForwardBatch {
  Regressor<float>::Cache cache;
  std::vector<ContextNetwork<float>::Cache> ctx;
  MatX<float> out;
};

class Trainer {
 public:
  Trainer(Model<float>& model, const LoopInputs& in, const TrainConfig& cfg) : model_(model), in_(in), cfg_(cfg) {
    if (model_.context && model_.context->config().max_history != cfg_.context_length) {
      throw ConfigError("model context length " + std::to_string(model_.context->config().max_history) +
                        " differs from train.context_length " + std::to_string(cfg_.context_length));
    }
    if (model_.context && !in_.dataset) throw ConfigError("context training needs sequence data");
  }

  std::vector<nn::Parameter<float>*> trainable() {
    std::vector<nn::Parameter<float>*> ps;
    if (!cfg_.freeze_baseline)
      for (auto* p : model_.regressor.parameters()) ps.push_back(p);
    if (model_.context)
      for (auto* p : model_.context->parameters()) ps.push_back(p);
    return ps;
  }

  TrainLog run() {
    TrainLog log;
    nn::Adam<float> opt(trainable(), {.learning_rate = cfg_.learning_rate});
    std::mt19937_64 labeled_rng(mix_seed(cfg_.seed, 100));
    std::mt19937_64 pair_rng(mix_seed(cfg_.seed, 200));
    const bool use_labeled = cfg_.labeled_batch > 0 && !in_.labeled.empty();
    const bool use_pairs = in_.mode != PairMode::kNone && cfg_.pair_batch > 0 && !in_.pairs.empty();
    for (int step = 0; step < cfg_.steps; ++step) {
      if (model_.context && step % cfg_.context_refresh == 0) refresh_history();
      for (auto* p : model_.parameters()) p->zero_grad();
      StepLog sl;
      sl.step = step;
      std::vector<int> li, pi;
      if (use_labeled) {
        std::uniform_int_distribution<int> d(0, static_cast<int>(in_.labeled.size()) - 1);
        for (int k = 0; k < cfg_.labeled_batch; ++k) li.push_back(d(labeled_rng));
      }
      if (use_pairs) {
        std::uniform_int_distribution<int> d(0, static_cast<int>(in_.pairs.size()) - 1);
        for (int k = 0; k < cfg_.pair_batch; ++k) pi.push_back(d(pair_rng));
      }
      step_ = step;
      batch_l_ = li;
      batch_p_ = pi;
      if (!li.empty()) labeled_step(li, sl);
      if (!pi.empty()) pair_step(pi, step, sl);
      sl.total = cfg_.lambda_sup * sl.sup + cfg_.lambda_of * sl.of + cfg_.lambda_2d * sl.keypoints + sl.anchor;
      if (!std::isfinite(sl.total)) throw TrainingError(nan_message(step, li, pi));
      log.skipped_pairs += sl.pairs_skipped;
      log.steps.push_back(sl);
      opt.step();
    }
    return log;
  }

  // Gradients of one step's loss for given sample indices, left in the
  // parameters' grad fields (used for the linearity audit).
  StepLog gradients(const std::vector<int>& li, const std::vector<int>& pi, int step = 0) {
    if (model_.context) refresh_history();
    for (auto* p : model_.parameters()) p->zero_grad();
    StepLog sl;
    step_ = step;
    batch_l_ = li;
    batch_p_ = pi;
    if (!li.empty()) labeled_step(li, sl);
    if (!pi.empty()) pair_step(pi, step, sl);
    sl.total = cfg_.lambda_sup * sl.sup + cfg_.lambda_of * sl.of + cfg_.lambda_2d * sl.keypoints + sl.anchor;
    return sl;
  }

 private:
  std::string nan_message(int step, const std::vector<int>& li, const std::vector<int>& pi) const {
    std::ostringstream os;
    os << "non-finite loss at step " << step << "; labeled batch:";
    for (int i : li) os << " " << in_.labeled[i].sequence_id << "/" << in_.labeled[i].frame_index;
    os << "; pair batch:";
    for (int i : pi) os << " " << in_.pairs[i].sequence_id << "/" << in_.pairs[i].frame_index;
    return os.str();
  }

  void refresh_history() {
    history_.clear();
    for (const auto& q : in_.dataset->sequences) history_[q.id] = predict_sequence_plain(model_.regressor, q);
  }

  // Forward pass with per-frame context (sequence, frame) keys.
  ForwardBatch forward(const std::vector<const Image*>& imgs, const std::vector<std::pair<int, int>>& keys) {
    ForwardBatch fb;
    if (!model_.context) {
      fb.out = model_.regressor.forward(imgs, nullptr, nullptr, &fb.cache);
      check_output(fb.out);
      return fb;
    }
    const int n = static_cast<int>(imgs.size()), dim = model_.regressor.feature_dim();
    MatX<float> gamma(n, dim), delta(n, dim);
    fb.ctx.resize(n);
    for (int k = 0; k < n; ++k) {
      const auto it = history_.find(keys[k].first);
      if (it == history_.end()) throw Error("no history for sequence " + std::to_string(keys[k].first));
      const auto a = model_.context->forward(history_rows(it->second, keys[k].second, cfg_.context_length), &fb.ctx[k]);
      gamma.row(k) = a.gamma.transpose();
      delta.row(k) = a.delta.transpose();
    }
    fb.out = model_.regressor.forward(imgs, &gamma, &delta, &fb.cache);
    check_output(fb.out);
    return fb;
  }

  void check_output(const MatX<float>& out) const {
    if (!out.allFinite()) throw TrainingError(nan_message(step_, batch_l_, batch_p_) + " (network output)");
  }

  void backward(ForwardBatch& fb, const MatX<float>& grad_out) {
    MatX<float> gg, gd;
    model_.regressor.backward(fb.cache, grad_out, model_.context ? &gg : nullptr, model_.context ? &gd : nullptr,
                              !cfg_.freeze_baseline);
    if (model_.context)
      for (size_t k = 0; k < fb.ctx.size(); ++k) model_.context->backward(fb.ctx[k], gg.row(k).transpose(), gd.row(k).transpose());
  }

  static BodyParams<double> to_params(const MatX<float>& out, int row) {
    return BodyParams<double>::unchecked(out.row(row).transpose().cast<double>());
  }

  void labeled_step(const std::vector<int>& li, StepLog& sl) {
    const int n = static_cast<int>(li.size());
    std::vector<const Image*> imgs;
    std::vector<std::pair<int, int>> keys;
    for (int i : li) {
      imgs.push_back(in_.labeled[i].image);
      keys.emplace_back(in_.labeled[i].sequence_id, in_.labeled[i].frame_index);
    }
    ForwardBatch fb = forward(imgs, keys);
    std::vector<double> losses(n);
    MatX<float> grad(n, kParamDim);
    parallel_for(n, cfg_.workers, [&](int k) {
      BodyParamsGrad<double> g;
      losses[k] = supervised_loss(*in_.tpl, to_params(fb.out, k), in_.labeled[li[k]].target, cfg_.sup, &g).total;
      grad.row(k) = (cfg_.lambda_sup / n * g.flat()).cast<float>().transpose();
    });
    for (double l : losses) sl.sup += l / n;
    if (cfg_.lambda_sup > 0) backward(fb, grad);
  }

  void pair_step(const std::vector<int>& pi, int step, StepLog& sl) {
    const int n = static_cast<int>(pi.size());
    std::vector<Image> noisy(2 * n);
    std::vector<const Image*> imgs(2 * n);
    std::vector<std::pair<int, int>> keys(2 * n);
    for (int k = 0; k < n; ++k) {
      const auto& s = in_.pairs[pi[k]];
      for (int f = 0; f < 2; ++f) {
        const uint64_t seed = mix_seed(cfg_.seed, 300 + f, static_cast<uint64_t>(step) * 4096 + k);
        noisy[2 * k + f] = apply_color_noise(f == 0 ? *s.image_1 : *s.image_2, cfg_.color_noise_std, seed);
        imgs[2 * k + f] = &noisy[2 * k + f];
        keys[2 * k + f] = {s.sequence_id, s.frame_index + f * s.delta_t};
      }
    }
    ForwardBatch fb = forward(imgs, keys);

    struct PairResult {
      bool skipped = false;
      double of = 0, keypoints = 0, anchor = 0;
      BodyParamsGrad<double> g1, g2;  // unweighted flow gradients
      BodyParamsGrad<double> k1, k2;  // keypoint gradients
      BodyParamsGrad<double> a1, a2;  // anchor gradients (weighted)
    };
    std::vector<PairResult> res(n);
    parallel_for(n, cfg_.workers, [&](int k) {
      const auto& s = in_.pairs[pi[k]];
      PairResult& r = res[k];
      const BodyParams<double> q1 = to_params(fb.out, 2 * k), q2 = to_params(fb.out, 2 * k + 1);
      if (cfg_.lambda_of > 0) {
        const auto b = bidirectional_flow_loss(*in_.tpl, *s.flow_1to2, s.flow_2to1, q1, q2, cfg_.flow_options());
        if (b.report.empty_mask) {
          r.skipped = true;
        } else {
          r.of = b.report.loss;
          r.g1 = b.grad_1;
          r.g2 = b.grad_2;
        }
      }
      if (cfg_.lambda_2d > 0 && s.keypoints) {
        const ImageSize size{s.image_1->height, s.image_1->width};
        for (int f = 0; f < 2; ++f) {
          const auto pred = pose_prediction(*in_.tpl, f == 0 ? q1 : q2, size);
          const Points2<double> pj = project<double>(pred.mesh.joints, pred.params.camera, size);
          const auto kl = keypoint_2d_loss(pj, f == 0 ? s.keypoints->xy_1 : s.keypoints->xy_2,
                                           f == 0 ? s.keypoints->confidence_1 : s.keypoints->confidence_2);
          r.keypoints += 0.5 * kl.loss;
          Points3<double> gv = Points3<double>::Zero(pred.mesh.joints.rows(), 3);
          BodyParamsGrad<double>& g = f == 0 ? r.k1 : r.k2;
          project_vjp<double>(pred.mesh.joints, pred.params.camera, size, 0.5 * kl.grad, gv, g.camera);
          forward_vjp(*in_.tpl, pred.params, pred.cache, Points3<double>(), gv, g);
        }
      }
      if (in_.mode == PairMode::kAnchored) {
        for (int f = 0; f < 2; ++f) {
          const auto it = in_.anchors.find({s.sequence_id, s.frame_index + f * s.delta_t});
          if (it == in_.anchors.end()) throw Error("missing anchor prediction");
          r.anchor += 0.5 * anchor_loss(f == 0 ? q1 : q2, it->second, cfg_.lambda_theta, cfg_.lambda_beta,
                                        f == 0 ? &r.a1 : &r.a2);
        }
      }
    });

    int used = 0;
    for (const auto& r : res) used += r.skipped ? 0 : 1;
    sl.pairs_used = used;
    sl.pairs_skipped = n - used;
    MatX<float> grad = MatX<float>::Zero(2 * n, kParamDim);
    for (int k = 0; k < n; ++k) {
      const PairResult& r = res[k];
      VecX<double> g1 = VecX<double>::Zero(kParamDim), g2 = VecX<double>::Zero(kParamDim);
      if (!r.skipped && cfg_.lambda_of > 0) {
        sl.of += r.of / used;
        g1 += cfg_.lambda_of / used * r.g1.flat();
        g2 += cfg_.lambda_of / used * r.g2.flat();
      }
      sl.keypoints += r.keypoints / n;
      g1 += cfg_.lambda_2d / n * r.k1.flat();
      g2 += cfg_.lambda_2d / n * r.k2.flat();
      sl.anchor += r.anchor / n;
      g1 += 0.5 / n * r.a1.flat();
      g2 += 0.5 / n * r.a2.flat();
      grad.row(2 * k) = g1.cast<float>().transpose();
      grad.row(2 * k + 1) = g2.cast<float>().transpose();
    }
    backward(fb, grad);
  }

  Model<float>& model_;
  const LoopInputs& in_;
  TrainConfig cfg_;
  std::map<int, MatX<float>> history_;
  int step_ = 0;
  std::vector<int> batch_l_, batch_p_;
};

inline void require_batch(size_t available, int batch, const std::string& what) {
  if (batch > 0 && available < static_cast<size_t>(batch)) {
    throw ConfigError(what + ": only " + std::to_string(available) + " samples for a batch of " +
                      std::to_string(batch));
  }
}

}  // namespace detail

// Adds a context network of the configured length (or removes it for 0).
inline void attach_context(Model<float>& model, const TrainConfig& cfg, double init_std = 0.01) {
  if (cfg.context_length == 0) {
    model.context.reset();
    return;
  }
  if (model.context && model.context->config().max_history == cfg.context_length) return;
  ContextConfig c;
  c.max_history = cfg.context_length;
  c.feature_dim = model.regressor.feature_dim();
  c.init_std = init_std;
  c.init_seed = mix_seed(cfg.seed, 13);
  model.context.emplace(c);
}

// Supervised training on the labeled subset selected by p. Continues from
// `init` when given.
inline Model<float> pretrain_baseline(const MeshTemplate& tpl, const Dataset& ds, const TrainConfig& cfg,
                                      const RegressorConfig& rcfg, TrainLog* log = nullptr,
                                      const Model<float>* init = nullptr) {
  cfg.validate();
  Model<float> model = init ? *init : Model<float>{Regressor<float>(rcfg), std::nullopt, {}};
  detail::LoopInputs in;
  in.tpl = &tpl;
  in.dataset = &ds;
  in.labeled = labeled_frames(tpl, ds, select_labeled(ds, cfg.label_fraction, cfg.seed));
  detail::require_batch(in.labeled.size(), std::max(1, cfg.labeled_batch), "pretrain (p * |dataset| < 1 batch)");
  TrainConfig c = cfg;
  c.pair_batch = 0;
  if (c.labeled_batch == 0) c.labeled_batch = 1;
  TrainLog l = detail::Trainer(model, in, c).run();
  if (log) *log = std::move(l);
  return model;
}

// Mixed batches: supervised frames plus flow-supervised unlabeled pairs.
inline Model<float> refine_with_flow(const MeshTemplate& tpl, const Model<float>& baseline, const Dataset& ds,
                                     const TrainConfig& cfg, TrainLog* log = nullptr,
                                     std::vector<FramePairSample> pairs = {}) {
  cfg.validate();
  Model<float> model = baseline;
  attach_context(model, cfg);
  detail::LoopInputs in;
  in.tpl = &tpl;
  in.dataset = &ds;
  in.mode = detail::PairMode::kFlow;
  in.labeled = labeled_frames(tpl, ds, select_labeled(ds, cfg.label_fraction, cfg.seed));
  in.pairs = pairs.empty() ? unlabeled_pairs(ds, cfg.unlabeled_fraction, cfg.seed) : std::move(pairs);
  for (const auto& p : in.pairs) p.validate();
  if (cfg.labeled_batch > 0 && in.labeled.empty()) throw ConfigError("refine: no labeled frames");
  if (cfg.pair_batch > 0 && in.pairs.empty()) throw ConfigError("refine: no unlabeled pairs");
  TrainLog l = detail::Trainer(model, in, cfg).run();
  if (log) *log = std::move(l);
  return model;
}

// Frozen baseline predictions for every frame touched by the pairs.
inline std::map<std::pair<int, int>, BodyParams<double>> anchor_predictions(
    const Model<float>& baseline, const Dataset& ds, const std::vector<FramePairSample>& pairs) {
  std::map<std::pair<int, int>, BodyParams<double>> anchors;
  std::set<int> seqs;
  for (const auto& p : pairs) seqs.insert(p.sequence_id);
  for (int s : seqs) {
    const auto pred = predict_sequence(baseline, ds.sequence(s));
    for (int t = 0; t < static_cast<int>(pred.size()); ++t) anchors[{s, t}] = pred[t];
  }
  return anchors;
}

// Unsupervised refinement anchored to the baseline's own predictions; reads
// no labels.
inline Model<float> refine_anchored_unsupervised(const MeshTemplate& tpl, const Model<float>& baseline,
                                                 const Dataset& ds, const TrainConfig& cfg,
                                                 TrainLog* log = nullptr) {
  cfg.validate();
  Model<float> model = baseline;
  detail::LoopInputs in;
  in.tpl = &tpl;
  in.dataset = &ds;
  in.mode = detail::PairMode::kAnchored;
  in.pairs = unlabeled_pairs(ds, cfg.unlabeled_fraction, cfg.seed);
  if (in.pairs.empty()) throw ConfigError("refine-unsup: no unlabeled pairs");
  in.anchors = anchor_predictions(baseline, ds, in.pairs);
  TrainConfig c = cfg;
  c.labeled_batch = 0;
  if (c.pair_batch == 0) throw ConfigError("refine-unsup: pair_batch must be > 0");
  TrainLog l = detail::Trainer(model, in, c).run();
  if (log) *log = std::move(l);
  return model;
}

// ---------------------------------------------------------------------------
// Direct optimization of a parameter trajectory.

struct SequenceLog {
  std::vector<StepLog> steps;
};

// Centered moving average over up to `window` frames, clipped at the ends.
inline MatX<double> moving_average(const MatX<double>& x, int window) {
  MatX<double> out(x.rows(), x.cols());
  const int half = window / 2;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const Eigen::Index a = std::max<Eigen::Index>(0, t - half);
    const Eigen::Index b = std::min<Eigen::Index>(x.rows() - 1, t - half + window - 1);
    out.row(t) = x.middleRows(a, b - a + 1).colwise().mean();
  }
  return out;
}

inline std::vector<BodyParams<double>> optimize_sequence(const MeshTemplate& tpl,
                                                         const std::vector<BodyParams<double>>& initial,
                                                         const std::vector<const FlowMap*>& flow_fwd,
                                                         const std::vector<const FlowMap*>& flow_bwd,
                                                         const TrainConfig& cfg, SequenceLog* log = nullptr) {
  cfg.validate();
  const int n = static_cast<int>(initial.size());
  if (n < 2) throw ValidationError("optimize_sequence needs at least 2 frames");
  if (static_cast<int>(flow_fwd.size()) != n - 1 || (!flow_bwd.empty() && static_cast<int>(flow_bwd.size()) != n - 1)) {
    throw ValidationError("optimize_sequence needs one flow per consecutive pair");
  }
  nn::Parameter<double> x("trajectory", n, kParamDim);
  for (int t = 0; t < n; ++t) x.value.row(t) = initial[t].flat().transpose();
  nn::Adam<double> opt({&x}, {.learning_rate = cfg.learning_rate});
  auto row = [&](int t) { return BodyParams<double>::unchecked(x.value.row(t).transpose()); };

  for (int step = 0; step < cfg.steps; ++step) {
    x.zero_grad();
    StepLog sl;
    sl.step = step;
    std::vector<BodyParamsGrad<double>> grads(n);
    std::vector<double> anchor(n, 0.0);
    parallel_for(n, cfg.workers, [&](int t) { anchor[t] = anchor_loss(row(t), initial[t], cfg.lambda_theta, cfg.lambda_beta, &grads[t]); });
    for (int t = 0; t < n; ++t) {
      sl.anchor += anchor[t] / n;
      x.grad.row(t) += grads[t].flat().transpose() / n;
    }
    if (cfg.lambda_of > 0) {
      std::vector<BidirectionalResult> res(n - 1);
      parallel_for(n - 1, cfg.workers, [&](int t) {
        res[t] = bidirectional_flow_loss(tpl, *flow_fwd[t], flow_bwd.empty() ? nullptr : flow_bwd[t], row(t), row(t + 1),
                                         cfg.flow_options());
      });
      int used = 0;
      for (const auto& r : res) used += r.report.empty_mask ? 0 : 1;
      for (int t = 0; t + 1 < n; ++t) {
        if (res[t].report.empty_mask) {
          ++sl.pairs_skipped;
          continue;
        }
        sl.of += res[t].report.loss / used;
        x.grad.row(t) += cfg.lambda_of / used * res[t].grad_1.flat().transpose();
        x.grad.row(t + 1) += cfg.lambda_of / used * res[t].grad_2.flat().transpose();
      }
      sl.pairs_used = used;
    }
    if (cfg.lambda_smooth > 0) {
      // Pull theta and beta toward their moving average, held constant.
      const MatX<double> shape_pose = x.value.leftCols(kPoseDim + kNumShape);
      const MatX<double> d = shape_pose - moving_average(shape_pose, cfg.smooth_window);
      sl.smooth = cfg.lambda_smooth * d.squaredNorm() / n;
      x.grad.leftCols(kPoseDim + kNumShape) += 2.0 * cfg.lambda_smooth / n * d;
    }
    sl.total = sl.anchor + cfg.lambda_of * sl.of + sl.smooth;
    if (!std::isfinite(sl.total)) throw TrainingError("non-finite loss at sequence step " + std::to_string(step));
    if (log) log->steps.push_back(sl);
    opt.step();
  }
  std::vector<BodyParams<double>> out;
  for (int t = 0; t < n; ++t) out.push_back(row(t));
  return out;
}

// Sequence optimization initialized from a model's predictions.
inline std::vector<BodyParams<double>> optimize_sequence(const MeshTemplate& tpl, const Model<float>& baseline,
                                                         const Sequence& q, const TrainConfig& cfg,
                                                         SequenceLog* log = nullptr) {
  if (q.length() < 2) throw ValidationError("optimize_sequence needs at least 2 frames");
  std::vector<const FlowMap*> fwd, bwd;
  for (const auto& f : q.flow_fwd) fwd.push_back(&f);
  for (const auto& f : q.flow_bwd) bwd.push_back(&f);
  return optimize_sequence(tpl, predict_sequence(baseline, q), fwd, bwd, cfg, log);
}

}  // namespace flowfit
