#include <random>

#include <gtest/gtest.h>

#include "flowfit/finite_difference.hpp"
#include "flowfit/training.hpp"
#include "test_util.hpp"

namespace flowfit {
namespace {

using testing::random_params;
using testing::toy;

const Dataset& tiny() {
  static const Dataset ds = [] {
    SynthConfig c;
    c.num_sequences = 4;
    c.test_sequences = 1;
    c.frames = 8;
    c.seed = 21;
    return generate_dataset(toy(), c);
  }();
  return ds;
}

TrainConfig quick(int steps = 3) {
  TrainConfig c;
  c.steps = steps;
  c.labeled_batch = 2;
  c.pair_batch = 2;
  c.learning_rate = 1e-3;
  c.seed = 4;
  return c;
}

Model<float> fresh_model() { return {Regressor<float>(RegressorConfig{}), std::nullopt, {}}; }

std::vector<MatX<float>> weights(Model<float> m) {
  std::vector<MatX<float>> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

std::vector<MatX<float>> grads(Model<float>& m) {
  std::vector<MatX<float>> out;
  for (auto* p : m.parameters()) out.push_back(p->grad);
  return out;
}

TEST(Training, PipelinesAreDeterministic) {
  const auto cfg = quick();
  const auto a = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{});
  const auto b = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{});
  EXPECT_TRUE(weights(a) == weights(b));
  TrainLog la, lb;
  const auto ra = refine_with_flow(toy(), a, tiny(), cfg, &la);
  const auto rb = refine_with_flow(toy(), a, tiny(), cfg, &lb);
  EXPECT_TRUE(weights(ra) == weights(rb));
  EXPECT_FALSE(weights(ra) == weights(a));
  for (size_t k = 0; k < la.steps.size(); ++k) EXPECT_EQ(la.steps[k].total, lb.steps[k].total);
  auto other = cfg;
  other.seed = 5;
  EXPECT_FALSE(weights(refine_with_flow(toy(), a, tiny(), other)) == weights(ra));
}

TEST(Training, ZeroFlowWeightEqualsContinuedSupervisedTraining) {
  auto cfg = quick(4);
  const auto base = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{});
  cfg.lambda_of = 0.0;
  const auto refined = refine_with_flow(toy(), base, tiny(), cfg);
  const auto continued = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{}, nullptr, &base);
  EXPECT_TRUE(weights(refined) == weights(continued));
}

TEST(Training, LossDecompositionMatchesLog) {
  auto cfg = quick(3);
  cfg.lambda_sup = 0.7;
  cfg.lambda_of = 0.3;
  TrainLog log;
  refine_with_flow(toy(), fresh_model(), tiny(), cfg, &log);
  ASSERT_EQ(log.steps.size(), 3u);
  for (const auto& s : log.steps) {
    EXPECT_GT(s.sup, 0.0);
    EXPECT_GT(s.of, 0.0);
    EXPECT_EQ(s.total, 0.7 * s.sup + 0.3 * s.of + cfg.lambda_2d * s.keypoints + s.anchor);
    EXPECT_EQ(s.pairs_used + s.pairs_skipped, cfg.pair_batch);
  }
}

// Gradient of lambda_sup*sup + lambda_of*of equals the same combination of
// the separately computed gradients.
TEST(Training, GradientIsLinearInLossWeights) {
  const Dataset& ds = tiny();
  detail::LoopInputs in;
  in.tpl = &toy();
  in.dataset = &ds;
  in.mode = detail::PairMode::kFlow;
  in.labeled = labeled_frames(toy(), ds, select_labeled(ds, 1.0, 0));
  in.pairs = unlabeled_pairs(ds);
  const std::vector<int> li{0, 3}, pi{1, 5};
  auto run = [&](double ls, double lo) {
    auto cfg = quick();
    cfg.lambda_sup = ls;
    cfg.lambda_of = lo;
    Model<float> m = fresh_model();
    detail::Trainer(m, in, cfg).gradients(li, pi);
    return grads(m);
  };
  const auto gs = run(1, 0), go = run(0, 1), both = run(0.6, 2.5);
  double worst = 0;
  for (size_t k = 0; k < gs.size(); ++k) {
    const MatX<double> expect = 0.6 * gs[k].cast<double>() + 2.5 * go[k].cast<double>();
    const double scale = std::max(1e-6, expect.cwiseAbs().maxCoeff());
    worst = std::max(worst, (both[k].cast<double>() - expect).cwiseAbs().maxCoeff() / scale);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Training, LabelAccessAudit) {
  const Dataset& ds = tiny();
  auto cfg = quick(2);
  cfg.label_fraction = 0.25;
  ds.labels.reset_audit();
  const auto base = pretrain_baseline(toy(), ds, cfg, RegressorConfig{});
  const auto chosen = select_labeled(ds, 0.25, cfg.seed);
  const std::set<std::pair<int, int>> allowed(chosen.begin(), chosen.end());
  for (const auto& k : ds.labels.accessed()) {
    EXPECT_TRUE(allowed.count(k)) << k.first << "/" << k.second;
    EXPECT_EQ(ds.sequence(k.first).split, Split::kTrain);
  }
  ds.labels.reset_audit();
  refine_anchored_unsupervised(toy(), base, ds, cfg);
  optimize_sequence(toy(), base, ds.sequence(0), cfg);
  EXPECT_EQ(ds.labels.accesses(), 0);
}

TEST(Training, LabelFractionTooSmallForBatch) {
  auto cfg = quick();
  cfg.label_fraction = 0.01;  // 1 labeled frame
  cfg.labeled_batch = 4;
  EXPECT_THROW(pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{}), ConfigError);
}

TEST(Training, InvalidConfigIsRejected) {
  auto cfg = quick();
  cfg.lambda_of = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = quick();
  cfg.labeled_batch = cfg.pair_batch = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = quick();
  cfg.context_length = 9;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Training, AnchoredRefinementWithoutFlowLeavesWeightsUnchanged) {
  auto cfg = quick(3);
  const auto base = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{});
  cfg.lambda_of = 0.0;
  cfg.color_noise_std = 0.0;
  const auto refined = refine_anchored_unsupervised(toy(), base, tiny(), cfg);
  EXPECT_TRUE(weights(refined) == weights(base));
}

TEST(Training, FrozenBaselineTrainsOnlyContext) {
  auto cfg = quick(2);
  const auto base = pretrain_baseline(toy(), tiny(), cfg, RegressorConfig{});
  cfg.context_length = 2;
  cfg.freeze_baseline = true;
  const auto m = refine_with_flow(toy(), base, tiny(), cfg);
  ASSERT_TRUE(m.context.has_value());
  EXPECT_EQ(m.context->config().max_history, 2);
  Model<float> a = base, b = m;
  const auto wa = a.regressor.parameters(), wb = b.regressor.parameters();
  for (size_t k = 0; k < wa.size(); ++k) EXPECT_TRUE(wa[k]->value == wb[k]->value) << wa[k]->name;
  auto ctx_init = m;
  ctx_init.context.reset();
  attach_context(ctx_init, cfg);
  bool changed = false;
  Model<float> c = m;
  const auto pa = ctx_init.context->parameters(), pb = c.context->parameters();
  for (size_t k = 0; k < pa.size(); ++k) changed |= !(pa[k]->value == pb[k]->value);
  EXPECT_TRUE(changed);
}

TEST(ColorNoise, IdentityDeterminismAndDecorrelation) {
  const Image& img = tiny().sequences[0].frames[0];
  EXPECT_TRUE(apply_color_noise(img, 0.0, 1) == img);
  EXPECT_TRUE(apply_color_noise(img, 0.02, 7) == apply_color_noise(img, 0.02, 7));
  EXPECT_FALSE(apply_color_noise(img, 0.02, 7) == apply_color_noise(img, 0.02, 8));
  Image mid(64, 64);
  std::fill(mid.data.begin(), mid.data.end(), 0.5f);
  const Image a = apply_color_noise(mid, 0.02, mix_seed(1, 300, 0)), b = apply_color_noise(mid, 0.02, mix_seed(1, 301, 0));
  double sab = 0, saa = 0, sbb = 0;
  for (size_t k = 0; k < a.data.size(); ++k) {
    const double x = a.data[k] - 0.5, y = b.data[k] - 0.5;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  EXPECT_LT(std::abs(sab / std::sqrt(saa * sbb)), 0.05);
  EXPECT_NEAR(std::sqrt(saa / a.data.size()), 0.02, 0.002);
  EXPECT_THROW(apply_color_noise(img, -1.0, 0), ValidationError);
}

TEST(SupervisedLoss, ZeroAtTargetAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto gt = random_params(rng, 0.3);
  const auto target = make_target(toy(), gt);
  EXPECT_NEAR(supervised_loss(toy(), gt, target, {}, nullptr).total, 0.0, 1e-20);
  const auto pred = random_params(rng, 0.3);
  BodyParamsGrad<double> g;
  supervised_loss(toy(), pred, target, {}, &g);
  const VecX<double> fd = finite_difference_gradient(
      [&](const VecX<double>& x) { return supervised_loss(toy(), BodyParams<double>::unchecked(x), target, {}, nullptr).total; },
      pred.flat());
  EXPECT_LT(relative_error(g.flat(), fd), 1e-6);
}

TEST(AnchorLoss, ValueSubgradientAndFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto a = random_params(rng, 0.3);
  BodyParamsGrad<double> g0;
  EXPECT_EQ(anchor_loss(a, a, 1.0, 2.0, &g0), 0.0);
  EXPECT_EQ(g0.flat().norm(), 0.0);
  const auto p = random_params(rng, 0.3);
  BodyParamsGrad<double> g;
  const double v = anchor_loss(p, a, 1.5, 0.5, &g);
  const VecX<double> dt = p.flat().head(kPoseDim) - a.flat().head(kPoseDim);
  EXPECT_NEAR(v, 1.5 * dt.norm() + 0.5 * (p.beta - a.beta).norm(), 1e-12);
  const VecX<double> fd = finite_difference_gradient(
      [&](const VecX<double>& x) { return anchor_loss(BodyParams<double>::unchecked(x), a, 1.5, 0.5, nullptr); },
      p.flat());
  EXPECT_LT(relative_error(g.flat(), fd), 1e-7);
  EXPECT_EQ(g.camera.norm(), 0.0);
}

TEST(MovingAverage, ConstantAndWindowOne) {
  MatX<double> c = MatX<double>::Constant(10, 3, 2.5);
  EXPECT_TRUE(moving_average(c, 30).isApprox(c));
  MatX<double> r = MatX<double>::Random(10, 3);
  EXPECT_EQ(moving_average(r, 1), r);
  MatX<double> lin(5, 1);
  lin << 0, 1, 2, 3, 4;
  EXPECT_NEAR(moving_average(lin, 3)(2, 0), 2.0, 1e-15);
  EXPECT_NEAR(moving_average(lin, 3)(0, 0), 0.5, 1e-15);
}

TEST(OptimizeSequence, ZeroWeightsAreIdentity) {
  const Sequence& q = tiny().sequences[0];
  std::mt19937_64 rng(5);
  std::vector<BodyParams<double>> init;
  for (int t = 0; t < q.length(); ++t) init.push_back(random_params(rng, 0.2));
  std::vector<const FlowMap*> fwd, bwd;
  for (const auto& f : q.flow_fwd) fwd.push_back(&f);
  for (const auto& f : q.flow_bwd) bwd.push_back(&f);
  auto cfg = quick(5);
  cfg.lambda_of = 0;
  cfg.lambda_smooth = 0;
  const auto out = optimize_sequence(toy(), init, fwd, bwd, cfg);
  for (size_t t = 0; t < init.size(); ++t) EXPECT_EQ(out[t].flat(), init[t].flat());
  fwd.pop_back();
  EXPECT_THROW(optimize_sequence(toy(), init, fwd, bwd, cfg), ValidationError);
}

TEST(OptimizeSequence, SmoothingReducesJitter) {
  const SynthConfig sc = [] {
    SynthConfig c;
    c.seed = 21;
    c.frames = 8;
    return c;
  }();
  const auto gt = sequence_trajectory(sc, 0);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<BodyParams<double>> noisy = gt;
  for (auto& p : noisy) p.theta += Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor>::NullaryExpr([&] { return n(rng); });
  auto jitter = [](const std::vector<BodyParams<double>>& x) {
    double s = 0;
    for (size_t t = 1; t + 1 < x.size(); ++t) s += (x[t + 1].flat() - 2 * x[t].flat() + x[t - 1].flat()).squaredNorm();
    return s;
  };
  auto cfg = quick(50);
  cfg.lambda_of = 0;
  cfg.lambda_theta = 0.01;
  cfg.lambda_smooth = 1.0;
  cfg.smooth_window = 3;
  cfg.learning_rate = 0.005;
  const auto out = optimize_sequence(toy(), noisy, std::vector<const FlowMap*>(noisy.size() - 1, &tiny().sequences[0].flow_fwd[0]), {}, cfg);
  EXPECT_LT(jitter(out), 0.5 * jitter(noisy));
}

TEST(Prediction, ContextHistoryRowsArePastPredictions) {
  MatX<float> plain(5, kParamDim);
  for (int t = 0; t < 5; ++t) plain.row(t).setConstant(static_cast<float>(t));
  EXPECT_EQ(history_rows(plain, 0, 3).rows(), 0);
  const MatX<float> h = history_rows(plain, 4, 3);
  ASSERT_EQ(h.rows(), 3);
  EXPECT_EQ(h(0, 0), 1.0f);
  EXPECT_EQ(h(2, 0), 3.0f);
  EXPECT_EQ(history_rows(plain, 1, 3).rows(), 1);
}

}  // namespace
}  // namespace flowfit
