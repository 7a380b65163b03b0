#pragma once

// Optical-flow consistency loss between two body predictions.
//
// For a vertex visible in both frames with projections p1, p2 the residual is
// r = (p2 - p1) - F12[p1], i.e. p2 measured against the weak label
// p1 + F12[p1]. The directional loss is the mean of |r| over the mask; the
// full loss averages both directions. Flow values are data: gradients reach
// the projections only, never the sampling position.

#include <optional>

#include "flowfit/body_model.hpp"
#include "flowfit/scene_renderer.hpp"

namespace flowfit {

constexpr double kFlowEpsilon = 0.1;  // pixels

struct FlowLossOptions {
  bool threshold = true;  // drop vertices whose residual exceeds the max flow norm
  bool scale = true;      // divide by the mean flow norm
  double flow_epsilon = kFlowEpsilon;
};

struct FlowLossReport {
  double loss_1to2 = 0.0;
  double loss_2to1 = 0.0;
  double loss = 0.0;
  int visible_count = 0;
  double mean_flow_norm = 0.0;
  double max_flow_norm = 0.0;
  int clipped_vertex_count = 0;
  bool empty_mask = false;
  bool backward_missing = false;
};

// Flow sampled at the source projections; vertices without a usable sample
// drop out of `mask`.
struct SampledFlow {
  Points2<double> values;
  VisibilityMask mask;
};

inline SampledFlow sample_flow(const FlowMap& flow, const Points2<double>& proj,
                               const VisibilityMask& mask) {
  SampledFlow out;
  out.values = Points2<double>::Zero(proj.rows(), 2);
  out.mask = mask;
  for (Eigen::Index v = 0; v < proj.rows(); ++v) {
    if (!mask[v]) continue;
    const auto s = flow.sample(proj(v, 0), proj(v, 1));
    if (!s) {
      out.mask.mask[v] = 0;
      continue;
    }
    out.values.row(v) = s->transpose();
  }
  return out;
}

struct DirectionalLoss {
  double loss = 0.0;
  Points2<double> residuals;        // zero outside the mask
  Points2<double> grad_src;         // dL/dproj_src
  Points2<double> grad_dst;         // dL/dproj_dst
  int count = 0;
  bool empty_mask = false;
};

// Mean residual norm over `mask`, given flow already sampled at proj_src.
inline DirectionalLoss directional_loss_from_samples(const Points2<double>& proj_src,
                                                     const Points2<double>& proj_dst,
                                                     const Points2<double>& sampled,
                                                     const VisibilityMask& mask) {
  const Eigen::Index nv = proj_src.rows();
  DirectionalLoss out;
  out.residuals = Points2<double>::Zero(nv, 2);
  out.grad_src = Points2<double>::Zero(nv, 2);
  out.grad_dst = Points2<double>::Zero(nv, 2);
  out.count = mask.count();
  if (out.count == 0) {
    out.empty_mask = true;
    return out;
  }
  const double inv = 1.0 / out.count;
  double sum = 0.0;
  for (Eigen::Index v = 0; v < nv; ++v) {
    if (!mask[v]) continue;
    const Eigen::RowVector2d r = (proj_dst.row(v) - proj_src.row(v)) - sampled.row(v);
    out.residuals.row(v) = r;
    const double n = r.norm();
    sum += n;
    if (n > 0.0) {
      out.grad_dst.row(v) = (inv / n) * r;
      out.grad_src.row(v) = -(inv / n) * r;
    }
  }
  out.loss = sum * inv;
  return out;
}

inline DirectionalLoss directional_flow_loss(const Points2<double>& proj_1, const Points2<double>& proj_2,
                                             const FlowMap& flow_1to2, const VisibilityMask& mask) {
  const SampledFlow s = sample_flow(flow_1to2, proj_1, mask);
  return directional_loss_from_samples(proj_1, proj_2, s.values, s.mask);
}

struct ThresholdResult {
  VisibilityMask kept;
  int clipped = 0;
  double max_flow_norm = 0.0;
};

// Drops masked vertices whose residual norm exceeds the largest flow norm
// among masked vertices, floored at `floor` pixels so static pairs keep
// their nearly consistent vertices.
inline ThresholdResult threshold_residuals(const Points2<double>& residuals, const Points2<double>& flow,
                                           const VisibilityMask& mask, double floor = kFlowEpsilon) {
  ThresholdResult out;
  out.kept = mask;
  for (Eigen::Index v = 0; v < flow.rows(); ++v) {
    if (mask[v]) out.max_flow_norm = std::max(out.max_flow_norm, flow.row(v).norm());
  }
  const double limit = std::max(out.max_flow_norm, floor);
  for (Eigen::Index v = 0; v < residuals.rows(); ++v) {
    if (mask[v] && residuals.row(v).norm() > limit) {
      out.kept.mask[v] = 0;
      ++out.clipped;
    }
  }
  return out;
}

inline double mean_flow_norm(const Points2<double>& flow, const VisibilityMask& mask) {
  double sum = 0.0;
  int n = 0;
  for (Eigen::Index v = 0; v < flow.rows(); ++v) {
    if (!mask[v]) continue;
    sum += flow.row(v).norm();
    ++n;
  }
  return n ? sum / n : 0.0;
}

inline double scale_loss(double loss, double mean_flow_norm, double flow_epsilon = kFlowEpsilon) {
  if (mean_flow_norm < 0.0) throw ValidationError("scale_loss: mean flow norm must be >= 0");
  return loss / std::max(mean_flow_norm, flow_epsilon);
}

// Everything about a pair evaluation that is held fixed while differentiating:
// masks, sampled flow, threshold decisions and scale factors.
struct FlowLossState {
  struct Direction {
    bool active = false;
    Points2<double> sampled;
    VisibilityMask kept;
    double factor = 1.0;  // 1 / max(mean flow norm, eps) when scaling
  };
  Direction forward;   // 1 -> 2
  Direction backward;  // 2 -> 1
  FlowLossReport report;
};

struct FlowLossGrad {
  Points2<double> proj_1, proj_2;
};

// Loss and projection gradients with every discrete decision frozen.
inline double evaluate_frozen(const FlowLossState& state, const Points2<double>& proj_1,
                              const Points2<double>& proj_2, FlowLossGrad* grad = nullptr) {
  double total = 0.0;
  const int directions = (state.forward.active ? 1 : 0) + (state.backward.active ? 1 : 0);
  if (grad) {
    grad->proj_1 = Points2<double>::Zero(proj_1.rows(), 2);
    grad->proj_2 = Points2<double>::Zero(proj_2.rows(), 2);
  }
  if (directions == 0) return 0.0;
  const double w = 1.0 / directions;
  if (state.forward.active) {
    const auto d = directional_loss_from_samples(proj_1, proj_2, state.forward.sampled, state.forward.kept);
    total += w * state.forward.factor * d.loss;
    if (grad) {
      grad->proj_1 += (w * state.forward.factor) * d.grad_src;
      grad->proj_2 += (w * state.forward.factor) * d.grad_dst;
    }
  }
  if (state.backward.active) {
    const auto d = directional_loss_from_samples(proj_2, proj_1, state.backward.sampled, state.backward.kept);
    total += w * state.backward.factor * d.loss;
    if (grad) {
      grad->proj_2 += (w * state.backward.factor) * d.grad_src;
      grad->proj_1 += (w * state.backward.factor) * d.grad_dst;
    }
  }
  return total;
}

// Builds the frozen state and the report for a pair of projections.
// `flow_2to1` may be null, in which case only the forward term is used.
inline FlowLossState prepare_flow_loss(const Points2<double>& proj_1, const Points2<double>& proj_2,
                                       const VisibilityMask& mask, const FlowMap& flow_1to2,
                                       const FlowMap* flow_2to1, const FlowLossOptions& opts = {}) {
  FlowLossState st;
  FlowLossReport& rep = st.report;
  rep.visible_count = mask.count();
  rep.backward_missing = flow_2to1 == nullptr;

  VisibilityMask clipped_any;
  clipped_any.mask.assign(mask.size(), 0);
  double mean_sum = 0.0;
  int mean_n = 0;
  auto build = [&](FlowLossState::Direction& dir, const Points2<double>& src, const Points2<double>& dst,
                   const FlowMap& flow) -> double {
    const SampledFlow s = sample_flow(flow, src, mask);
    dir.sampled = s.values;
    dir.kept = s.mask;
    if (s.mask.count() == 0) {
      dir.active = false;
      return 0.0;
    }
    dir.active = true;
    const double mean = mean_flow_norm(s.values, s.mask);
    mean_sum += mean;
    ++mean_n;
    if (opts.threshold) {
      const auto raw = directional_loss_from_samples(src, dst, s.values, s.mask);
      const auto th = threshold_residuals(raw.residuals, s.values, s.mask);
      rep.max_flow_norm = std::max(rep.max_flow_norm, th.max_flow_norm);
      for (size_t v = 0; v < mask.size(); ++v)
        if (s.mask[v] && !th.kept[v]) clipped_any.mask[v] = 1;
      dir.kept = th.kept;
    } else {
      for (Eigen::Index v = 0; v < s.values.rows(); ++v)
        if (s.mask[v]) rep.max_flow_norm = std::max(rep.max_flow_norm, s.values.row(v).norm());
    }
    dir.factor = opts.scale ? 1.0 / std::max(mean, opts.flow_epsilon) : 1.0;
    if (dir.kept.count() == 0) return 0.0;
    return dir.factor * directional_loss_from_samples(src, dst, dir.sampled, dir.kept).loss;
  };

  rep.loss_1to2 = build(st.forward, proj_1, proj_2, flow_1to2);
  if (flow_2to1) {
    rep.loss_2to1 = build(st.backward, proj_2, proj_1, *flow_2to1);
  } else {
    rep.loss_2to1 = rep.loss_1to2;
  }
  // A direction without usable samples falls back to the other one.
  if (flow_2to1 && st.forward.active != st.backward.active) {
    if (st.forward.active) {
      rep.loss_2to1 = rep.loss_1to2;
    } else {
      rep.loss_1to2 = rep.loss_2to1;
    }
  }
  rep.loss = (rep.loss_1to2 + rep.loss_2to1) / 2.0;
  rep.mean_flow_norm = mean_n ? mean_sum / mean_n : 0.0;
  rep.clipped_vertex_count = clipped_any.count();
  rep.empty_mask = !st.forward.active && !st.backward.active;
  return st;
}

// Projected vertices of a prediction plus what is needed to backpropagate.
struct PosedPrediction {
  BodyParams<double> params;
  ForwardCache<double> cache;
  BodyMesh<double> mesh;
  Points2<double> proj;
};

inline PosedPrediction pose_prediction(const MeshTemplate& tpl, const BodyParams<double>& params,
                                       ImageSize size) {
  PosedPrediction p;
  p.params = params;
  p.mesh = forward(tpl, params, &p.cache);
  p.proj = project<double>(p.mesh.vertices, params.camera, size);
  return p;
}

// dL/dparams from dL/dprojected-vertices.
inline void backprop_projection(const MeshTemplate& tpl, const PosedPrediction& pred, ImageSize size,
                                const Points2<double>& grad_proj, BodyParamsGrad<double>& grad) {
  Points3<double> gv = Points3<double>::Zero(pred.mesh.vertices.rows(), 3);
  project_vjp<double>(pred.mesh.vertices, pred.params.camera, size, grad_proj, gv, grad.camera);
  forward_vjp(tpl, pred.params, pred.cache, gv, Points3<double>(), grad);
}

struct BidirectionalResult {
  FlowLossReport report;
  FlowLossState state;
  BodyParamsGrad<double> grad_1, grad_2;
};

// Full pair loss: visibility of both predictions, both flow directions,
// thresholding and scaling; gradients for both parameter sets.
inline BidirectionalResult bidirectional_flow_loss(const MeshTemplate& tpl, const FlowMap& flow_1to2,
                                                   const FlowMap* flow_2to1, const BodyParams<double>& pred_1,
                                                   const BodyParams<double>& pred_2,
                                                   const FlowLossOptions& opts = {},
                                                   const RenderOptions& render_opts = {}) {
  const ImageSize size{flow_1to2.height, flow_1to2.width};
  if (flow_2to1 && (flow_2to1->height != size.height || flow_2to1->width != size.width)) {
    throw ValidationError("flow maps differ in size");
  }
  const PosedPrediction a = pose_prediction(tpl, pred_1, size);
  const PosedPrediction b = pose_prediction(tpl, pred_2, size);
  const ScreenMesh sa{a.proj, a.mesh.vertices.col(2).array() + render_opts.camera_distance, a.mesh.vertices};
  const ScreenMesh sb{b.proj, b.mesh.vertices.col(2).array() + render_opts.camera_distance, b.mesh.vertices};
  const VisibilityMask mask =
      visibility_from(sa, DepthRaster(sa, tpl.faces, size)) & visibility_from(sb, DepthRaster(sb, tpl.faces, size));

  BidirectionalResult out;
  out.state = prepare_flow_loss(a.proj, b.proj, mask, flow_1to2, flow_2to1, opts);
  out.report = out.state.report;
  FlowLossGrad g;
  const double value = evaluate_frozen(out.state, a.proj, b.proj, &g);
  (void)value;
  backprop_projection(tpl, a, size, g.proj_1, out.grad_1);
  backprop_projection(tpl, b, size, g.proj_2, out.grad_2);
  return out;
}

struct KeypointLoss {
  double loss = 0.0;
  Points2<double> grad;  // dL/dpred
  bool zero_confidence = false;
};

// Confidence-weighted L2 distance between projected joints and reference
// keypoints, averaged over all J joints.
inline KeypointLoss keypoint_2d_loss(const Points2<double>& pred, const Points2<double>& ref,
                                     const VecX<double>& confidence) {
  if (pred.rows() != ref.rows() || pred.rows() != confidence.size()) {
    throw ValidationError("keypoint_2d_loss: shape mismatch");
  }
  if ((confidence.array() < 0.0).any() || (confidence.array() > 1.0).any()) {
    throw ValidationError("keypoint_2d_loss: confidences must lie in [0, 1]");
  }
  KeypointLoss out;
  out.grad = Points2<double>::Zero(pred.rows(), 2);
  if (confidence.sum() == 0.0) {
    out.zero_confidence = true;
    return out;
  }
  const double inv = 1.0 / static_cast<double>(pred.rows());
  for (Eigen::Index j = 0; j < pred.rows(); ++j) {
    const double c = confidence[j];
    if (c == 0.0) continue;
    const Eigen::RowVector2d d = pred.row(j) - ref.row(j);
    const double n = d.norm();
    out.loss += c * n * inv;
    if (n > 0.0) out.grad.row(j) = (c * inv / n) * d;
  }
  return out;
}

}  // namespace flowfit
