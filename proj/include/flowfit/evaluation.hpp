#pragma once

#include <Eigen/SVD>
#include <iomanip>
#include <ostream>

#include "flowfit/training.hpp"

namespace flowfit {

struct SimilarityTransform {
  Mat3<double> rotation = Mat3<double>::Identity();
  double scale = 1.0;
  Vec3<double> translation = Vec3<double>::Zero();

  Points3<double> apply(const Points3<double>& x) const {
    Points3<double> y = (scale * (x * rotation.transpose())).rowwise() + translation.transpose();
    return y;
  }
};

// Closed-form similarity alignment of `pred` onto `gt` without reflection.
inline SimilarityTransform procrustes(const Points3<double>& pred, const Points3<double>& gt) {
  if (pred.rows() != gt.rows()) throw ValidationError("pmpjpe: pred and gt joint counts differ");
  if (gt.rows() < 3) throw ValidationError("pmpjpe: need at least 3 joints");
  if (!pred.allFinite() || !gt.allFinite()) throw ValidationError("pmpjpe: joints are not finite");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const Points3<double> x = pred.rowwise() - mp, y = gt.rowwise() - mg;
  const Eigen::JacobiSVD<Eigen::Matrix3d> sg(y.transpose() * y);
  const Eigen::Vector3d ev = sg.singularValues();
  if (ev[1] <= 1e-12 * std::max(ev[0], 1e-300)) throw ValidationError("pmpjpe: ground-truth joints are collinear");
  const double var_x = x.squaredNorm();
  if (var_x <= 1e-300) throw ValidationError("pmpjpe: predicted joints collapse to a point");

  const Eigen::Matrix3d h = x.transpose() * y;
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1;
  SimilarityTransform s;
  s.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  s.scale = (svd.singularValues().asDiagonal() * d).trace() / var_x;
  s.translation = mg.transpose() - s.scale * s.rotation * mp.transpose();
  return s;
}

inline double mean_joint_error(const Points3<double>& a, const Points3<double>& b) {
  return (a - b).rowwise().norm().mean();
}

// Mean per-joint error after similarity alignment, in the input unit.
inline double pmpjpe(const Points3<double>& pred, const Points3<double>& gt) {
  return mean_joint_error(procrustes(pred, gt).apply(pred), gt);
}

// Mean norm of the difference of second differences, scaled by fps^2.
inline double acceleration_error(const std::vector<Points3<double>>& pred, const std::vector<Points3<double>>& gt,
                                 double fps) {
  if (pred.size() != gt.size()) throw ValidationError("acceleration_error: sequence lengths differ");
  if (pred.size() < 3) throw ValidationError("acceleration_error: need at least 3 frames");
  if (!(fps > 0)) throw ValidationError("acceleration_error: fps must be > 0");
  double sum = 0.0;
  long count = 0;
  for (size_t t = 1; t + 1 < pred.size(); ++t) {
    const Points3<double> ap = pred[t + 1] - 2.0 * pred[t] + pred[t - 1];
    const Points3<double> ag = gt[t + 1] - 2.0 * gt[t] + gt[t - 1];
    const VecX<double> e = (ap - ag).rowwise().norm();
    sum += e.sum();
    count += e.size();
  }
  return sum / count * fps * fps;
}

// Per-frame acceleration error for frames 1..T-2, for plotting.
inline std::vector<double> acceleration_error_curve(const std::vector<Points3<double>>& pred,
                                                    const std::vector<Points3<double>>& gt, double fps) {
  std::vector<double> out;
  for (size_t t = 1; t + 1 < pred.size(); ++t) {
    std::vector<Points3<double>> p(pred.begin() + t - 1, pred.begin() + t + 2), g(gt.begin() + t - 1, gt.begin() + t + 2);
    out.push_back(acceleration_error(p, g, fps));
  }
  return out;
}

struct SequenceMetrics {
  int sequence_id = 0;
  double pmpjpe = 0;
  double accel_err = 0;
  int frames = 0;
};

struct MetricReport {
  double pmpjpe = 0;     // mm
  double accel_err = 0;  // mm/s^2
  int sample_count = 0;
  std::vector<SequenceMetrics> per_sequence;

  void write(std::ostream& os) const {
    os << std::setprecision(10);
    os << "pmpjpe_mm=" << pmpjpe << "\n";
    os << "accel_err_mm_s2=" << accel_err << "\n";
    os << "sample_count=" << sample_count << "\n";
    for (const auto& s : per_sequence) {
      os << "sequence." << s.sequence_id << ".pmpjpe_mm=" << s.pmpjpe << "\n";
      os << "sequence." << s.sequence_id << ".accel_err_mm_s2=" << s.accel_err << "\n";
    }
  }
};

// Root-relative model joints in millimeters.
inline Points3<double> joints_mm(const MeshTemplate& tpl, const BodyParams<double>& p) {
  return 1000.0 * root_relative(forward(tpl, p).joints);
}

// Metrics of predicted trajectories against ground truth trajectories. Frame
// counts weight both averages.
inline MetricReport evaluate_trajectories(const MeshTemplate& tpl,
                                          const std::vector<std::vector<BodyParams<double>>>& pred,
                                          const std::vector<std::vector<BodyParams<double>>>& gt,
                                          const std::vector<int>& sequence_ids, double fps) {
  if (pred.size() != gt.size() || pred.size() != sequence_ids.size()) {
    throw ValidationError("evaluate: mismatched sequence counts");
  }
  MetricReport r;
  double p_sum = 0, a_sum = 0;
  long a_count = 0;
  for (size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].size() != gt[s].size()) throw ValidationError("evaluate: mismatched sequence length");
    std::vector<Points3<double>> jp, jg;
    SequenceMetrics m;
    m.sequence_id = sequence_ids[s];
    m.frames = static_cast<int>(pred[s].size());
    for (size_t t = 0; t < pred[s].size(); ++t) {
      jp.push_back(joints_mm(tpl, pred[s][t]));
      jg.push_back(joints_mm(tpl, gt[s][t]));
      m.pmpjpe += pmpjpe(jp.back(), jg.back()) / m.frames;
    }
    p_sum += m.pmpjpe * m.frames;
    r.sample_count += m.frames;
    if (m.frames >= 3) {
      m.accel_err = acceleration_error(jp, jg, fps);
      a_sum += m.accel_err * (m.frames - 2);
      a_count += m.frames - 2;
    }
    r.per_sequence.push_back(m);
  }
  r.pmpjpe = r.sample_count ? p_sum / r.sample_count : 0.0;
  r.accel_err = a_count ? a_sum / a_count : 0.0;
  return r;
}

inline std::vector<BodyParams<double>> ground_truth_trajectory(const Dataset& ds, const Sequence& q) {
  std::vector<BodyParams<double>> out;
  for (int t = 0; t < q.length(); ++t) out.push_back(ds.labels.get(q.id, t).params);
  return out;
}

inline MetricReport evaluate_model(const MeshTemplate& tpl, const Model<float>& model, const Dataset& ds,
                                   Split split = Split::kTest) {
  std::vector<std::vector<BodyParams<double>>> pred, gt;
  std::vector<int> ids;
  for (const Sequence* q : ds.split(split)) {
    pred.push_back(predict_sequence(model, *q));
    gt.push_back(ground_truth_trajectory(ds, *q));
    ids.push_back(q->id);
  }
  if (ids.empty()) throw ConfigError(std::string("dataset has no ") + split_name(split) + " sequences");
  return evaluate_trajectories(tpl, pred, gt, ids, ds.fps);
}

// ---------------------------------------------------------------------------
// Flow-quality audit.

constexpr double kAuditDegenerate = 1e-6;  // pixels

struct AuditSample {
  Keypoints gt_1, gt_2;
  Points2<double> pred_1, pred_2;  // projected predicted joints, pixels
  const FlowMap* flow = nullptr;
};

struct FlowQualityReport {
  double ratio_mean = 0;
  double ratio_median = 0;
  int delta_t = 1;
  std::string resolution;
  bool oracle = false;
  bool degenerate = false;
  int samples = 0;
  int dropped = 0;
  int degenerate_samples = 0;
  double d_of_mean = 0;
  double d_b_mean = 0;

  void write(std::ostream& os) const {
    os << std::setprecision(10);
    os << "ratio_mean=" << ratio_mean << "\nratio_median=" << ratio_median << "\ndelta_t=" << delta_t
       << "\nresolution=" << resolution << "\noracle=" << (oracle ? 1 : 0) << "\ndegenerate=" << (degenerate ? 1 : 0)
       << "\nsamples=" << samples << "\ndropped=" << dropped << "\ndegenerate_samples=" << degenerate_samples
       << "\nd_of_mean_px=" << d_of_mean << "\nd_b_mean_px=" << d_b_mean << "\n";
  }
};

// d_OF and d_B per sample are mean keypoint distances to the ground-truth
// motion; the ratio d_B / d_OF is guarded below by kAuditDegenerate.
inline FlowQualityReport flow_quality_audit(const std::vector<AuditSample>& samples, int delta_t, bool oracle,
                                            const std::string& resolution) {
  FlowQualityReport r;
  r.delta_t = delta_t;
  r.oracle = oracle;
  r.resolution = resolution;
  std::vector<double> ratios;
  double sum_of = 0, sum_b = 0;
  for (const auto& s : samples) {
    double d_of = 0, d_b = 0;
    int n = 0;
    for (int j = 0; j < kNumJoints; ++j) {
      if (s.gt_1.confidence[j] <= 0 || s.gt_2.confidence[j] <= 0) continue;
      const Eigen::RowVector2d at = oracle ? s.gt_1.xy.row(j) : s.pred_1.row(j);
      const auto f = s.flow->sample(at.x(), at.y());
      if (!f) continue;
      const Eigen::RowVector2d f_gt = s.gt_2.xy.row(j) - s.gt_1.xy.row(j);
      const Eigen::RowVector2d f_b = s.pred_2.row(j) - s.pred_1.row(j);
      d_of += (f->transpose() - f_gt).norm();
      d_b += (f_b - f_gt).norm();
      ++n;
    }
    if (n < 3) {
      ++r.dropped;
      continue;
    }
    d_of /= n;
    d_b /= n;
    if (d_of < kAuditDegenerate) ++r.degenerate_samples;
    ratios.push_back(std::max(d_b, kAuditDegenerate) / std::max(d_of, kAuditDegenerate));
    sum_of += d_of;
    sum_b += d_b;
  }
  r.samples = static_cast<int>(ratios.size());
  r.degenerate = r.degenerate_samples > 0;
  if (ratios.empty()) return r;
  r.d_of_mean = sum_of / r.samples;
  r.d_b_mean = sum_b / r.samples;
  double sum = 0;
  for (double v : ratios) sum += v;
  r.ratio_mean = sum / r.samples;
  std::sort(ratios.begin(), ratios.end());
  const size_t m = ratios.size() / 2;
  r.ratio_median = ratios.size() % 2 ? ratios[m] : 0.5 * (ratios[m - 1] + ratios[m]);
  return r;
}

// Audit over a dataset split with renderer flow between frames t and
// t + delta_t as the flow source.
inline FlowQualityReport flow_quality_audit(const MeshTemplate& tpl, const Model<float>& model, const Dataset& ds,
                                            int delta_t, bool oracle, Split split = Split::kTest, int stride = 1) {
  if (delta_t < 1) throw ValidationError("flow audit delta_t must be >= 1");
  std::vector<AuditSample> samples;
  std::vector<std::unique_ptr<FlowMap>> flows;
  for (const Sequence* q : ds.split(split)) {
    const auto pred = predict_sequence(model, *q);
    for (int t = 0; t + delta_t < q->length(); t += stride) {
      const auto& l1 = ds.labels.get(q->id, t);
      const auto& l2 = ds.labels.get(q->id, t + delta_t);
      flows.push_back(std::make_unique<FlowMap>(ground_truth_flow(tpl, l1.params, l2.params, ds.size)));
      AuditSample s;
      s.gt_1 = l1.keypoints;
      s.gt_2 = l2.keypoints;
      s.pred_1 = project<double>(forward(tpl, pred[t]).joints, pred[t].camera, ds.size);
      s.pred_2 = project<double>(forward(tpl, pred[t + delta_t]).joints, pred[t + delta_t].camera, ds.size);
      s.flow = flows.back().get();
      samples.push_back(std::move(s));
    }
  }
  return flow_quality_audit(samples, delta_t, oracle,
                            std::to_string(ds.size.width) + "x" + std::to_string(ds.size.height));
}

// ---------------------------------------------------------------------------
// Static plots as SVG.

inline void write_svg_curves(std::ostream& os, const std::vector<std::vector<double>>& curves,
                             const std::vector<std::string>& labels, const std::string& title) {
  const double w = 640, h = 360, m = 40;
  double lo = 0, hi = 1e-12;
  size_t len = 2;
  for (const auto& c : curves) {
    for (double v : c) hi = std::max(hi, v);
    len = std::max(len, c.size());
  }
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << m << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  for (size_t c = 0; c < curves.size(); ++c) {
    os << "<polyline fill=\"none\" stroke=\"" << colors[c % 6] << "\" points=\"";
    for (size_t i = 0; i < curves[c].size(); ++i) {
      const double x = m + (w - 2 * m) * i / (len - 1);
      const double y = h - m - (h - 2 * m) * (curves[c][i] - lo) / (hi - lo);
      os << x << "," << y << " ";
    }
    os << "\"/>\n";
    if (c < labels.size()) {
      os << "<text x=\"" << w - m - 150 << "\" y=\"" << m + 16 * c << "\" font-size=\"12\" fill=\"" << colors[c % 6]
         << "\">" << labels[c] << "</text>\n";
    }
  }
  os << "<text x=\"4\" y=\"" << m << "\" font-size=\"10\">" << hi << "</text>\n";
  os << "</svg>\n";
}

inline void write_svg_histogram(std::ostream& os, const std::vector<double>& values, int bins, const std::string& title) {
  std::vector<double> counts(std::max(1, bins), 0.0);
  if (!values.empty()) {
    const double lo = *std::min_element(values.begin(), values.end());
    const double hi = *std::max_element(values.begin(), values.end());
    for (double v : values) {
      const int b = hi > lo ? std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins)) : 0;
      counts[b] += 1;
    }
  }
  const double w = 640, h = 360, m = 40;
  const double top = std::max(1.0, *std::max_element(counts.begin(), counts.end()));
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << m << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  const double bw = (w - 2 * m) / counts.size();
  for (size_t b = 0; b < counts.size(); ++b) {
    const double bh = (h - 2 * m) * counts[b] / top;
    os << "<rect x=\"" << m + b * bw << "\" y=\"" << h - m - bh << "\" width=\"" << bw * 0.9 << "\" height=\"" << bh
       << "\" fill=\"#1f77b4\"/>\n";
  }
  os << "</svg>\n";
}

}  // namespace flowfit
