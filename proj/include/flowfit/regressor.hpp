#pragma once

#include <optional>
#include <sstream>

#include <json.hpp>

#include "flowfit/nn.hpp"
#include "flowfit/scene_renderer.hpp"

namespace flowfit {

struct RegressorConfig {
  int feature_dim = 2048;
  std::vector<int> encoder_widths{16, 32, 64, 128};
  int iterative_refinement_steps = 3;
  int head_hidden = 256;
  ImageSize input{64, 64};
  uint64_t init_seed = 0;

  // Mean-parameter start of the iterative head.
  double mean_scale = 0.9;
  double mean_ty = -0.08;

  void validate() const {
    if (encoder_widths.empty()) throw ConfigError("encoder_widths must not be empty");
    for (int w : encoder_widths)
      if (w <= 0) throw ConfigError("encoder_widths entries must be positive");
    if (iterative_refinement_steps < 1) throw ConfigError("iterative_refinement_steps must be >= 1");
    if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
    int h = input.height, w = input.width;
    for (size_t k = 0; k < encoder_widths.size(); ++k) {
      h = (h - 1) / 2 + 1;
      w = (w - 1) / 2 + 1;
    }
    const int flat = h * w * encoder_widths.back();
    if (flat != feature_dim) {
      throw ConfigError("feature_dim " + std::to_string(feature_dim) + " does not match encoder output " +
                        std::to_string(h) + "x" + std::to_string(w) + "x" +
                        std::to_string(encoder_widths.back()) + " = " + std::to_string(flat));
    }
  }

  friend bool operator==(const RegressorConfig&, const RegressorConfig&) = default;
};

inline void to_json(nlohmann::json& j, const RegressorConfig& c) {
  j = {{"feature_dim", c.feature_dim},   {"encoder_widths", c.encoder_widths},
       {"iterative_refinement_steps", c.iterative_refinement_steps},
       {"head_hidden", c.head_hidden},   {"input_height", c.input.height},
       {"input_width", c.input.width},   {"init_seed", c.init_seed},
       {"mean_scale", c.mean_scale},     {"mean_ty", c.mean_ty}};
}

inline void from_json(const nlohmann::json& j, RegressorConfig& c) {
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("encoder_widths").get_to(c.encoder_widths);
  j.at("iterative_refinement_steps").get_to(c.iterative_refinement_steps);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("input_height").get_to(c.input.height);
  j.at("input_width").get_to(c.input.width);
  j.at("init_seed").get_to(c.init_seed);
  j.at("mean_scale").get_to(c.mean_scale);
  j.at("mean_ty").get_to(c.mean_ty);
}

template <typename T>
struct ContextAffine {
  VecX<T> gamma;
  VecX<T> delta;

  static ContextAffine identity(int dim) { return {VecX<T>::Ones(dim), VecX<T>::Zero(dim)}; }
  int dim() const { return static_cast<int>(gamma.size()); }
};

// Stacks images into (batch * H * W, 3) rows.
template <typename T>
MatX<T> stack_images(const std::vector<const Image*>& images, ImageSize size) {
  const Eigen::Index px = static_cast<Eigen::Index>(size.height) * size.width;
  MatX<T> x(static_cast<Eigen::Index>(images.size()) * px, 3);
  for (size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != size.height || img.width != size.width) {
      throw ValidationError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                            ", regressor expects " + std::to_string(size.height) + "x" +
                            std::to_string(size.width));
    }
    for (Eigen::Index k = 0; k < px * 3; ++k) x.data()[b * px * 3 + k] = static_cast<T>(img.data[k]);
  }
  return x;
}

template <typename T>
class Regressor {
 public:
  struct StepCache {
    MatX<T> input;  // [features, params]
    MatX<T> pre;
    MatX<T> hidden;
  };

  struct Cache {
    std::vector<MatX<T>> cols;
    std::vector<MatX<T>> pre;
    std::vector<typename nn::Conv2d<T>::Shape> shapes;
    MatX<T> features;   // encoder output f
    MatX<T> modulated;  // gamma * f + delta (or f)
    MatX<T> gamma;      // empty without context
    std::vector<StepCache> steps;
  };

  explicit Regressor(RegressorConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int in = 3;
    for (size_t k = 0; k < cfg_.encoder_widths.size(); ++k) {
      convs_.emplace_back(in, cfg_.encoder_widths[k], 2, "encoder.conv" + std::to_string(k));
      in = cfg_.encoder_widths[k];
    }
    fc1_ = nn::Linear<T>(cfg_.feature_dim + kParamDim, cfg_.head_hidden, "head.fc1");
    fc2_ = nn::Linear<T>(cfg_.head_hidden, kParamDim, "head.fc2");
    mean_params_ = VecX<T>::Zero(kParamDim);
    mean_params_[kPoseDim + kNumShape] = static_cast<T>(cfg_.mean_scale);
    mean_params_[kPoseDim + kNumShape + 2] = static_cast<T>(cfg_.mean_ty);
    initialize(cfg_.init_seed);
  }

  const RegressorConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.feature_dim; }
  const VecX<T>& mean_params() const { return mean_params_; }

  void initialize(uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& c : convs_) {
      nn::fill_normal(c.weight.value, std::sqrt(2.0 / c.weight.value.rows()), rng);
      c.bias.value.setZero();
    }
    nn::fill_normal(fc1_.weight.value, std::sqrt(2.0 / fc1_.in_features()), rng);
    fc1_.bias.value.setZero();
    // Small last layer so an untrained head stays near the mean parameters.
    nn::fill_normal(fc2_.weight.value, 0.01 * std::sqrt(1.0 / fc2_.in_features()), rng);
    fc2_.bias.value.setZero();
  }

  std::vector<nn::Parameter<T>*> parameters() {
    std::vector<nn::Parameter<T>*> out;
    for (auto& c : convs_)
      for (auto* p : c.parameters()) out.push_back(p);
    for (auto* p : fc1_.parameters()) out.push_back(p);
    for (auto* p : fc2_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const nn::Parameter<T>*> parameters() const {
    std::vector<const nn::Parameter<T>*> out;
    for (auto* p : const_cast<Regressor*>(this)->parameters()) out.push_back(p);
    return out;
  }

  MatX<T> encode(const MatX<T>& x, int batch, Cache* cache) const {
    typename nn::Conv2d<T>::Shape shape{batch, cfg_.input.height, cfg_.input.width};
    MatX<T> a = x;
    for (const auto& conv : convs_) {
      MatX<T> cols;
      MatX<T> pre = conv.forward(a, shape, cols);
      a = nn::leaky_relu(pre);
      if (cache) {
        cache->cols.push_back(std::move(cols));
        cache->pre.push_back(std::move(pre));
        cache->shapes.push_back(shape);
      }
      shape = conv.output_shape(shape);
    }
    // (batch * h * w, c) row-major reinterpreted as (batch, h * w * c).
    return Eigen::Map<const MatX<T>>(a.data(), batch, cfg_.feature_dim);
  }

  // Features of a batch; gamma/delta are (batch, feature_dim) when given.
  MatX<T> head(const MatX<T>& features, const MatX<T>* gamma, const MatX<T>* delta, Cache* cache) const {
    const Eigen::Index batch = features.rows();
    MatX<T> f = features;
    if (gamma || delta) {
      if (!gamma || !delta) throw ConfigError("context needs both gamma and delta");
      if (gamma->cols() != cfg_.feature_dim || delta->cols() != cfg_.feature_dim || gamma->rows() != batch ||
          delta->rows() != batch) {
        throw ConfigError("context affine has dimension " + std::to_string(gamma->cols()) +
                          ", regressor feature_dim is " + std::to_string(cfg_.feature_dim));
      }
      f = gamma->cwiseProduct(features) + *delta;
    }
    MatX<T> theta = mean_params_.transpose().replicate(batch, 1);
    if (cache) {
      cache->features = features;
      cache->modulated = f;
      cache->gamma = gamma ? *gamma : MatX<T>();
    }
    for (int s = 0; s < cfg_.iterative_refinement_steps; ++s) {
      StepCache sc;
      sc.input.resize(batch, cfg_.feature_dim + kParamDim);
      sc.input << f, theta;
      sc.pre = fc1_.forward(sc.input);
      sc.hidden = nn::leaky_relu(sc.pre);
      theta += fc2_.forward(sc.hidden);
      if (cache) cache->steps.push_back(std::move(sc));
    }
    return theta;
  }

  // Returns (batch, 85) flat parameter rows.
  MatX<T> forward(const std::vector<const Image*>& images, const MatX<T>* gamma = nullptr,
                  const MatX<T>* delta = nullptr, Cache* cache = nullptr) const {
    const MatX<T> x = stack_images<T>(images, cfg_.input);
    const MatX<T> f = encode(x, static_cast<int>(images.size()), cache);
    return head(f, gamma, delta, cache);
  }

  MatX<T> features(const std::vector<const Image*>& images) const {
    return encode(stack_images<T>(images, cfg_.input), static_cast<int>(images.size()), nullptr);
  }

  BodyParams<T> predict(const Image& image, const std::optional<ContextAffine<T>>& context = std::nullopt) const {
    MatX<T> out;
    if (context) {
      if (context->dim() != cfg_.feature_dim || context->delta.size() != cfg_.feature_dim) {
        throw ConfigError("context affine has dimension " + std::to_string(context->dim()) +
                          ", regressor feature_dim is " + std::to_string(cfg_.feature_dim));
      }
      const MatX<T> g = context->gamma.transpose();
      const MatX<T> d = context->delta.transpose();
      out = forward({&image}, &g, &d);
    } else {
      out = forward({&image});
    }
    return BodyParams<T>::unchecked(out.row(0).transpose());
  }

  // Accumulates weight gradients from dL/d(output params). When context was
  // used, dL/dgamma and dL/ddelta are written if requested.
  void backward(const Cache& cache, const MatX<T>& grad_out, MatX<T>* grad_gamma = nullptr,
                MatX<T>* grad_delta = nullptr, bool train_encoder = true) {
    const Eigen::Index batch = grad_out.rows();
    MatX<T> g_theta = grad_out;
    MatX<T> g_f = MatX<T>::Zero(batch, cfg_.feature_dim);
    for (int s = cfg_.iterative_refinement_steps - 1; s >= 0; --s) {
      const auto& sc = cache.steps[s];
      MatX<T> g_hidden = fc2_.backward(sc.hidden, g_theta);
      MatX<T> g_pre = nn::leaky_relu_backward(sc.pre, g_hidden);
      MatX<T> g_in = fc1_.backward(sc.input, g_pre);
      g_f += g_in.leftCols(cfg_.feature_dim);
      g_theta += g_in.rightCols(kParamDim);
    }
    if (cache.gamma.size()) {
      if (grad_gamma) *grad_gamma = g_f.cwiseProduct(cache.features);
      if (grad_delta) *grad_delta = g_f;
      g_f = g_f.cwiseProduct(cache.gamma);
    }
    if (!train_encoder) return;
    const Eigen::Index rows = cache.pre.back().rows();
    MatX<T> g = Eigen::Map<const MatX<T>>(g_f.data(), rows, cache.pre.back().cols());
    for (int k = static_cast<int>(convs_.size()) - 1; k >= 0; --k) {
      g = nn::leaky_relu_backward(cache.pre[k], g);
      g = convs_[k].backward(cache.cols[k], cache.shapes[k], g, k > 0);
    }
  }

 private:
  RegressorConfig cfg_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::Linear<T> fc1_, fc2_;
  VecX<T> mean_params_;
};

struct ContextConfig {
  int max_history = 8;  // N - 1
  int channels = 16;
  int hidden = 128;
  int feature_dim = 2048;
  double init_std = 0.01;
  uint64_t init_seed = 0;

  void validate() const {
    if (max_history < 1 || max_history > 8) throw ConfigError("context max_history must be in [1, 8]");
    if (channels < 1 || hidden < 1 || feature_dim < 1) throw ConfigError("context dimensions must be positive");
    if (init_std < 0) throw ConfigError("context init_std must be >= 0");
  }

  friend bool operator==(const ContextConfig&, const ContextConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ContextConfig& c) {
  j = {{"max_history", c.max_history}, {"channels", c.channels},   {"hidden", c.hidden},
       {"feature_dim", c.feature_dim}, {"init_std", c.init_std}, {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ContextConfig& c) {
  j.at("max_history").get_to(c.max_history);
  j.at("channels").get_to(c.channels);
  j.at("hidden").get_to(c.hidden);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("init_std").get_to(c.init_std);
  j.at("init_seed").get_to(c.init_seed);
}

// Maps previous-frame predictions to a feature-wise affine modulation:
// 1x1 conv over the history axis, LeakyReLU, linear to `hidden`, LeakyReLU,
// then two linear heads for gamma (offset by 1) and delta.
template <typename T>
class ContextNetwork {
 public:
  struct Cache {
    MatX<T> history;  // (max_history, 85) after padding
    MatX<T> conv_pre;  // (channels, 85)
    MatX<T> flat;      // (1, channels * 85)
    MatX<T> hidden_pre;
    MatX<T> hidden;   // (1, hidden)
    bool identity = false;
  };

  explicit ContextNetwork(ContextConfig cfg = {})
      : cfg_(cfg),
        conv_w_("context.conv.weight", cfg.channels, cfg.max_history),
        conv_b_("context.conv.bias", cfg.channels, 1),
        fc_(cfg.channels * kParamDim, cfg.hidden, "context.fc"),
        gamma_head_(cfg.hidden, cfg.feature_dim, "context.gamma"),
        delta_head_(cfg.hidden, cfg.feature_dim, "context.delta") {
    cfg_.validate();
    initialize(cfg_.init_seed, cfg_.init_std);
  }

  const ContextConfig& config() const { return cfg_; }

  void initialize(uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    for (auto* p : parameters()) {
      if (p->name.ends_with(".bias")) {
        p->value.setZero();
      } else {
        nn::fill_normal(p->value, stddev, rng);
      }
    }
  }

  std::vector<nn::Parameter<T>*> parameters() {
    return {&conv_w_, &conv_b_, &fc_.weight, &fc_.bias, &gamma_head_.weight, &gamma_head_.bias,
            &delta_head_.weight, &delta_head_.bias};
  }

  std::vector<const nn::Parameter<T>*> parameters() const {
    std::vector<const nn::Parameter<T>*> out;
    for (auto* p : const_cast<ContextNetwork*>(this)->parameters()) out.push_back(p);
    return out;
  }

  // Left-pads by repeating the oldest row; rows are ordered oldest first.
  MatX<T> pad_history(const MatX<T>& history) const {
    if (history.cols() != kParamDim) {
      throw ValidationError("context history must have " + std::to_string(kParamDim) + " columns");
    }
    if (history.rows() > cfg_.max_history) {
      throw ValidationError("context history of length " + std::to_string(history.rows()) +
                            " exceeds maximum " + std::to_string(cfg_.max_history));
    }
    MatX<T> out(cfg_.max_history, kParamDim);
    const Eigen::Index missing = cfg_.max_history - history.rows();
    for (Eigen::Index r = 0; r < missing; ++r) out.row(r) = history.row(0);
    out.bottomRows(history.rows()) = history;
    return out;
  }

  ContextAffine<T> forward(const MatX<T>& history, Cache* cache = nullptr) const {
    if (history.rows() == 0) {
      if (cache) cache->identity = true;
      return ContextAffine<T>::identity(cfg_.feature_dim);
    }
    if (!history.allFinite()) throw ValidationError("context history is not finite");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.identity = false;
    c.history = pad_history(history);
    c.conv_pre = conv_w_.value * c.history;
    c.conv_pre.colwise() += conv_b_.value.col(0);
    const MatX<T> conv = nn::leaky_relu(c.conv_pre);
    c.flat = Eigen::Map<const MatX<T>>(conv.data(), 1, conv.size());
    c.hidden_pre = fc_.forward(c.flat);
    c.hidden = nn::leaky_relu(c.hidden_pre);
    ContextAffine<T> out;
    out.gamma = (gamma_head_.forward(c.hidden).array() + T(1)).transpose();
    out.delta = delta_head_.forward(c.hidden).transpose();
    return out;
  }

  void backward(const Cache& c, const VecX<T>& grad_gamma, const VecX<T>& grad_delta) {
    if (c.identity) return;
    MatX<T> g_hidden = gamma_head_.backward(c.hidden, grad_gamma.transpose());
    g_hidden += delta_head_.backward(c.hidden, grad_delta.transpose());
    const MatX<T> g_hpre = nn::leaky_relu_backward(c.hidden_pre, g_hidden);
    const MatX<T> g_flat = fc_.backward(c.flat, g_hpre);
    const MatX<T> g_conv = Eigen::Map<const MatX<T>>(g_flat.data(), cfg_.channels, kParamDim);
    const MatX<T> g_pre = nn::leaky_relu_backward(c.conv_pre, g_conv);
    conv_w_.grad.noalias() += g_pre * c.history.transpose();
    conv_b_.grad.col(0) += g_pre.rowwise().sum();
  }

 private:
  ContextConfig cfg_;
  nn::Parameter<T> conv_w_, conv_b_;
  nn::Linear<T> fc_, gamma_head_, delta_head_;
};

// A regressor with an optional context network, as stored on disk.
template <typename T>
struct Model {
  Regressor<T> regressor;
  std::optional<ContextNetwork<T>> context;
  nlohmann::json metadata = nlohmann::json::object();

  std::vector<nn::Parameter<T>*> parameters() {
    auto out = regressor.parameters();
    if (context)
      for (auto* p : context->parameters()) out.push_back(p);
    return out;
  }
};

template <typename T>
nn::Archive to_archive(const Model<T>& m) {
  nlohmann::json header = {{"format", "flowfit-checkpoint"}, {"regressor", m.regressor.config()}};
  if (m.context) header["context"] = m.context->config();
  header["metadata"] = m.metadata;
  nn::Archive a;
  a.header = header.dump(1);
  for (const auto* p : m.regressor.parameters()) a.tensors.push_back(nn::to_tensor(*p));
  if (m.context)
    for (const auto* p : m.context->parameters()) a.tensors.push_back(nn::to_tensor(*p));
  return a;
}

template <typename T>
Model<T> from_archive(const nn::Archive& a) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(a.header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "flowfit-checkpoint") throw FormatError("unknown checkpoint format");
  Model<T> m{Regressor<T>(header.at("regressor").get<RegressorConfig>()), std::nullopt,
             header.value("metadata", nlohmann::json::object())};
  if (header.contains("context")) m.context.emplace(header.at("context").get<ContextConfig>());
  if (m.context && m.context->config().feature_dim != m.regressor.feature_dim()) {
    throw ConfigError("context feature_dim does not match regressor feature_dim");
  }
  for (auto* p : m.parameters()) nn::from_tensor(a.find(p->name), *p);
  return m;
}

template <typename T>
void save_model(const Model<T>& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  nn::write_archive(to_archive(m), os);
  if (!os) throw Error("write failed: " + path);
}

template <typename T>
Model<T> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  return from_archive<T>(nn::read_archive(is));
}

}  // namespace flowfit
