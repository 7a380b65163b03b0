#pragma once

#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "flowfit/body_model.hpp"
#include "flowfit/core.hpp"

namespace flowfit::nn {

template <typename T>
struct Parameter {
  std::string name;
  MatX<T> value;
  MatX<T> grad;

  Parameter() = default;
  Parameter(std::string n, int rows, int cols)
      : name(std::move(n)), value(MatX<T>::Zero(rows, cols)), grad(MatX<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

template <typename T>
void fill_normal(MatX<T>& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(n(rng));
}

constexpr double kLeakySlope = 0.2;

template <typename T>
MatX<T> leaky_relu(const MatX<T>& x) {
  return x.unaryExpr([](T v) { return v > T(0) ? v : T(kLeakySlope) * v; });
}

// Gradient through leaky_relu given the pre-activation.
template <typename T>
MatX<T> leaky_relu_backward(const MatX<T>& pre, const MatX<T>& grad_out) {
  return grad_out.binaryExpr(pre, [](T g, T v) { return v > T(0) ? g : T(kLeakySlope) * g; });
}

// y = x W + b with x (batch, in).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, const std::string& name)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {}

  int in_features() const { return static_cast<int>(weight.value.rows()); }
  int out_features() const { return static_cast<int>(weight.value.cols()); }

  MatX<T> forward(const MatX<T>& x) const {
    if (x.cols() != in_features()) {
      throw ConfigError(weight.name + ": expected " + std::to_string(in_features()) + " inputs, got " +
                        std::to_string(x.cols()));
    }
    MatX<T> y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  // Accumulates parameter gradients; returns dL/dx.
  MatX<T> backward(const MatX<T>& x, const MatX<T>& grad_y, bool need_input_grad = true) {
    weight.grad.noalias() += x.transpose() * grad_y;
    bias.grad.row(0) += grad_y.colwise().sum();
    if (!need_input_grad) return {};
    return grad_y * weight.value.transpose();
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight;
  Parameter<T> bias;
};

// 3x3 convolution, zero padding 1, on HWC activations stored as
// (batch * height * width, channels).
template <typename T>
class Conv2d {
 public:
  struct Shape {
    int batch = 0, height = 0, width = 0;
  };

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int stride, const std::string& name)
      : weight(name + ".weight", 9 * in_channels, out_channels),
        bias(name + ".bias", 1, out_channels),
        in_channels_(in_channels),
        stride_(stride) {}

  int in_channels() const { return in_channels_; }
  int out_channels() const { return static_cast<int>(weight.value.cols()); }
  int stride() const { return stride_; }

  Shape output_shape(Shape in) const {
    return {in.batch, (in.height - 1) / stride_ + 1, (in.width - 1) / stride_ + 1};
  }

  MatX<T> im2col(const MatX<T>& x, Shape in) const {
    const Shape out = output_shape(in);
    const int c = in_channels_;
    MatX<T> cols = MatX<T>::Zero(static_cast<Eigen::Index>(out.batch) * out.height * out.width, 9 * c);
    for (int b = 0; b < in.batch; ++b)
      for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
          T* row = cols.row((static_cast<Eigen::Index>(b) * out.height + oy) * out.width + ox).data();
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride_ + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride_ + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              const T* src = x.row((static_cast<Eigen::Index>(b) * in.height + iy) * in.width + ix).data();
              std::memcpy(row + (ky * 3 + kx) * c, src, sizeof(T) * c);
            }
          }
        }
    return cols;
  }

  MatX<T> col2im(const MatX<T>& cols, Shape in) const {
    const Shape out = output_shape(in);
    const int c = in_channels_;
    MatX<T> x = MatX<T>::Zero(static_cast<Eigen::Index>(in.batch) * in.height * in.width, c);
    for (int b = 0; b < in.batch; ++b)
      for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
          const T* row = cols.row((static_cast<Eigen::Index>(b) * out.height + oy) * out.width + ox).data();
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride_ + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride_ + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              T* dst = x.row((static_cast<Eigen::Index>(b) * in.height + iy) * in.width + ix).data();
              const T* src = row + (ky * 3 + kx) * c;
              for (int k = 0; k < c; ++k) dst[k] += src[k];
            }
          }
        }
    return x;
  }

  // Returns the pre-activation output; `cols` receives the unfolded input.
  MatX<T> forward(const MatX<T>& x, Shape in, MatX<T>& cols) const {
    if (x.cols() != in_channels_) throw ConfigError(weight.name + ": channel mismatch");
    cols = im2col(x, in);
    MatX<T> y = cols * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  MatX<T> backward(const MatX<T>& cols, Shape in, const MatX<T>& grad_y, bool need_input_grad = true) {
    weight.grad.noalias() += cols.transpose() * grad_y;
    bias.grad.row(0) += grad_y.colwise().sum();
    if (!need_input_grad) return {};
    return col2im(grad_y * weight.value.transpose(), in);
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  int in_channels_ = 0;
  int stride_ = 1;
};

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam over a fixed list of parameters; moments are keyed by position.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.push_back(MatX<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatX<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void set_learning_rate(double lr) { opts_.learning_rate = lr; }
  long steps() const { return t_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T lr = static_cast<T>(opts_.learning_rate / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(opts_.epsilon);
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (!p.grad.allFinite()) throw Error("non-finite gradient in " + p.name);
      m_[k] = b1 * m_[k] + (T(1) - b1) * p.grad;
      v_[k] = b2 * v_[k] + (T(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= lr * m_[k].array() / ((v_[k].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions opts_;
  std::vector<MatX<T>> m_, v_;
  long t_ = 0;
};

// Named float32 tensors behind a text header.
//
//   "FFCK" | u32 version=1 | u32 header_bytes | header (UTF-8 JSON)
//   | u32 tensor_count | per tensor: u32 name_bytes, name, u32 rows, u32 cols,
//     rows*cols little-endian f32 in row-major order
struct Tensor {
  std::string name;
  uint32_t rows = 0, cols = 0;
  std::vector<float> data;
};

struct Archive {
  std::string header;
  std::vector<Tensor> tensors;

  const Tensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

inline void write_archive(const Archive& a, std::ostream& os) {
  using detail::write_pod;
  os.write("FFCK", 4);
  write_pod<uint32_t>(os, 1);
  write_pod<uint32_t>(os, static_cast<uint32_t>(a.header.size()));
  os.write(a.header.data(), static_cast<std::streamsize>(a.header.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod<uint32_t>(os, t.rows);
    write_pod<uint32_t>(os, t.cols);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  }
}

inline Archive read_archive(std::istream& is) {
  using detail::read_pod;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FFCK", 4) != 0) throw FormatError("not a checkpoint archive");
  if (read_pod<uint32_t>(is, "version") != 1) throw FormatError("unsupported checkpoint version");
  Archive a;
  const auto header_bytes = read_pod<uint32_t>(is, "header size");
  if (header_bytes > (1u << 24)) throw FormatError("checkpoint header too large");
  a.header.resize(header_bytes);
  is.read(a.header.data(), header_bytes);
  if (!is) throw FormatError("truncated checkpoint header");
  const auto count = read_pod<uint32_t>(is, "tensor count");
  for (uint32_t k = 0; k < count; ++k) {
    Tensor t;
    const auto name_bytes = read_pod<uint32_t>(is, "tensor name size");
    if (name_bytes > 4096) throw FormatError("tensor name too long");
    t.name.resize(name_bytes);
    is.read(t.name.data(), name_bytes);
    t.rows = read_pod<uint32_t>(is, "tensor rows");
    t.cols = read_pod<uint32_t>(is, "tensor cols");
    const uint64_t n = static_cast<uint64_t>(t.rows) * t.cols;
    if (n > (1ull << 28)) throw FormatError("tensor " + t.name + " too large");
    t.data.resize(n);
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * 4));
    if (!is) throw FormatError("truncated tensor " + t.name);
    a.tensors.push_back(std::move(t));
  }
  return a;
}

template <typename T>
Tensor to_tensor(const Parameter<T>& p) {
  Tensor t{p.name, static_cast<uint32_t>(p.value.rows()), static_cast<uint32_t>(p.value.cols()), {}};
  t.data.resize(p.value.size());
  for (Eigen::Index k = 0; k < p.value.size(); ++k) t.data[k] = static_cast<float>(p.value.data()[k]);
  return t;
}

template <typename T>
void from_tensor(const Tensor& t, Parameter<T>& p) {
  if (t.rows != p.value.rows() || t.cols != p.value.cols()) {
    throw FormatError("tensor " + t.name + " has shape " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                      ", expected " + std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
  }
  for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = static_cast<T>(t.data[k]);
}

}  // namespace flowfit::nn
