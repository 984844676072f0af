#include "dra/nn.hpp"

#include <cmath>
#include <numbers>

#include "dra/errors.hpp"

namespace dra {

Tensor normal_tensor(const Shape& shape, Rng& rng, double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Linear::Linear(const std::string& name, int in_features, int out_features, Rng& rng)
    : in(in_features), out(out_features) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = {name + ".weight", uniform_tensor({in_features, out_features}, rng, -bound, bound)};
  bias = {name + ".bias", uniform_tensor({out_features}, rng, -bound, bound)};
}

Var Linear::operator()(Tape& tape, Var x) const {
  return add_row_bias(matmul(x, tape.param(weight)), tape.param(bias));
}

Conv2d::Conv2d(const std::string& name, int in, int out, int kernel, int stride_, int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = {name + ".weight", uniform_tensor({out, in, kernel, kernel}, rng, -bound, bound)};
  bias = {name + ".bias", uniform_tensor({out}, rng, -bound, bound)};
}

Var Conv2d::operator()(Tape& tape, Var x) const {
  return conv2d(x, tape.param(weight), tape.param(bias), stride, padding);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gain{name + ".gain", Tensor({dim}, 1.0)}, bias{name + ".bias", Tensor({dim}, 0.0)} {}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return layer_norm(x, tape.param(gain), tape.param(bias));
}

std::vector<Tensor> snapshot(const ParamRefs& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

void restore(const ParamRefs& params, const std::vector<Tensor>& values) {
  if (values.size() != params.size()) throw ArgumentError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].shape() != params[i]->value.shape()) {
      throw ArgumentError("restore: shape mismatch for " + params[i]->name);
    }
    params[i]->value = values[i];
  }
}

std::vector<Tensor> gradients(const Tape& tape, const ParamRefs& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(tape.param_grad(*p));
  return out;
}

std::size_t parameter_count(const ParamRefs& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

void MomentumSgd::step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) throw ArgumentError("MomentumSgd: gradient count mismatch");
  if (velocity_.empty()) {
    for (const Parameter* p : params) velocity_.emplace_back(p->value.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i]->value;
    Tensor& v = velocity_[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + (g[j] + weight_decay_ * w[j]);
      w[j] -= lr * v[j];
    }
  }
}

void Adam::step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) throw ArgumentError("Adam: gradient count mismatch");
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i]->value;
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
      w[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

double cosine_lr(double peak, long step, long total_steps) {
  if (total_steps <= 0) return peak;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace dra
