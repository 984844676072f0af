#pragma once

#include <string>
#include <vector>

#include "dra/autodiff.hpp"
#include "dra/rng.hpp"

namespace dra {

using ParamRefs = std::vector<Parameter*>;
using ConstParamRefs = std::vector<const Parameter*>;

struct Linear {
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);

  Var operator()(Tape& tape, Var x) const;
  void collect(ParamRefs& out) { out.push_back(&weight), out.push_back(&bias); }

  int in = 0;
  int out = 0;
  Parameter weight;  // [in, out]
  Parameter bias;    // [out]
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride, int padding, Rng& rng);

  Var operator()(Tape& tape, Var x) const;
  void collect(ParamRefs& out) { out.push_back(&weight), out.push_back(&bias); }

  int stride = 1;
  int padding = 1;
  Parameter weight;  // [out, in, k, k]
  Parameter bias;    // [out]
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim);

  Var operator()(Tape& tape, Var x) const;
  void collect(ParamRefs& out) { out.push_back(&gain), out.push_back(&bias); }

  Parameter gain;
  Parameter bias;
};

// Copy of every parameter value, in order.
std::vector<Tensor> snapshot(const ParamRefs& params);
void restore(const ParamRefs& params, const std::vector<Tensor>& values);
std::vector<Tensor> gradients(const Tape& tape, const ParamRefs& params);
std::size_t parameter_count(const ParamRefs& params);

// Heavy-ball SGD with coupled L2 weight decay:
//   v <- momentum * v + (g + wd * p);  p <- p - lr * v
class MomentumSgd {
 public:
  MomentumSgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr);

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Cosine annealing from peak at step 0 to 0 at total_steps.
double cosine_lr(double peak, long step, long total_steps);

}  // namespace dra
