#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dra/autodiff.hpp"

namespace dra {

std::vector<int> argmax_rows(const Tensor& logits);
double accuracy(const Tensor& logits, std::span<const int> labels);

struct ProbeConfig {
  int iterations = 300;
  double learning_rate = 0.05;
  double l2 = 1e-4;
};

// Multinomial logistic regression on standardized features. The
// standardization is folded into weight/bias after training, so logits are
// a single affine map of the raw features.
struct LinearProbe {
  Tensor weight;  // [d, K]
  Tensor bias;    // [K]

  Tensor logits(const Tensor& features) const;
  Var logits(Tape& tape, Var features) const;
  double accuracy(const Tensor& features, std::span<const int> labels) const;
};

LinearProbe train_linear_probe(const Tensor& features, std::span<const int> labels, int num_classes,
                               const ProbeConfig& config = {});

}  // namespace dra
