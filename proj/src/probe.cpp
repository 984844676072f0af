#include "dra/probe.hpp"

#include <cmath>

#include "dra/errors.hpp"
#include "dra/nn.hpp"

namespace dra {

std::vector<int> argmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = best;
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim(0) != static_cast<int>(labels.size())) throw ArgumentError("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  int hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor LinearProbe::logits(const Tensor& features) const {
  Tape tape(false);
  return logits(tape, tape.constant(features)).value();
}

Var LinearProbe::logits(Tape& tape, Var features) const {
  return add_row_bias(matmul(features, tape.constant(weight)), tape.constant(bias));
}

double LinearProbe::accuracy(const Tensor& features, std::span<const int> labels) const {
  return dra::accuracy(logits(features), labels);
}

LinearProbe train_linear_probe(const Tensor& features, std::span<const int> labels, int num_classes,
                               const ProbeConfig& config) {
  if (features.rank() != 2 || features.dim(0) != static_cast<int>(labels.size()) || labels.empty()) {
    throw ArgumentError("linear probe needs [n, d] features with n matching labels");
  }
  if (!features.all_finite()) throw NumericError("linear probe: non-finite features");
  const int n = features.dim(0), d = features.dim(1);
  std::vector<double> mu(d, 0.0), inv(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mu[j] += features.at(i, j) / n;
  for (int j = 0; j < d; ++j) {
    double v = 0.0;
    for (int i = 0; i < n; ++i) v += (features.at(i, j) - mu[j]) * (features.at(i, j) - mu[j]);
    v /= n;
    inv[j] = v > 1e-24 ? 1.0 / std::sqrt(v) : 0.0;
  }
  Tensor z({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) z.at(i, j) = (features.at(i, j) - mu[j]) * inv[j];

  Parameter w{"probe.weight", Tensor({d, num_classes})};
  Parameter b{"probe.bias", Tensor({num_classes})};
  ParamRefs params{&w, &b};
  Adam opt;
  for (int it = 0; it < config.iterations; ++it) {
    Tape tape;
    Var logits = add_row_bias(matmul(tape.constant(z), tape.param(w)), tape.param(b));
    Var loss = add(mean(cross_entropy_rows(logits, labels)), scale(sum(square(tape.param(w))), 0.5 * config.l2));
    if (!std::isfinite(loss.value()[0])) throw NumericError("linear probe diverged at iteration " + std::to_string(it));
    tape.backward(loss);
    opt.step(params, gradients(tape, params), config.learning_rate);
  }

  LinearProbe probe;
  probe.weight = Tensor({d, num_classes});
  probe.bias = b.value;
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < num_classes; ++k) {
      probe.weight.at(j, k) = w.value.at(j, k) * inv[j];
      probe.bias[k] -= mu[j] * inv[j] * w.value.at(j, k);
    }
  return probe;
}

}  // namespace dra
