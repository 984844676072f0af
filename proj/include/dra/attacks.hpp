#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dra/classifier.hpp"

namespace dra::attacks {

enum class Objective { kCrossEntropy, kKl };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;
  int restarts = 1;
  Objective objective = Objective::kCrossEntropy;
  bool random_init = true;
  std::uint64_t seed = 0;

  // Throws ConfigError on out-of-range fields. Returns a warning string when
  // alpha > epsilon, empty otherwise.
  std::string validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

// How a randomized pipeline's internal noise is treated during an attack.
//   plain:  one fresh draw per gradient step
//   eot(n): gradient averaged over n fresh draws per step
//   seeded: the same fixed draw for every call
struct NoiseHandling {
  enum class Kind { kPlain, kEot, kSeeded } kind = Kind::kPlain;
  int draws = 1;
  std::uint64_t seed = 0;

  static NoiseHandling plain() { return {}; }
  static NoiseHandling eot(int n) { return {Kind::kEot, n, 0}; }
  static NoiseHandling seeded(std::uint64_t s) { return {Kind::kSeeded, 1, s}; }
  std::string label() const;
};

struct AttackResult {
  Tensor adversarial;
  std::vector<bool> success;               // prediction != label at the returned point
  std::vector<double> best_loss;           // per example, at the returned point
  std::vector<std::vector<double>> loss_trace;  // [restart][step], batch-mean loss at each iterate
};

// clamp(clamp(candidate, anchor - eps, anchor + eps), 0, 1) element-wise.
Tensor project_linf(const Tensor& candidate, const Tensor& anchor, double epsilon);

// Per-example attack loss of the model at x (CE against y, or KL from the
// clean prediction p_clean_logits to the prediction at x).
Var attack_loss_rows(Tape& tape, const Classifier& model, Var x, std::span<const int> y, Objective objective,
                     const Tensor& clean_logits, std::uint64_t draw);

// l_inf PGD with sign(0) = 0. Per example, the highest-loss iterate over all
// steps and restarts is returned (ties go to the later iterate).
AttackResult pgd_attack(const Classifier& model, const Tensor& x, std::span<const int> y, const AttackConfig& config,
                        const NoiseHandling& noise = NoiseHandling::plain());

// Mean over n_draws independent pipeline draws of d(sum of per-example loss)/dx.
Tensor eot_gradient(const Classifier& model, const Tensor& x, std::span<const int> y, int n_draws, std::uint64_t seed,
                    Objective objective = Objective::kCrossEntropy);

struct RobustEval {
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  int n = 0;
  std::string preset;
  std::string noise;
  std::vector<std::string> warnings;
  std::vector<bool> robust_mask;
};

// Clean accuracy and accuracy under pgd_attack. An example counts as robust
// only if it is classified correctly both clean and under attack.
RobustEval evaluate_robust(const Classifier& model, const Tensor& images, std::span<const int> labels,
                           const AttackConfig& config, const NoiseHandling& noise = NoiseHandling::plain());

// Substitute for AutoAttack: CE PGD-50 x 10 restarts union KL PGD-50, worst
// case per example.
inline constexpr const char* kStrongPgdPreset = "strong-pgd";
std::vector<AttackConfig> strong_pgd_attacks(double epsilon, std::uint64_t seed);
RobustEval evaluate_preset(const Classifier& model, const Tensor& images, std::span<const int> labels,
                           const std::vector<AttackConfig>& attacks, const std::string& preset_name,
                           const NoiseHandling& noise = NoiseHandling::plain());
RobustEval evaluate_strong_pgd(const Classifier& model, const Tensor& images, std::span<const int> labels,
                               double epsilon, std::uint64_t seed, const NoiseHandling& noise = NoiseHandling::plain());

}  // namespace dra::attacks
