#include "dra/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dra/errors.hpp"
#include "dra/probe.hpp"

namespace dra::attacks {

namespace {

constexpr int kChunk = 128;
constexpr std::uint64_t kEvalDrawTag = 0xe7a1;
constexpr std::uint64_t kCleanDrawTag = 0xc1ea;

std::uint64_t eval_draw(const NoiseHandling& noise, std::uint64_t seed) {
  return noise.kind == NoiseHandling::Kind::kSeeded ? noise.seed : derive_seed(seed, {kEvalDrawTag});
}

std::vector<std::uint64_t> step_draws(const NoiseHandling& noise, std::uint64_t seed, int restart, int step) {
  switch (noise.kind) {
    case NoiseHandling::Kind::kSeeded:
      return {noise.seed};
    case NoiseHandling::Kind::kPlain:
      return {derive_seed(seed, {static_cast<std::uint64_t>(restart), static_cast<std::uint64_t>(step)})};
    case NoiseHandling::Kind::kEot: {
      std::vector<std::uint64_t> d(noise.draws);
      for (int k = 0; k < noise.draws; ++k)
        d[k] = derive_seed(seed, {static_cast<std::uint64_t>(restart), static_cast<std::uint64_t>(step),
                                  static_cast<std::uint64_t>(k) + 1});
      return d;
    }
  }
  return {};
}

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Loss rows and input gradient averaged over draws.
std::pair<std::vector<double>, Tensor> loss_and_grad(const Classifier& model, const Tensor& x, std::span<const int> y,
                                                     Objective objective, const Tensor& clean_logits,
                                                     const std::vector<std::uint64_t>& draws, bool need_grad) {
  std::vector<double> loss(x.dim(0), 0.0);
  Tensor grad(x.shape());
  for (std::uint64_t d : draws) {
    Tape tape(need_grad);
    Var xin = tape.input(x);
    Var rows = attack_loss_rows(tape, model, xin, y, objective, clean_logits, d);
    const Tensor& lv = rows.value();
    for (int i = 0; i < x.dim(0); ++i) loss[i] += lv[i] / draws.size();
    if (need_grad) {
      tape.backward(sum(rows));
      const Tensor g = tape.grad(xin);
      for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i] / draws.size();
    }
  }
  return {std::move(loss), std::move(grad)};
}

}  // namespace

std::string to_string(Objective o) { return o == Objective::kKl ? "kl-divergence" : "cross-entropy"; }

Objective objective_from_string(const std::string& s) {
  if (s == "cross-entropy" || s == "ce") return Objective::kCrossEntropy;
  if (s == "kl-divergence" || s == "kl") return Objective::kKl;
  throw ConfigError("unknown attack objective '" + s + "'");
}

std::string AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("attack epsilon must lie in [0, 1)");
  if (!(alpha > 0.0)) throw ConfigError("attack alpha must be positive");
  if (steps < 0) throw ConfigError("attack steps must be >= 0");
  if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
  if (alpha > epsilon && epsilon > 0.0) return "alpha exceeds epsilon";
  return {};
}

nlohmann::json AttackConfig::to_json() const {
  return {{"epsilon", epsilon},     {"alpha", alpha}, {"steps", steps}, {"restarts", restarts},
          {"objective", to_string(objective)}, {"random_init", random_init}, {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.alpha = j.value("alpha", c.alpha);
  c.steps = j.value("steps", c.steps);
  c.restarts = j.value("restarts", c.restarts);
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
  c.random_init = j.value("random_init", c.random_init);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string NoiseHandling::label() const {
  switch (kind) {
    case Kind::kPlain:
      return "plain";
    case Kind::kEot:
      return "eot(" + std::to_string(draws) + ")";
    case Kind::kSeeded:
      return "seeded(" + std::to_string(seed) + ")";
  }
  return "?";
}

Tensor project_linf(const Tensor& candidate, const Tensor& anchor, double epsilon) {
  if (candidate.shape() != anchor.shape()) {
    throw ArgumentError("project_linf: shape " + shape_string(candidate.shape()) + " vs " + shape_string(anchor.shape()));
  }
  Tensor out(candidate.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = anchor[i];
    out[i] = std::clamp(std::clamp(candidate[i], a - epsilon, a + epsilon), 0.0, 1.0);
  }
  return out;
}

Var attack_loss_rows(Tape& tape, const Classifier& model, Var x, std::span<const int> y, Objective objective,
                     const Tensor& clean_logits, std::uint64_t draw) {
  Var logits = model.logits(tape, x, draw);
  if (!logits.value().all_finite()) throw NumericError("non-finite logits in attack");
  if (objective == Objective::kCrossEntropy) return cross_entropy_rows(logits, y);
  return kl_rows(tape.constant(clean_logits), logits);
}

AttackResult pgd_attack(const Classifier& model, const Tensor& x, std::span<const int> y, const AttackConfig& config,
                        const NoiseHandling& noise) {
  config.validate();
  if (x.rank() < 2 || static_cast<int>(y.size()) != x.dim(0)) throw ArgumentError("pgd_attack: one label per image");
  if (noise.kind == NoiseHandling::Kind::kEot && noise.draws <= 0) throw ArgumentError("eot needs at least one draw");
  const int n = x.dim(0);
  const std::size_t stride = x.size() / n;

  Tensor clean_logits;
  if (config.objective == Objective::kKl) {
    const std::uint64_t d = noise.kind == NoiseHandling::Kind::kSeeded ? noise.seed : derive_seed(config.seed, {kCleanDrawTag});
    clean_logits = predict_logits(model, x, d);
  }

  AttackResult res;
  res.adversarial = x;
  res.best_loss.assign(n, -std::numeric_limits<double>::infinity());
  for (int r = 0; r < config.restarts; ++r) {
    Rng rng(stream_seed(config.seed, Stream::kAttack, r));
    Tensor xt = x;
    if (config.random_init) {
      std::uniform_real_distribution<double> u(-config.epsilon, config.epsilon);
      for (auto& v : xt.values()) v += u(rng);
      xt = project_linf(xt, x, config.epsilon);
    }
    std::vector<double> trace;
    for (int t = 0; t <= config.steps; ++t) {
      const bool need_grad = t < config.steps;
      auto [loss, grad] = loss_and_grad(model, xt, y, config.objective, clean_logits, step_draws(noise, config.seed, r, t), need_grad);
      double mean_loss = 0.0;
      for (int i = 0; i < n; ++i) {
        mean_loss += loss[i] / n;
        if (loss[i] >= res.best_loss[i]) {
          res.best_loss[i] = loss[i];
          std::copy_n(xt.data() + i * stride, stride, res.adversarial.data() + i * stride);
        }
      }
      trace.push_back(mean_loss);
      if (!need_grad) break;
      if (!grad.all_finite()) throw NumericError("non-finite attack gradient at step " + std::to_string(t));
      for (std::size_t i = 0; i < xt.size(); ++i) xt[i] += config.alpha * sign(grad[i]);
      xt = project_linf(xt, x, config.epsilon);
    }
    res.loss_trace.push_back(std::move(trace));
  }
  const auto pred = argmax_rows(predict_logits(model, res.adversarial, eval_draw(noise, config.seed)));
  res.success.resize(n);
  for (int i = 0; i < n; ++i) res.success[i] = pred[i] != y[i];
  return res;
}

Tensor eot_gradient(const Classifier& model, const Tensor& x, std::span<const int> y, int n_draws, std::uint64_t seed,
                    Objective objective) {
  if (n_draws <= 0) throw ArgumentError("eot_gradient: n_draws must be positive");
  if (static_cast<int>(y.size()) != x.dim(0)) throw ArgumentError("eot_gradient: one label per image");
  Tensor clean_logits;
  if (objective == Objective::kKl) clean_logits = predict_logits(model, x, derive_seed(seed, {kCleanDrawTag}));
  std::vector<std::uint64_t> draws(n_draws);
  for (int k = 0; k < n_draws; ++k) draws[k] = derive_seed(seed, {static_cast<std::uint64_t>(k)});
  Tensor g = loss_and_grad(model, x, y, objective, clean_logits, draws, true).second;
  if (!g.all_finite()) throw NumericError("non-finite EOT gradient");
  return g;
}

RobustEval evaluate_preset(const Classifier& model, const Tensor& images, std::span<const int> labels,
                           const std::vector<AttackConfig>& attacks, const std::string& preset_name,
                           const NoiseHandling& noise) {
  if (attacks.empty()) throw ArgumentError("attack preset is empty");
  if (static_cast<int>(labels.size()) != images.dim(0)) throw ArgumentError("evaluate: one label per image");
  RobustEval ev;
  ev.preset = preset_name;
  ev.noise = noise.label();
  ev.n = images.dim(0);
  for (const auto& a : attacks)
    if (auto w = a.validate(); !w.empty()) ev.warnings.push_back(w);
  ev.robust_mask.assign(ev.n, false);
  int clean = 0, robust = 0;
  for (int begin = 0, chunk = 0; begin < ev.n; begin += kChunk, ++chunk) {
    const int end = std::min(ev.n, begin + kChunk);
    const Tensor x = images.rows(begin, end);
    const std::span<const int> y = labels.subspan(begin, end - begin);
    const std::uint64_t chunk_seed = derive_seed(attacks.front().seed, {static_cast<std::uint64_t>(chunk)});
    const auto pred = argmax_rows(predict_logits(model, x, eval_draw(noise, chunk_seed)));
    std::vector<bool> ok(end - begin);
    for (int i = 0; i < end - begin; ++i) {
      ok[i] = pred[i] == y[i];
      clean += ok[i];
    }
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      AttackConfig cfg = attacks[a];
      // The first attack shares the clean evaluation draw so epsilon = 0
      // reproduces clean accuracy exactly.
      cfg.seed = a == 0 ? chunk_seed : derive_seed(cfg.seed, {static_cast<std::uint64_t>(chunk), a});
      const auto res = pgd_attack(model, x, y, cfg, noise);
      for (int i = 0; i < end - begin; ++i) ok[i] = ok[i] && !res.success[i];
    }
    for (int i = 0; i < end - begin; ++i) {
      robust += ok[i];
      ev.robust_mask[begin + i] = ok[i];
    }
  }
  ev.clean_accuracy = static_cast<double>(clean) / ev.n;
  ev.robust_accuracy = static_cast<double>(robust) / ev.n;
  if (ev.robust_accuracy > ev.clean_accuracy) ev.warnings.push_back("robust accuracy exceeds clean accuracy");
  return ev;
}

RobustEval evaluate_robust(const Classifier& model, const Tensor& images, std::span<const int> labels,
                           const AttackConfig& config, const NoiseHandling& noise) {
  return evaluate_preset(model, images, labels, {config}, "pgd-" + std::to_string(config.steps), noise);
}

std::vector<AttackConfig> strong_pgd_attacks(double epsilon, std::uint64_t seed) {
  AttackConfig ce;
  ce.epsilon = epsilon;
  ce.alpha = epsilon / 4.0;
  ce.steps = 50;
  ce.restarts = 10;
  ce.seed = seed;
  AttackConfig kl = ce;
  kl.objective = Objective::kKl;
  kl.restarts = 1;
  kl.seed = derive_seed(seed, {1});
  if (epsilon == 0.0) ce.alpha = kl.alpha = 1.0 / 255.0;
  return {ce, kl};
}

RobustEval evaluate_strong_pgd(const Classifier& model, const Tensor& images, std::span<const int> labels,
                               double epsilon, std::uint64_t seed, const NoiseHandling& noise) {
  return evaluate_preset(model, images, labels, strong_pgd_attacks(epsilon, seed), kStrongPgdPreset, noise);
}

}  // namespace dra::attacks
