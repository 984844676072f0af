#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dra/attacks.hpp"
#include "dra/classifier.hpp"
#include "dra/data.hpp"
#include "dra/diffusion.hpp"

namespace dra::robust {

// CE(clean, y) + beta * KL(softmax(clean) || softmax(adv)), batch-averaged.
Var trades_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, double beta);
Var trades_loss(Tape& tape, const RobustClassifier& model, Var x, Var x_adv, std::span<const int> labels, double beta);

// -mean_i cos(head(h_cls_i), h_dr_i). h_dr is a constant target.
Var dra_loss(Tape& tape, const ProjectionHead& head, Var h_cls, const Tensor& h_dr);

Var total_objective(Var l_at, Var l_dra, double lambda);
double total_objective(double l_at, double l_dra, double lambda);

// shadow <- tau * shadow + (1 - tau) * live, element-wise.
void ema_update(std::vector<Tensor>& shadow, const std::vector<Tensor>& live, double tau);

struct TrainRecipe {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int pgd_steps = 10;
  double trades_beta = 5.0;
  double lambda = 1.2;
  double ema_tau = 0.995;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double learning_rate = 0.2;
  double epochs = 10.0;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double real_fraction = 0.3;
  // DRA target extraction.
  double dra_sigma = 0.1;
  bool dra_conditional = true;
  std::string dra_tap = diffusion::kBottleneckTap;
  EncoderConfig encoder;

  void validate() const;
  long total_steps(int train_size) const;
  nlohmann::json to_json() const;
  static TrainRecipe from_json(const nlohmann::json& j);
};

// Source of h^DR for a batch of clean images.
class TargetProvider {
 public:
  virtual ~TargetProvider() = default;
  virtual Tensor targets(const Tensor& clean, std::span<const int> labels, std::uint64_t noise_seed) const = 0;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
};

class DiffusionTarget : public TargetProvider {
 public:
  DiffusionTarget(const diffusion::DiffusionModel& model, double sigma, bool conditional,
                  std::string tap = diffusion::kBottleneckTap, std::vector<int> zero_channels = {});
  Tensor targets(const Tensor& clean, std::span<const int> labels, std::uint64_t noise_seed) const override;
  int dim() const override;
  std::string id() const override;

 private:
  const diffusion::DiffusionModel& model_;
  double sigma_;
  bool conditional_;
  std::string tap_;
  std::vector<int> zero_channels_;
};

// UNet encoder without class conditioning plus a linear head, trained with
// cross-entropy on noised inputs.
struct NoisyEncoder {
  diffusion::UNetConfig arch;
  diffusion::NoiseSchedule schedule;
  diffusion::UNetEncoder encoder;
  Linear head;
  nlohmann::json training_info;

  // Pooled bottleneck features at x + sigma * noise.
  Var features(Tape& tape, Var images, const Tensor& noise, std::span<const double> sigmas) const;
  ParamRefs parameters();
  TensorArchive to_archive() const;
  static NoisyEncoder from_archive(const TensorArchive& ar, const std::string& origin);
};

struct PretrainConfig {
  long steps = 1500;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  // Negative: sigma from the schedule's training sampler; otherwise fixed.
  double fixed_sigma = -1.0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

NoisyEncoder noisy_discriminative_pretrain(const diffusion::UNetConfig& arch, const data::LabeledImageBatch& train,
                                           const diffusion::NoiseSchedule& noise_sampler, const PretrainConfig& config);

class NoisyDiscriminativeTarget : public TargetProvider {
 public:
  NoisyDiscriminativeTarget(const NoisyEncoder& encoder, double sigma) : encoder_(encoder), sigma_(sigma) {}
  Tensor targets(const Tensor& clean, std::span<const int> labels, std::uint64_t noise_seed) const override;
  int dim() const override { return encoder_.arch.bottleneck_channels; }
  std::string id() const override { return "noisy-discriminative"; }

 private:
  const NoisyEncoder& encoder_;
  double sigma_;
};

struct TrainLog {
  std::vector<double> at_loss;
  std::vector<double> dra_loss;
  std::vector<double> total;
};

struct RobustCheckpoint {
  RobustClassifier model;  // live weights, EMA shadow, projection head
  TrainRecipe recipe;
  bool use_dra = false;
  bool use_synth = false;
  std::string target_id;
  std::string data_fingerprint;
  long steps = 0;

  // EMA weights unless ema is false.
  RobustClassifier evaluated_model(bool ema = true) const;
  TensorArchive to_archive() const;
  static RobustCheckpoint from_archive(const TensorArchive& ar, const std::string& origin);
  void save(const std::filesystem::path& path) const;
  static RobustCheckpoint load(const std::filesystem::path& path);
  std::string checkpoint_id() const;
};

struct TrainInputs {
  const data::LabeledImageBatch* real = nullptr;
  const data::LabeledImageBatch* synthetic = nullptr;
  const TargetProvider* target = nullptr;
};

// TRADES adversarial training with an optional DRA term. Throws ConfigError if
// use_dra has no target or use_synth has no pool.
RobustCheckpoint train_robust(const TrainRecipe& recipe, const TrainInputs& inputs, bool use_dra, bool use_synth,
                              TrainLog* log = nullptr);

// Content hash of a labeled batch (images, labels).
std::string fingerprint(const data::LabeledImageBatch& batch);

}  // namespace dra::robust
