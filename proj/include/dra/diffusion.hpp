#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dra/archive.hpp"
#include "dra/data.hpp"
#include "dra/nn.hpp"

namespace dra::diffusion {

inline constexpr const char* kBottleneckTap = "bottleneck-pre-upsample";

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double eval_sigma = 0.1;
  std::string train_sampler = "log-uniform";

  // Throws ConfigError unless 0 < sigma_min <= eval_sigma <= sigma_max and the
  // sampler id is known.
  void validate() const;
  bool contains(double sigma) const { return sigma >= sigma_min && sigma <= sigma_max; }
  double sample_train(Rng& rng) const;
  // Geometric grid sigma_max -> sigma_min with `steps` entries.
  std::vector<double> sampling_grid(int steps) const;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

// Label per example, or unconditional for every example.
struct Condition {
  std::vector<int> labels;  // empty means unconditional

  static Condition unconditional() { return {}; }
  static Condition of(std::vector<int> labels) { return {std::move(labels)}; }
  bool is_unconditional() const { return labels.empty(); }
};

// Anything that predicts the injected noise from a noised image.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Var predict_noise(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond) const = 0;
};

// Mean squared error between the prediction on x + sigma * noise and noise.
// Throws NumericError naming the stage when the prediction is not finite.
Var denoise_loss(Tape& tape, const NoisePredictor& model, const Tensor& images, double sigma, const Tensor& noise,
                 const Condition& cond);
// Per-example sigmas variant used by the training loop.
Var denoise_loss(Tape& tape, const NoisePredictor& model, const Tensor& images, std::span<const double> sigmas,
                 const Tensor& noise, const Condition& cond);

struct UNetConfig {
  int in_channels = 1;
  int image_size = 16;
  int num_classes = 2;
  int base_channels = 8;
  int mid_channels = 16;
  int bottleneck_channels = 32;

  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

// Downsampling half of the U-shaped denoiser. Also reused, without class
// conditioning, as the noisy-input discriminative encoder.
struct UNetEncoder {
  UNetEncoder() = default;
  UNetEncoder(const std::string& prefix, const UNetConfig& cfg, bool class_conditional, Rng& rng);

  struct Activations {
    Var scaled_input;
    Var enc1, down1, down2, bottleneck;
  };
  Activations operator()(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond) const;
  void collect(ParamRefs& out);

  UNetConfig config;
  bool class_conditional = true;
  Linear sigma_embed_in;
  Linear sigma_embed_mid;
  Parameter class_table;  // [num_classes + 1, bottleneck]; last row = unconditional
  Conv2d enc1, down1, down2, mid;
};

// Scale applied to (x_t - 0.5) before the first convolution.
double input_scale(double sigma);

class DiffusionModel : public NoisePredictor {
 public:
  DiffusionModel() = default;
  DiffusionModel(const UNetConfig& cfg, const NoiseSchedule& schedule, std::uint64_t init_seed);

  Var predict_noise(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond) const override;

  // Activation [N, C, H, W] at a named stage. Stages after the bottleneck run
  // the decoder; earlier ones stop there.
  Var tap(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond, const std::string& tap_point) const;

  const std::vector<std::string>& tap_points() const;
  int tap_width(const std::string& tap_point) const;

  ParamRefs parameters();
  ConstParamRefs parameters() const;
  const UNetConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  int num_classes() const { return config_.num_classes; }

  UNetEncoder& encoder() { return encoder_; }
  const UNetEncoder& encoder() const { return encoder_; }
  Conv2d& mid_conv() { return encoder_.mid; }

  TensorArchive to_archive() const;
  static DiffusionModel from_archive(const TensorArchive& ar, const std::string& origin);
  void save(const std::filesystem::path& path) const;
  static DiffusionModel load(const std::filesystem::path& path);
  // Content hash of the parameters and architecture.
  std::string checkpoint_id() const;

  nlohmann::json training_info;

 private:
  UNetConfig config_;
  NoiseSchedule schedule_;
  UNetEncoder encoder_;
  Conv2d up1, up2, out;
};

struct DiffusionTrainConfig {
  long steps = 2000;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  UNetConfig unet;
  NoiseSchedule schedule;

  nlohmann::json to_json() const;
  static DiffusionTrainConfig from_json(const nlohmann::json& j);
};

// Adam on the denoising loss with sigma drawn from the schedule's training
// sampler. Throws TrainingError with the step index on divergence.
DiffusionModel train_diffusion(const data::LabeledImageBatch& train, const DiffusionTrainConfig& config,
                               std::vector<double>* loss_trace = nullptr);

// Average denoise_loss over `data` with sigma from the training sampler,
// seeded noise. The zero predictor scores 1 in expectation.
double heldout_denoise_loss(const NoisePredictor& model, const NoiseSchedule& schedule,
                            const data::LabeledImageBatch& data, std::uint64_t seed);

inline constexpr int kSamplerSteps = 20;

// Deterministic Euler integration of the probability-flow ODE over a
// geometric sigma grid, then clamped to [0,1]. Throws GenerationError on
// non-finite state.
Tensor sample_images(const DiffusionModel& model, int n, int cls, std::uint64_t seed, int steps = kSamplerSteps);

struct NoiseMode {
  enum class Kind { kFresh, kSeeded } kind = Kind::kFresh;
  std::uint64_t seed = 0;

  static NoiseMode fresh() { return {}; }
  static NoiseMode seeded(std::uint64_t s) { return {Kind::kSeeded, s}; }
};

struct ExtractOptions {
  double sigma = 0.1;
  std::string tap_point = kBottleneckTap;
  NoiseMode noise = NoiseMode::fresh();
  std::vector<int> zero_channels;
  // Append a second pooled feature computed at a sigma drawn from the
  // training sampler.
  bool extra_timestep = false;
};

struct DiffusionRepresentation {
  Tensor features;  // [n, d]
  double sigma = 0.0;
  Condition condition;
  std::string tap_point;
  std::string pooling = "spatial-mean";
  NoiseMode noise;
};

// Draws the extraction noise for a batch. Seeded mode uses one generator per
// row index, so the same (seed, row) always yields the same noise. Row i of
// the result is global row row_offset + i.
Tensor extraction_noise(const Shape& image_shape, const NoiseMode& mode, Rng* fresh_rng, int row_offset = 0);

// Differentiable pooled features of x + sigma * noise at the tap point, with
// zero_channels masked before pooling.
Var extract_var(Tape& tape, const DiffusionModel& model, Var images, const Tensor& noise, double sigma,
                const Condition& cond, const std::string& tap_point, std::span<const int> zero_channels);

DiffusionRepresentation extract_representation(const DiffusionModel& model, const Tensor& images, const Condition& cond,
                                               const ExtractOptions& options, Rng* fresh_rng = nullptr);

struct ProbeCurve {
  std::vector<double> sigmas;
  std::vector<double> accuracy;
  double best_sigma = 0.0;
};

// One linear probe per sigma on frozen, unconditional, seeded-noise features.
ProbeCurve sweep_probe_timesteps(const DiffusionModel& model, const data::LabeledImageBatch& train,
                                 const data::LabeledImageBatch& test, std::span<const double> sigma_list,
                                 std::uint64_t seed, const std::string& tap_point = kBottleneckTap);

// Channels whose mean per-image L2 activation norm exceeds multiplier times
// the median channel norm. activations is [n, C, ...].
std::vector<int> outlier_channels(const Tensor& activations, double threshold_multiplier);
std::vector<int> identify_outlier_channels(const DiffusionModel& model, const data::LabeledImageBatch& data,
                                           double threshold_multiplier, double sigma = 0.1,
                                           const std::string& tap_point = kBottleneckTap, std::uint64_t seed = 0);

}  // namespace dra::diffusion
