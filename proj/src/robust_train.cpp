#include "dra/robust_train.hpp"

#include <algorithm>
#include <cmath>

#include "dra/errors.hpp"

namespace dra::robust {

Var trades_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, double beta) {
  if (!clean_logits.value().all_finite() || !adv_logits.value().all_finite()) throw NumericError("non-finite logits in trades_loss");
  Var ce = mean(cross_entropy_rows(clean_logits, labels));
  return add(ce, scale(mean(kl_rows(clean_logits, adv_logits)), beta));
}

Var trades_loss(Tape& tape, const RobustClassifier& model, Var x, Var x_adv, std::span<const int> labels, double beta) {
  return trades_loss(model.logits(tape, x, 0), model.logits(tape, x_adv, 0), labels, beta);
}

Var dra_loss(Tape& tape, const ProjectionHead& head, Var h_cls, const Tensor& h_dr) {
  Var z = head(tape, h_cls);
  if (z.shape() != h_dr.shape()) {
    throw ArgumentError("dra_loss: projected " + shape_string(z.shape()) + " vs target " + shape_string(h_dr.shape()));
  }
  return scale(mean(cosine_rows(z, h_dr)), -1.0);
}

Var total_objective(Var l_at, Var l_dra, double lambda) { return add(l_at, scale(l_dra, lambda)); }
double total_objective(double l_at, double l_dra, double lambda) { return l_at + lambda * l_dra; }

void ema_update(std::vector<Tensor>& shadow, const std::vector<Tensor>& live, double tau) {
  if (shadow.size() != live.size()) throw ArgumentError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < shadow.size(); ++i)
    if (shadow[i].shape() != live[i].shape()) throw ArgumentError("ema_update: shape mismatch at parameter " + std::to_string(i));
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    double* s = shadow[i].data();
    const double* l = live[i].data();
    for (std::size_t j = 0; j < shadow[i].size(); ++j) s[j] = tau * s[j] + (1.0 - tau) * l[j];
  }
}

void TrainRecipe::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(ema_tau >= 0.0 && ema_tau <= 1.0)) throw ConfigError("ema_tau must lie in [0, 1]");
  if (!(trades_beta >= 0.0)) throw ConfigError("trades_beta must be >= 0");
  if (!(real_fraction >= 0.0 && real_fraction <= 1.0)) throw ConfigError("real_fraction must lie in [0, 1]");
  if (batch_size <= 0 || epochs < 0.0 || pgd_steps < 0) throw ConfigError("batch_size, epochs and pgd_steps must be non-negative");
  if (!(dra_sigma > 0.0)) throw ConfigError("dra_sigma must be positive");
  encoder.validate();
}

long TrainRecipe::total_steps(int train_size) const {
  return static_cast<long>(std::ceil(epochs * train_size / batch_size));
}

nlohmann::json TrainRecipe::to_json() const {
  return {{"epsilon", epsilon},
          {"alpha", alpha},
          {"pgd_steps", pgd_steps},
          {"trades_beta", trades_beta},
          {"lambda", lambda},
          {"ema_tau", ema_tau},
          {"optimizer", {{"kind", "momentum-sgd"}, {"momentum", momentum}, {"weight_decay", weight_decay},
                         {"learning_rate", learning_rate}, {"schedule", "cosine"}}},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"real_fraction", real_fraction},
          {"dra_sigma", dra_sigma},
          {"dra_conditional", dra_conditional},
          {"dra_tap", dra_tap},
          {"encoder", encoder.to_json()}};
}

TrainRecipe TrainRecipe::from_json(const nlohmann::json& j) {
  TrainRecipe r;
  r.epsilon = j.value("epsilon", r.epsilon);
  r.alpha = j.value("alpha", r.alpha);
  r.pgd_steps = j.value("pgd_steps", r.pgd_steps);
  r.trades_beta = j.value("trades_beta", r.trades_beta);
  r.lambda = j.value("lambda", r.lambda);
  r.ema_tau = j.value("ema_tau", r.ema_tau);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.value("kind", std::string("momentum-sgd")) != "momentum-sgd") throw ConfigError("only momentum-sgd is supported");
    r.momentum = o.value("momentum", r.momentum);
    r.weight_decay = o.value("weight_decay", r.weight_decay);
    r.learning_rate = o.value("learning_rate", r.learning_rate);
  }
  r.epochs = j.value("epochs", r.epochs);
  r.batch_size = j.value("batch_size", r.batch_size);
  r.seed = j.value("seed", r.seed);
  r.real_fraction = j.value("real_fraction", r.real_fraction);
  r.dra_sigma = j.value("dra_sigma", r.dra_sigma);
  r.dra_conditional = j.value("dra_conditional", r.dra_conditional);
  r.dra_tap = j.value("dra_tap", r.dra_tap);
  if (j.contains("encoder")) r.encoder = EncoderConfig::from_json(j.at("encoder"));
  r.validate();
  return r;
}

DiffusionTarget::DiffusionTarget(const diffusion::DiffusionModel& model, double sigma, bool conditional, std::string tap,
                                 std::vector<int> zero_channels)
    : model_(model), sigma_(sigma), conditional_(conditional), tap_(std::move(tap)), zero_channels_(std::move(zero_channels)) {
  model_.tap_width(tap_);
}

Tensor DiffusionTarget::targets(const Tensor& clean, std::span<const int> labels, std::uint64_t noise_seed) const {
  diffusion::ExtractOptions opt;
  opt.sigma = sigma_;
  opt.tap_point = tap_;
  opt.noise = diffusion::NoiseMode::seeded(noise_seed);
  opt.zero_channels = zero_channels_;
  const auto cond = conditional_ ? diffusion::Condition::of({labels.begin(), labels.end()}) : diffusion::Condition::unconditional();
  return diffusion::extract_representation(model_, clean, cond, opt).features;
}

int DiffusionTarget::dim() const { return model_.tap_width(tap_); }

std::string DiffusionTarget::id() const {
  return std::string("diffusion:") + model_.checkpoint_id() + (conditional_ ? ":conditional" : ":unconditional");
}

Var NoisyEncoder::features(Tape& tape, Var images, const Tensor& noise, std::span<const double> sigmas) const {
  const std::size_t stride = noise.size() / noise.dim(0);
  Tensor scaled = noise;
  std::vector<double> cond_sigmas(sigmas.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= sigmas[i / stride];
  // The sigma embedding needs a positive input; zero noise embeds as sigma_min.
  for (std::size_t i = 0; i < sigmas.size(); ++i) cond_sigmas[i] = std::max(sigmas[i], schedule.sigma_min);
  Var noisy = add(images, tape.constant(std::move(scaled)));
  return spatial_mean(encoder(tape, noisy, cond_sigmas, diffusion::Condition::unconditional()).bottleneck);
}

ParamRefs NoisyEncoder::parameters() {
  ParamRefs p;
  encoder.collect(p);
  head.collect(p);
  return p;
}

TensorArchive NoisyEncoder::to_archive() const {
  TensorArchive ar;
  for (const Parameter* p : const_cast<NoisyEncoder*>(this)->parameters()) ar.put(p->name, p->value);
  ar.meta()["kind"] = "noisy-discriminative";
  ar.meta()["unet"] = arch.to_json();
  ar.meta()["schedule"] = schedule.to_json();
  ar.meta()["training"] = training_info;
  return ar;
}

NoisyEncoder NoisyEncoder::from_archive(const TensorArchive& ar, const std::string& origin) {
  try {
    if (ar.meta().at("kind") != "noisy-discriminative") throw IngestionError(origin + ": not a noisy-discriminative encoder");
    NoisyEncoder e;
    e.arch = diffusion::UNetConfig::from_json(ar.meta().at("unet"));
    e.schedule = diffusion::NoiseSchedule::from_json(ar.meta().at("schedule"));
    Rng rng(0);
    e.encoder = diffusion::UNetEncoder("nd.", e.arch, false, rng);
    e.head = Linear("nd.head", e.arch.bottleneck_channels, e.arch.num_classes, rng);
    for (Parameter* p : e.parameters()) {
      Tensor t = ar.get(p->name);
      if (t.shape() != p->value.shape()) throw IngestionError(origin + ": parameter '" + p->name + "' has the wrong shape");
      p->value = std::move(t);
    }
    e.training_info = ar.meta().value("training", nlohmann::json{});
    return e;
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& ex) {
    throw IngestionError(origin + ": " + ex.what());
  }
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"steps", steps}, {"batch_size", batch_size}, {"learning_rate", learning_rate}, {"seed", seed}, {"fixed_sigma", fixed_sigma}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.fixed_sigma = j.value("fixed_sigma", c.fixed_sigma);
  return c;
}

NoisyEncoder noisy_discriminative_pretrain(const diffusion::UNetConfig& arch, const data::LabeledImageBatch& train,
                                           const diffusion::NoiseSchedule& noise_sampler, const PretrainConfig& config) {
  noise_sampler.validate();
  if (config.steps < 0 || config.batch_size <= 0) throw ConfigError("pretraining needs steps >= 0 and batch_size > 0");
  NoisyEncoder e;
  e.arch = arch;
  e.arch.in_channels = train.channels();
  e.arch.image_size = train.height();
  e.arch.num_classes = train.num_classes;
  e.schedule = noise_sampler;
  Rng init(stream_seed(config.seed, Stream::kInit));
  e.encoder = diffusion::UNetEncoder("nd.", e.arch, false, init);
  e.head = Linear("nd.head", e.arch.bottleneck_channels, e.arch.num_classes, init);
  ParamRefs params = e.parameters();
  Adam opt;
  data::ExampleStream stream(train, stream_seed(config.seed, Stream::kShuffle));
  Rng noise_rng(stream_seed(config.seed, Stream::kDiffusionNoise));
  Rng sigma_rng(stream_seed(config.seed, Stream::kSigma));
  for (long step = 0; step < config.steps; ++step) {
    const auto b = stream.take(config.batch_size);
    std::vector<double> sigmas(b.size());
    for (auto& s : sigmas) s = config.fixed_sigma >= 0.0 ? config.fixed_sigma : noise_sampler.sample_train(sigma_rng);
    Tensor noise = normal_tensor(b.images.shape(), noise_rng);
    Tape tape;
    Var loss = mean(cross_entropy_rows(e.head(tape, e.features(tape, tape.constant(b.images), noise, sigmas)), b.labels));
    if (!std::isfinite(loss.value()[0])) throw TrainingError("noisy-discriminative pretraining diverged at step " + std::to_string(step));
    tape.backward(loss);
    opt.step(params, gradients(tape, params), cosine_lr(config.learning_rate, step, config.steps));
  }
  e.training_info = config.to_json();
  return e;
}

Tensor NoisyDiscriminativeTarget::targets(const Tensor& clean, std::span<const int>, std::uint64_t noise_seed) const {
  Tensor noise = diffusion::extraction_noise(clean.shape(), diffusion::NoiseMode::seeded(noise_seed), nullptr);
  std::vector<double> sigmas(clean.dim(0), sigma_);
  Tape tape(false);
  return encoder_.features(tape, tape.constant(clean), noise, sigmas).value();
}

RobustClassifier RobustCheckpoint::evaluated_model(bool ema) const {
  RobustClassifier m = ema && model.has_ema() ? model.ema_model() : model;
  m.drop_projection();
  return m;
}

TensorArchive RobustCheckpoint::to_archive() const {
  TensorArchive ar;
  model.to_archive(ar);
  ar.meta()["kind"] = "robust-classifier";
  ar.meta()["recipe"] = recipe.to_json();
  ar.meta()["use_dra"] = use_dra;
  ar.meta()["use_synth"] = use_synth;
  ar.meta()["target_id"] = target_id;
  ar.meta()["data_fingerprint"] = data_fingerprint;
  ar.meta()["steps"] = steps;
  return ar;
}

RobustCheckpoint RobustCheckpoint::from_archive(const TensorArchive& ar, const std::string& origin) {
  try {
    if (ar.meta().at("kind") != "robust-classifier") throw IngestionError(origin + ": not a robust-classifier checkpoint");
    RobustCheckpoint c;
    c.model = RobustClassifier::from_archive(ar, origin);
    c.recipe = TrainRecipe::from_json(ar.meta().at("recipe"));
    c.use_dra = ar.meta().at("use_dra");
    c.use_synth = ar.meta().at("use_synth");
    c.target_id = ar.meta().at("target_id");
    c.data_fingerprint = ar.meta().at("data_fingerprint");
    c.steps = ar.meta().at("steps");
    return c;
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

void RobustCheckpoint::save(const std::filesystem::path& path) const { to_archive().save(path); }

RobustCheckpoint RobustCheckpoint::load(const std::filesystem::path& path) {
  return from_archive(TensorArchive::load(path), path.string());
}

std::string RobustCheckpoint::checkpoint_id() const { return sha256_hex(to_archive().serialize()).substr(0, 16); }

std::string fingerprint(const data::LabeledImageBatch& batch) {
  return sha256_hex(data::to_archive(batch).serialize()).substr(0, 16);
}

RobustCheckpoint train_robust(const TrainRecipe& recipe, const TrainInputs& inputs, bool use_dra, bool use_synth,
                              TrainLog* log) {
  recipe.validate();
  if (!inputs.real || inputs.real->size() == 0) throw ConfigError("robust training needs real training data");
  if (use_dra && !inputs.target) throw ConfigError("use_dra requires a DRA target (diffusion model)");
  if (use_synth && (!inputs.synthetic || inputs.synthetic->size() == 0)) throw ConfigError("use_synth requires a synthetic pool");
  const auto& real = *inputs.real;

  EncoderConfig enc = recipe.encoder;
  enc.in_channels = real.channels();
  enc.image_size = real.height();
  enc.num_classes = real.num_classes;

  RobustCheckpoint ck;
  ck.recipe = recipe;
  ck.recipe.encoder = enc;
  ck.use_dra = use_dra;
  ck.use_synth = use_synth;
  ck.target_id = use_dra ? inputs.target->id() : "none";
  ck.data_fingerprint = fingerprint(real) + (use_synth ? "+" + fingerprint(*inputs.synthetic) : "");
  ck.model = RobustClassifier(enc, recipe.seed);
  if (use_dra) ck.model.attach_projection(inputs.target->dim(), recipe.seed);
  ck.model.init_ema();
  RobustClassifier& model = ck.model;

  ParamRefs live = model.parameters();
  ParamRefs trainable = live;
  if (use_dra) model.projection().collect(trainable);
  MomentumSgd opt(recipe.momentum, recipe.weight_decay);

  data::ExampleStream real_stream(real, stream_seed(recipe.seed, Stream::kData, 0));
  std::unique_ptr<data::ExampleStream> synth_stream;
  if (use_synth) synth_stream = std::make_unique<data::ExampleStream>(*inputs.synthetic, stream_seed(recipe.seed, Stream::kData, 1));
  data::MixSpec mix;
  mix.batch_size = recipe.batch_size;
  mix.real_fraction = use_synth ? data::Fraction::from_double(recipe.real_fraction) : data::Fraction{1, 1};

  const long total = recipe.total_steps(real.size());
  for (long step = 0; step < total; ++step) {
    const data::LabeledImageBatch b = data::sample_mixed_batch(real_stream, synth_stream.get(), mix);

    attacks::AttackConfig adv;
    adv.epsilon = recipe.epsilon;
    adv.alpha = recipe.alpha;
    adv.steps = recipe.pgd_steps;
    adv.objective = attacks::Objective::kKl;
    adv.random_init = true;
    adv.seed = stream_seed(recipe.seed, Stream::kAttack, static_cast<std::uint64_t>(step));
    Tensor x_adv;
    try {
      x_adv = attacks::pgd_attack(model, b.images, b.labels, adv).adversarial;
    } catch (const NumericError& e) {
      throw TrainingError("robust training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    Tape tape;
    Var x = tape.constant(b.images);
    Var h_adv = model.features(tape, tape.constant(x_adv));
    Var l_at, l_dra, objective;
    try {
      l_at = trades_loss(model.logits(tape, x, 0), model.head()(tape, h_adv), b.labels, recipe.trades_beta);
      objective = l_at;
      if (use_dra) {
        const Tensor h_dr = inputs.target->targets(b.images, b.labels, stream_seed(recipe.seed, Stream::kDraTarget, step));
        l_dra = dra_loss(tape, model.projection(), h_adv, h_dr);
        objective = total_objective(l_at, l_dra, recipe.lambda);
      }
    } catch (const NumericError& e) {
      throw TrainingError("robust training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const double total_value = objective.value()[0];
    if (!std::isfinite(total_value)) throw TrainingError("robust training loss non-finite at step " + std::to_string(step));
    if (log) {
      log->at_loss.push_back(l_at.value()[0]);
      log->dra_loss.push_back(use_dra ? l_dra.value()[0] : 0.0);
      log->total.push_back(total_value);
    }
    tape.backward(objective);
    opt.step(trainable, gradients(tape, trainable), cosine_lr(recipe.learning_rate, step, total));
    ema_update(model.ema(), snapshot(live), recipe.ema_tau);
  }
  ck.steps = total;
  return ck;
}

}  // namespace dra::robust
