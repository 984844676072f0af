#include "dra/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "dra/errors.hpp"
#include "dra/probe.hpp"

namespace dra::diffusion {

namespace {

constexpr double kSigmaData = 0.25;
constexpr int kSigmaFeatures = 7;
constexpr int kEvalChunk = 128;

// [log(sigma)/4, sin(k c), cos(k c)] for k = 1..3, one row per example.
Tensor sigma_features(std::span<const double> sigmas) {
  const int n = static_cast<int>(sigmas.size());
  Tensor f({n, kSigmaFeatures});
  for (int i = 0; i < n; ++i) {
    const double c = std::log(sigmas[i]) / 4.0;
    f.at(i, 0) = c;
    for (int k = 1; k <= 3; ++k) {
      f.at(i, 2 * k - 1) = std::sin(k * c);
      f.at(i, 2 * k) = std::cos(k * c);
    }
  }
  return f;
}

// Per-example scalar broadcast to an image-shaped constant.
Tensor broadcast_rows(const Shape& shape, std::span<const double> per_row) {
  Tensor t(shape);
  const std::size_t stride = t.size() / shape[0];
  for (int i = 0; i < shape[0]; ++i) std::fill_n(t.data() + i * stride, stride, per_row[i]);
  return t;
}

void check_finite(const Var& v, const std::string& stage) {
  if (!v.value().all_finite()) throw NumericError("non-finite activations at stage '" + stage + "'");
}

std::vector<int> condition_rows(const Condition& cond, int n, int num_classes) {
  if (cond.is_unconditional()) return std::vector<int>(n, num_classes);
  if (static_cast<int>(cond.labels.size()) != n) throw ArgumentError("condition label count does not match batch");
  for (int y : cond.labels)
    if (y < 0 || y > num_classes) throw ArgumentError("condition label out of range");
  return cond.labels;
}

}  // namespace

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0 && sigma_min <= eval_sigma && eval_sigma <= sigma_max)) {
    throw ConfigError("noise schedule needs 0 < sigma_min <= eval_sigma <= sigma_max");
  }
  if (train_sampler != "log-uniform") throw ConfigError("unknown sigma sampler '" + train_sampler + "'");
}

double NoiseSchedule::sample_train(Rng& rng) const {
  std::uniform_real_distribution<double> u(std::log(sigma_min), std::log(sigma_max));
  return std::exp(u(rng));
}

std::vector<double> NoiseSchedule::sampling_grid(int steps) const {
  if (steps < 2) throw ArgumentError("sampling grid needs at least two steps");
  std::vector<double> g(steps);
  const double a = std::log(sigma_max), b = std::log(sigma_min);
  for (int i = 0; i < steps; ++i) g[i] = std::exp(a + (b - a) * i / (steps - 1));
  return g;
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"sigma_min", sigma_min}, {"sigma_max", sigma_max}, {"eval_sigma", eval_sigma}, {"train_sampler", train_sampler}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  NoiseSchedule s;
  s.sigma_min = j.value("sigma_min", s.sigma_min);
  s.sigma_max = j.value("sigma_max", s.sigma_max);
  s.eval_sigma = j.value("eval_sigma", s.eval_sigma);
  s.train_sampler = j.value("train_sampler", s.train_sampler);
  s.validate();
  return s;
}

nlohmann::json UNetConfig::to_json() const {
  return {{"in_channels", in_channels},     {"image_size", image_size},     {"num_classes", num_classes},
          {"base_channels", base_channels}, {"mid_channels", mid_channels}, {"bottleneck_channels", bottleneck_channels}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.mid_channels = j.value("mid_channels", c.mid_channels);
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  return c;
}

double input_scale(double sigma) { return 1.0 / std::sqrt(kSigmaData * kSigmaData + sigma * sigma); }

Var denoise_loss(Tape& tape, const NoisePredictor& model, const Tensor& images, double sigma, const Tensor& noise,
                 const Condition& cond) {
  std::vector<double> sigmas(images.dim(0), sigma);
  return denoise_loss(tape, model, images, sigmas, noise, cond);
}

Var denoise_loss(Tape& tape, const NoisePredictor& model, const Tensor& images, std::span<const double> sigmas,
                 const Tensor& noise, const Condition& cond) {
  if (noise.shape() != images.shape()) throw ArgumentError("denoise_loss: noise must be shaped like the images");
  if (static_cast<int>(sigmas.size()) != images.dim(0)) throw ArgumentError("denoise_loss: one sigma per image");
  Tensor noisy = images;
  const std::size_t stride = images.size() / images.dim(0);
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += sigmas[i / stride] * noise[i];
  Var pred = model.predict_noise(tape, tape.constant(std::move(noisy)), sigmas, cond);
  check_finite(pred, "noise-prediction");
  return mean(square(sub(pred, tape.constant(noise))));
}

UNetEncoder::UNetEncoder(const std::string& prefix, const UNetConfig& cfg, bool conditional, Rng& rng)
    : config(cfg), class_conditional(conditional) {
  sigma_embed_in = Linear(prefix + "sigma_embed_in", kSigmaFeatures, cfg.base_channels, rng);
  sigma_embed_mid = Linear(prefix + "sigma_embed_mid", kSigmaFeatures, cfg.bottleneck_channels, rng);
  if (conditional) {
    class_table = {prefix + "class_table", normal_tensor({cfg.num_classes + 1, cfg.bottleneck_channels}, rng, 0.5)};
  }
  enc1 = Conv2d(prefix + "enc1", cfg.in_channels, cfg.base_channels, 3, 1, 1, rng);
  down1 = Conv2d(prefix + "down1", cfg.base_channels, cfg.mid_channels, 3, 2, 1, rng);
  down2 = Conv2d(prefix + "down2", cfg.mid_channels, cfg.bottleneck_channels, 3, 2, 1, rng);
  mid = Conv2d(prefix + "mid", cfg.bottleneck_channels, cfg.bottleneck_channels, 3, 1, 1, rng);
}

void UNetEncoder::collect(ParamRefs& out) {
  sigma_embed_in.collect(out);
  sigma_embed_mid.collect(out);
  if (class_conditional) out.push_back(&class_table);
  enc1.collect(out);
  down1.collect(out);
  down2.collect(out);
  mid.collect(out);
}

UNetEncoder::Activations UNetEncoder::operator()(Tape& tape, Var noisy, std::span<const double> sigmas,
                                                 const Condition& cond) const {
  const int n = noisy.shape()[0];
  if (static_cast<int>(sigmas.size()) != n) throw ArgumentError("UNet encoder: one sigma per image");
  for (double s : sigmas)
    if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("UNet encoder: sigma must be positive and finite");
  std::vector<double> scales(n);
  for (int i = 0; i < n; ++i) scales[i] = input_scale(sigmas[i]);
  Activations a;
  a.scaled_input = mul(add_scalar(noisy, -0.5), tape.constant(broadcast_rows(noisy.shape(), scales)));
  Var semb = tape.constant(sigma_features(sigmas));
  a.enc1 = silu(add_channel_bias(enc1(tape, a.scaled_input), sigma_embed_in(tape, semb)));
  a.down1 = silu(down1(tape, a.enc1));
  a.down2 = silu(down2(tape, a.down1));
  Var cbias = sigma_embed_mid(tape, semb);
  if (class_conditional) {
    cbias = add(cbias, embedding(tape.param(class_table), condition_rows(cond, n, config.num_classes)));
  }
  a.bottleneck = silu(add_channel_bias(mid(tape, a.down2), cbias));
  check_finite(a.bottleneck, kBottleneckTap);
  return a;
}

DiffusionModel::DiffusionModel(const UNetConfig& cfg, const NoiseSchedule& schedule, std::uint64_t init_seed)
    : config_(cfg), schedule_(schedule) {
  schedule_.validate();
  if (cfg.image_size % 4 != 0) throw ConfigError("UNet image size must be divisible by 4");
  Rng rng(stream_seed(init_seed, Stream::kInit));
  encoder_ = UNetEncoder("diffusion.", cfg, true, rng);
  up1 = Conv2d("diffusion.up1", cfg.bottleneck_channels, cfg.mid_channels, 3, 1, 1, rng);
  up2 = Conv2d("diffusion.up2", cfg.mid_channels, cfg.base_channels, 3, 1, 1, rng);
  out = Conv2d("diffusion.out", cfg.base_channels, cfg.in_channels, 3, 1, 1, rng);
}

ParamRefs DiffusionModel::parameters() {
  ParamRefs p;
  encoder_.collect(p);
  up1.collect(p);
  up2.collect(p);
  out.collect(p);
  return p;
}

ConstParamRefs DiffusionModel::parameters() const {
  ParamRefs p = const_cast<DiffusionModel*>(this)->parameters();
  return ConstParamRefs(p.begin(), p.end());
}

const std::vector<std::string>& DiffusionModel::tap_points() const {
  static const std::vector<std::string> taps = {"enc1", "down1", "down2", kBottleneckTap, "up1", "up2"};
  return taps;
}

int DiffusionModel::tap_width(const std::string& tap_point) const {
  if (tap_point == "enc1" || tap_point == "up2") return config_.base_channels;
  if (tap_point == "down1" || tap_point == "up1") return config_.mid_channels;
  if (tap_point == "down2" || tap_point == kBottleneckTap) return config_.bottleneck_channels;
  throw ConfigError("unknown tap point '" + tap_point + "'");
}

Var DiffusionModel::tap(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond,
                        const std::string& tap_point) const {
  tap_width(tap_point);
  const auto a = encoder_(tape, noisy, sigmas, cond);
  if (tap_point == "enc1") return a.enc1;
  if (tap_point == "down1") return a.down1;
  if (tap_point == "down2") return a.down2;
  if (tap_point == kBottleneckTap) return a.bottleneck;
  Var u1 = add(silu(up1(tape, upsample_nearest2x(a.bottleneck))), a.down1);
  if (tap_point == "up1") return u1;
  return add(silu(up2(tape, upsample_nearest2x(u1))), a.enc1);
}

Var DiffusionModel::predict_noise(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition& cond) const {
  const auto a = encoder_(tape, noisy, sigmas, cond);
  Var u1 = add(silu(up1(tape, upsample_nearest2x(a.bottleneck))), a.down1);
  check_finite(u1, "up1");
  Var u2 = add(silu(up2(tape, upsample_nearest2x(u1))), a.enc1);
  check_finite(u2, "up2");
  // Skip term sigma * c_in * x_in is the optimal prediction for Gaussian data
  // with std kSigmaData; the network learns the residual.
  std::vector<double> skip(sigmas.size());
  for (std::size_t i = 0; i < sigmas.size(); ++i) skip[i] = sigmas[i] * input_scale(sigmas[i]);
  Var pred = add(out(tape, u2), mul(a.scaled_input, tape.constant(broadcast_rows(noisy.shape(), skip))));
  check_finite(pred, "out");
  return pred;
}

TensorArchive DiffusionModel::to_archive() const {
  TensorArchive ar;
  for (const Parameter* p : parameters()) ar.put(p->name, p->value);
  ar.meta()["kind"] = "diffusion";
  ar.meta()["unet"] = config_.to_json();
  ar.meta()["schedule"] = schedule_.to_json();
  ar.meta()["tap_points"] = tap_points();
  nlohmann::json widths = nlohmann::json::object();
  for (const auto& t : tap_points()) widths[t] = tap_width(t);
  ar.meta()["tap_widths"] = widths;
  ar.meta()["training"] = training_info;
  return ar;
}

DiffusionModel DiffusionModel::from_archive(const TensorArchive& ar, const std::string& origin) {
  try {
    if (ar.meta().at("kind") != "diffusion") throw IngestionError(origin + ": not a diffusion checkpoint");
    DiffusionModel m(UNetConfig::from_json(ar.meta().at("unet")), NoiseSchedule::from_json(ar.meta().at("schedule")), 0);
    for (Parameter* p : m.parameters()) {
      Tensor t = ar.get(p->name);
      if (t.shape() != p->value.shape()) throw IngestionError(origin + ": parameter '" + p->name + "' has the wrong shape");
      p->value = std::move(t);
    }
    m.training_info = ar.meta().value("training", nlohmann::json{});
    return m;
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

void DiffusionModel::save(const std::filesystem::path& path) const { to_archive().save(path); }

DiffusionModel DiffusionModel::load(const std::filesystem::path& path) {
  return from_archive(TensorArchive::load(path), path.string());
}

std::string DiffusionModel::checkpoint_id() const {
  TensorArchive ar;
  for (const Parameter* p : parameters()) ar.put(p->name, p->value);
  ar.meta()["unet"] = config_.to_json();
  return sha256_hex(ar.serialize()).substr(0, 16);
}

nlohmann::json DiffusionTrainConfig::to_json() const {
  return {{"steps", steps},  {"batch_size", batch_size},     {"learning_rate", learning_rate},
          {"seed", seed},    {"unet", unet.to_json()},       {"schedule", schedule.to_json()}};
}

DiffusionTrainConfig DiffusionTrainConfig::from_json(const nlohmann::json& j) {
  DiffusionTrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  if (j.contains("unet")) c.unet = UNetConfig::from_json(j.at("unet"));
  if (j.contains("schedule")) c.schedule = NoiseSchedule::from_json(j.at("schedule"));
  return c;
}

DiffusionModel train_diffusion(const data::LabeledImageBatch& train, const DiffusionTrainConfig& config,
                               std::vector<double>* loss_trace) {
  if (config.steps < 0 || config.batch_size <= 0) throw ConfigError("diffusion training needs steps >= 0 and batch_size > 0");
  UNetConfig unet = config.unet;
  unet.in_channels = train.channels();
  unet.image_size = train.height();
  unet.num_classes = train.num_classes;
  DiffusionModel model(unet, config.schedule, config.seed);
  ParamRefs params = model.parameters();
  Adam opt;
  data::ExampleStream stream(train, stream_seed(config.seed, Stream::kShuffle));
  Rng noise_rng(stream_seed(config.seed, Stream::kDiffusionNoise));
  Rng sigma_rng(stream_seed(config.seed, Stream::kSigma));
  std::bernoulli_distribution drop_label(0.1);
  for (long step = 0; step < config.steps; ++step) {
    data::LabeledImageBatch b = stream.take(config.batch_size);
    std::vector<double> sigmas(b.size());
    for (auto& s : sigmas) s = config.schedule.sample_train(sigma_rng);
    std::vector<int> cond = b.labels;
    for (auto& y : cond)
      if (drop_label(sigma_rng)) y = unet.num_classes;
    Tensor noise = normal_tensor(b.images.shape(), noise_rng);
    Tape tape;
    Var loss;
    try {
      loss = denoise_loss(tape, model, b.images, sigmas, noise, Condition::of(cond));
    } catch (const NumericError& e) {
      throw TrainingError("diffusion training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw TrainingError("diffusion training loss non-finite at step " + std::to_string(step));
    if (loss_trace) loss_trace->push_back(lv);
    tape.backward(loss);
    opt.step(params, gradients(tape, params), cosine_lr(config.learning_rate, step, config.steps));
  }
  model.training_info = config.to_json();
  return model;
}

double heldout_denoise_loss(const NoisePredictor& model, const NoiseSchedule& schedule,
                            const data::LabeledImageBatch& data, std::uint64_t seed) {
  Rng noise_rng(stream_seed(seed, Stream::kDiffusionNoise, 1));
  Rng sigma_rng(stream_seed(seed, Stream::kSigma, 1));
  double total = 0.0;
  for (int begin = 0; begin < data.size(); begin += kEvalChunk) {
    const int end = std::min(data.size(), begin + kEvalChunk);
    Tensor x = data.images.rows(begin, end);
    std::vector<double> sigmas(end - begin);
    for (auto& s : sigmas) s = schedule.sample_train(sigma_rng);
    Tensor noise = normal_tensor(x.shape(), noise_rng);
    std::vector<int> labels(data.labels.begin() + begin, data.labels.begin() + end);
    Tape tape(false);
    total += denoise_loss(tape, model, x, sigmas, noise, Condition::of(labels)).value()[0] * (end - begin);
  }
  return total / data.size();
}

Tensor sample_images(const DiffusionModel& model, int n, int cls, std::uint64_t seed, int steps) {
  if (n <= 0) throw ArgumentError("sample_images: n must be positive");
  if (cls < 0 || cls >= model.num_classes()) throw ArgumentError("sample_images: class out of range");
  const auto& cfg = model.config();
  const auto grid = model.schedule().sampling_grid(steps);
  std::vector<Tensor> chunks;
  for (int begin = 0; begin < n; begin += kEvalChunk) {
    const int m = std::min(n, begin + kEvalChunk) - begin;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(Stream::kSampler), static_cast<std::uint64_t>(cls),
                               static_cast<std::uint64_t>(begin)}));
    Tensor x = normal_tensor({m, cfg.in_channels, cfg.image_size, cfg.image_size}, rng, grid[0]);
    for (auto& v : x.values()) v += 0.5;
    const Condition cond = Condition::of(std::vector<int>(m, cls));
    for (int i = 0; i < steps; ++i) {
      const double s = grid[i];
      const double s_next = i + 1 < steps ? grid[i + 1] : 0.0;
      std::vector<double> sigmas(m, s);
      Tape tape(false);
      Tensor eps;
      try {
        eps = model.predict_noise(tape, tape.constant(x), sigmas, cond).value();
      } catch (const NumericError& e) {
        throw GenerationError(std::string("sampler diverged: ") + e.what());
      }
      for (std::size_t j = 0; j < x.size(); ++j) x[j] += (s_next - s) * eps[j];
      if (!x.all_finite()) throw GenerationError("sampler produced non-finite pixels at step " + std::to_string(i));
    }
    for (auto& v : x.values()) v = std::clamp(v, 0.0, 1.0);
    chunks.push_back(std::move(x));
  }
  return concat_rows(chunks);
}

Tensor extraction_noise(const Shape& image_shape, const NoiseMode& mode, Rng* fresh_rng, int row_offset) {
  if (mode.kind == NoiseMode::Kind::kFresh) {
    if (!fresh_rng) throw ArgumentError("fresh extraction noise needs a generator");
    return normal_tensor(image_shape, *fresh_rng);
  }
  Tensor noise(image_shape);
  const std::size_t stride = noise.size() / image_shape[0];
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < image_shape[0]; ++i) {
    Rng rng(derive_seed(mode.seed, {static_cast<std::uint64_t>(Stream::kDiffusionNoise), static_cast<std::uint64_t>(row_offset + i)}));
    for (std::size_t j = 0; j < stride; ++j) noise[i * stride + j] = g(rng);
    g.reset();
  }
  return noise;
}

namespace {

Var extract_impl(Tape& tape, const DiffusionModel& model, Var images, const Tensor& noise, std::span<const double> sigmas,
                 const Condition& cond, const std::string& tap_point, std::span<const int> zero_channels) {
  if (noise.shape() != images.shape()) throw ArgumentError("extraction noise must be shaped like the images");
  const std::size_t stride = noise.size() / noise.dim(0);
  Tensor scaled = noise;
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= sigmas[i / stride];
  Var act = model.tap(tape, add(images, tape.constant(std::move(scaled))), sigmas, cond, tap_point);
  if (!zero_channels.empty()) {
    const int c = act.shape()[1];
    Tensor mask(act.shape(), 1.0);
    const std::size_t hw = mask.size() / (static_cast<std::size_t>(mask.dim(0)) * c);
    for (int ch : zero_channels) {
      if (ch < 0 || ch >= c) throw ArgumentError("zeroed channel index out of range");
      for (int i = 0; i < mask.dim(0); ++i) std::fill_n(mask.data() + (static_cast<std::size_t>(i) * c + ch) * hw, hw, 0.0);
    }
    act = mul(act, tape.constant(std::move(mask)));
  }
  return spatial_mean(act);
}

}  // namespace

Var extract_var(Tape& tape, const DiffusionModel& model, Var images, const Tensor& noise, double sigma,
                const Condition& cond, const std::string& tap_point, std::span<const int> zero_channels) {
  if (!model.schedule().contains(sigma)) throw ArgumentError("extraction sigma outside the schedule range");
  std::vector<double> sigmas(images.shape()[0], sigma);
  return extract_impl(tape, model, images, noise, sigmas, cond, tap_point, zero_channels);
}

DiffusionRepresentation extract_representation(const DiffusionModel& model, const Tensor& images, const Condition& cond,
                                               const ExtractOptions& options, Rng* fresh_rng) {
  model.tap_width(options.tap_point);
  if (!model.schedule().contains(options.sigma)) throw ArgumentError("extraction sigma outside the schedule range");
  DiffusionRepresentation rep;
  rep.sigma = options.sigma;
  rep.condition = cond;
  rep.tap_point = options.tap_point;
  rep.noise = options.noise;
  const int n = images.dim(0);
  std::vector<Tensor> parts;
  for (int begin = 0; begin < n; begin += kEvalChunk) {
    const int end = std::min(n, begin + kEvalChunk);
    Tensor x = images.rows(begin, end);
    Condition c = cond;
    if (!cond.is_unconditional()) c.labels.assign(cond.labels.begin() + begin, cond.labels.begin() + end);
    const NoiseMode& mode = options.noise;
    Tensor noise = extraction_noise(x.shape(), mode, fresh_rng, begin);
    Tape tape(false);
    std::vector<double> sigmas(end - begin, options.sigma);
    Tensor f = extract_impl(tape, model, tape.constant(x), noise, sigmas, c, options.tap_point, options.zero_channels).value();
    if (options.extra_timestep) {
      std::vector<double> extra(end - begin);
      if (mode.kind == NoiseMode::Kind::kSeeded) {
        for (int i = begin; i < end; ++i) {
          Rng r(derive_seed(mode.seed, {static_cast<std::uint64_t>(Stream::kSigma), static_cast<std::uint64_t>(i)}));
          extra[i - begin] = model.schedule().sample_train(r);
        }
      } else {
        for (auto& s : extra) s = model.schedule().sample_train(*fresh_rng);
      }
      NoiseMode second = mode;
      second.seed = derive_seed(mode.seed, {0xe7});
      Tensor noise2 = extraction_noise(x.shape(), second, fresh_rng, begin);
      Tape tape2(false);
      Tensor f2 = extract_impl(tape2, model, tape2.constant(x), noise2, extra, c, options.tap_point, options.zero_channels).value();
      f = concat_cols(f, f2);
    }
    if (!f.all_finite()) throw NumericError("non-finite diffusion representation");
    parts.push_back(std::move(f));
  }
  rep.features = concat_rows(parts);
  return rep;
}

ProbeCurve sweep_probe_timesteps(const DiffusionModel& model, const data::LabeledImageBatch& train,
                                 const data::LabeledImageBatch& test, std::span<const double> sigma_list,
                                 std::uint64_t seed, const std::string& tap_point) {
  if (sigma_list.empty()) throw ArgumentError("sigma sweep needs at least one sigma");
  if (!std::is_sorted(sigma_list.begin(), sigma_list.end())) throw ArgumentError("sigma sweep must be sorted ascending");
  ProbeCurve curve;
  for (std::size_t i = 0; i < sigma_list.size(); ++i) {
    ExtractOptions opt;
    opt.sigma = sigma_list[i];
    opt.tap_point = tap_point;
    opt.noise = NoiseMode::seeded(derive_seed(seed, {static_cast<std::uint64_t>(Stream::kProbe), i}));
    const auto ftr = extract_representation(model, train.images, Condition::unconditional(), opt);
    opt.noise.seed = derive_seed(opt.noise.seed, {1});
    const auto fte = extract_representation(model, test.images, Condition::unconditional(), opt);
    LinearProbe probe = train_linear_probe(ftr.features, train.labels, train.num_classes);
    curve.sigmas.push_back(sigma_list[i]);
    curve.accuracy.push_back(probe.accuracy(fte.features, test.labels));
  }
  const auto best = std::max_element(curve.accuracy.begin(), curve.accuracy.end());
  curve.best_sigma = curve.sigmas[best - curve.accuracy.begin()];
  return curve;
}

std::vector<int> outlier_channels(const Tensor& activations, double threshold_multiplier) {
  if (!(threshold_multiplier > 1.0)) throw ArgumentError("outlier threshold multiplier must exceed 1");
  if (activations.rank() < 2 || activations.dim(0) == 0) throw ArgumentError("outlier detection needs nonempty activations");
  const int n = activations.dim(0), c = activations.dim(1);
  const std::size_t inner = activations.size() / (static_cast<std::size_t>(n) * c);
  std::vector<double> norms(c, 0.0);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      const double* p = activations.data() + (static_cast<std::size_t>(i) * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) s += p[j] * p[j];
      norms[ch] += std::sqrt(s) / n;
    }
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const double median = c % 2 ? sorted[c / 2] : 0.5 * (sorted[c / 2 - 1] + sorted[c / 2]);
  std::vector<int> out;
  for (int ch = 0; ch < c; ++ch)
    if (norms[ch] > threshold_multiplier * median) out.push_back(ch);
  return out;
}

std::vector<int> identify_outlier_channels(const DiffusionModel& model, const data::LabeledImageBatch& data,
                                           double threshold_multiplier, double sigma, const std::string& tap_point,
                                           std::uint64_t seed) {
  if (data.size() == 0) throw ArgumentError("outlier detection needs nonempty data");
  Tensor noise = extraction_noise(data.images.shape(), NoiseMode::seeded(seed), nullptr);
  std::vector<double> sigmas(data.size(), sigma);
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = data.images[i] + sigma * noise[i];
  Tape tape(false);
  const Tensor act = model.tap(tape, tape.constant(noise), sigmas, Condition::of(data.labels), tap_point).value();
  return outlier_channels(act, threshold_multiplier);
}

}  // namespace dra::diffusion
