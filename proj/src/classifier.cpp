#include "dra/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "dra/errors.hpp"

namespace dra {

namespace {
// Pixels are centered at 0.5 and scaled to roughly unit standard deviation.
constexpr double kInputScale = 4.0;

// He-uniform bound for the conv stack; the default 1/sqrt(fan_in) bound lets
// the signal vanish before pooling.
void he_rescale(Conv2d& c) {
  for (double& v : c.weight.value.values()) v *= std::sqrt(6.0);
}
}  // namespace

Tensor predict_logits(const Classifier& model, const Tensor& images, std::uint64_t draw) {
  Tape tape(false);
  return model.logits(tape, tape.constant(images), draw).value();
}

void EncoderConfig::validate() const {
  if (arch != "conv" && arch != "patch-transformer") throw ConfigError("unknown encoder arch '" + arch + "'");
  if (in_channels <= 0 || num_classes < 2 || width <= 0 || feature_dim <= 0) throw ConfigError("encoder sizes must be positive");
  if (arch == "patch-transformer") {
    if (image_size % patch != 0) throw ConfigError("image size must be a multiple of the patch size");
    if (heads <= 0 || feature_dim % heads != 0) throw ConfigError("token dim must be divisible by the head count");
  } else if (image_size % 4 != 0) {
    throw ConfigError("conv encoder needs an image size divisible by 4");
  }
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"arch", arch},   {"in_channels", in_channels}, {"image_size", image_size}, {"num_classes", num_classes},
          {"width", width}, {"feature_dim", feature_dim}, {"patch", patch},           {"heads", heads}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.arch = j.value("arch", c.arch);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.width = j.value("width", c.width);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.patch = j.value("patch", c.patch);
  c.heads = j.value("heads", c.heads);
  c.validate();
  return c;
}

ConvEncoder::ConvEncoder(const EncoderConfig& cfg, Rng& rng) {
  const int w = cfg.width;
  stem = Conv2d("enc.stem", cfg.in_channels, w, 3, 1, 1, rng);
  stage1 = Conv2d("enc.stage1", w, 2 * w, 3, 2, 1, rng);
  block_a = Conv2d("enc.block_a", 2 * w, 2 * w, 3, 1, 1, rng);
  block_b = Conv2d("enc.block_b", 2 * w, 2 * w, 3, 1, 1, rng);
  stage2 = Conv2d("enc.stage2", 2 * w, cfg.feature_dim, 3, 2, 1, rng);
  for (Conv2d* c : {&stem, &stage1, &block_a, &block_b, &stage2}) he_rescale(*c);
}

Var ConvEncoder::operator()(Tape& tape, Var x) const {
  Var h = silu(stem(tape, scale(add_scalar(x, -0.5), kInputScale)));
  h = silu(stage1(tape, h));
  h = add(h, block_b(tape, silu(block_a(tape, h))));
  h = silu(stage2(tape, h));
  return spatial_mean(h);
}

void ConvEncoder::collect(ParamRefs& out) {
  stem.collect(out);
  stage1.collect(out);
  block_a.collect(out);
  block_b.collect(out);
  stage2.collect(out);
}

PatchTransformer::PatchTransformer(const EncoderConfig& cfg, Rng& rng)
    : dim(cfg.feature_dim), heads(cfg.heads), tokens((cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch)) {
  embed = Conv2d("enc.embed", cfg.in_channels, dim, cfg.patch, cfg.patch, 0, rng);
  position = {"enc.position", normal_tensor({tokens * dim}, rng, 0.02)};
  norm1 = LayerNorm("enc.norm1", dim);
  norm2 = LayerNorm("enc.norm2", dim);
  norm_out = LayerNorm("enc.norm_out", dim);
  qkv = Linear("enc.qkv", dim, 3 * dim, rng);
  for (int h = 0; h < heads; ++h) head_out.emplace_back("enc.attn_out" + std::to_string(h), dim / heads, dim, rng);
  mlp_in = Linear("enc.mlp_in", dim, 2 * dim, rng);
  mlp_out = Linear("enc.mlp_out", 2 * dim, dim, rng);
}

Var PatchTransformer::operator()(Tape& tape, Var x) const {
  const int n = x.shape()[0];
  Var t = transpose12(reshape(embed(tape, scale(add_scalar(x, -0.5), kInputScale)), {n, dim, tokens}));  // [n, T, D]
  t = reshape(add_row_bias(reshape(t, {n, tokens * dim}), tape.param(position)), {n * tokens, dim});

  const int dh = dim / heads;
  Var q3 = qkv(tape, norm1(tape, t));
  Var attn;
  for (int h = 0; h < heads; ++h) {
    Var q = reshape(slice_cols(q3, h * dh, (h + 1) * dh), {n, tokens, dh});
    Var k = reshape(slice_cols(q3, dim + h * dh, dim + (h + 1) * dh), {n, tokens, dh});
    Var v = reshape(slice_cols(q3, 2 * dim + h * dh, 2 * dim + (h + 1) * dh), {n, tokens, dh});
    Var w = softmax_last(scale(batched_matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh))));
    Var o = head_out[h](tape, reshape(batched_matmul(w, v, false, false), {n * tokens, dh}));
    attn = h == 0 ? o : add(attn, o);
  }
  t = add(t, attn);
  t = add(t, mlp_out(tape, silu(mlp_in(tape, norm2(tape, t)))));
  return token_mean(reshape(norm_out(tape, t), {n, tokens, dim}));
}

void PatchTransformer::collect(ParamRefs& out) {
  embed.collect(out);
  out.push_back(&position);
  norm1.collect(out);
  qkv.collect(out);
  for (auto& l : head_out) l.collect(out);
  norm2.collect(out);
  mlp_in.collect(out);
  mlp_out.collect(out);
  norm_out.collect(out);
}

ProjectionHead::ProjectionHead(int feature_dim, int target_dim, Rng& rng) {
  const int hidden = std::max(feature_dim, target_dim);
  l1 = Linear("proj.l1", feature_dim, hidden, rng);
  l2 = Linear("proj.l2", hidden, hidden, rng);
  l3 = Linear("proj.l3", hidden, target_dim, rng);
}

Var ProjectionHead::operator()(Tape& tape, Var f) const { return l3(tape, silu(l2(tape, silu(l1(tape, f))))); }

void ProjectionHead::collect(ParamRefs& out) {
  l1.collect(out);
  l2.collect(out);
  l3.collect(out);
}

RobustClassifier::RobustClassifier(const EncoderConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
  config_.validate();
  Rng rng(stream_seed(init_seed, Stream::kInit));
  if (cfg.arch == "conv") {
    conv_ = ConvEncoder(cfg, rng);
  } else {
    transformer_ = PatchTransformer(cfg, rng);
  }
  head_ = Linear("head", cfg.feature_dim, cfg.num_classes, rng);
}

Var RobustClassifier::features(Tape& tape, Var images) const {
  return config_.arch == "conv" ? conv_(tape, images) : transformer_(tape, images);
}

Var RobustClassifier::logits(Tape& tape, Var images, std::uint64_t) const { return head_(tape, features(tape, images)); }

ParamRefs RobustClassifier::encoder_parameters() {
  ParamRefs p;
  if (config_.arch == "conv") {
    conv_.collect(p);
  } else {
    transformer_.collect(p);
  }
  return p;
}

ParamRefs RobustClassifier::parameters() {
  ParamRefs p = encoder_parameters();
  head_.collect(p);
  return p;
}

ConstParamRefs RobustClassifier::parameters() const {
  ParamRefs p = const_cast<RobustClassifier*>(this)->parameters();
  return ConstParamRefs(p.begin(), p.end());
}

void RobustClassifier::attach_projection(int target_dim, std::uint64_t seed) {
  if (target_dim <= 0) throw ArgumentError("projection target dim must be positive");
  Rng rng(stream_seed(seed, Stream::kInit, 1));
  projection_ = ProjectionHead(config_.feature_dim, target_dim, rng);
}

void RobustClassifier::init_ema() { ema_ = snapshot(parameters()); }

RobustClassifier RobustClassifier::ema_model() const {
  if (!has_ema()) throw ArgumentError("classifier has no EMA shadow");
  RobustClassifier copy = *this;
  restore(copy.parameters(), ema_);
  return copy;
}

void RobustClassifier::to_archive(TensorArchive& ar) const {
  for (const Parameter* p : parameters()) ar.put("live/" + p->name, p->value);
  if (has_ema()) {
    const auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) ar.put("ema/" + params[i]->name, ema_[i]);
  }
  if (projection_) {
    ParamRefs proj;
    const_cast<ProjectionHead&>(*projection_).collect(proj);
    for (const Parameter* p : proj) ar.put("proj/" + p->name, p->value);
    ar.meta()["projection_dim"] = projection_->target_dim();
  }
  ar.meta()["encoder"] = config_.to_json();
}

RobustClassifier RobustClassifier::from_archive(const TensorArchive& ar, const std::string& origin) {
  try {
    RobustClassifier m(EncoderConfig::from_json(ar.meta().at("encoder")), 0);
    auto load = [&](Parameter* p, const std::string& key) {
      Tensor t = ar.get(key);
      if (t.shape() != p->value.shape()) throw IngestionError(origin + ": '" + key + "' has the wrong shape");
      p->value = std::move(t);
    };
    for (Parameter* p : m.parameters()) load(p, "live/" + p->name);
    if (ar.contains("ema/head.weight")) {
      for (Parameter* p : m.parameters()) m.ema_.push_back(ar.get("ema/" + p->name));
    }
    if (ar.meta().contains("projection_dim")) {
      m.attach_projection(ar.meta().at("projection_dim").get<int>(), 0);
      ParamRefs proj;
      m.projection_->collect(proj);
      for (Parameter* p : proj) load(p, "proj/" + p->name);
    }
    return m;
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

}  // namespace dra
