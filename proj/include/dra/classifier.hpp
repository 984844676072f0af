#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dra/archive.hpp"
#include "dra/nn.hpp"

namespace dra {

// Anything that maps images to logits. `draw` selects the pipeline's internal
// randomness; deterministic models ignore it.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var logits(Tape& tape, Var images, std::uint64_t draw) const = 0;
  virtual bool randomized() const { return false; }
  virtual int num_classes() const = 0;
};

// Logits for a fixed tensor; no gradient tracking.
Tensor predict_logits(const Classifier& model, const Tensor& images, std::uint64_t draw = 0);

struct EncoderConfig {
  std::string arch = "conv";  // "conv" or "patch-transformer"
  int in_channels = 1;
  int image_size = 16;
  int num_classes = 2;
  int width = 8;          // conv: stem channels
  int feature_dim = 32;   // conv: final channels; transformer: token dim
  int patch = 4;
  int heads = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Small residual conv net: stem, two stride-2 stages with a residual block
// between them, spatial mean.
struct ConvEncoder {
  ConvEncoder() = default;
  ConvEncoder(const EncoderConfig& cfg, Rng& rng);
  Var operator()(Tape& tape, Var images) const;
  void collect(ParamRefs& out);

  Conv2d stem, stage1, block_a, block_b, stage2;
};

// Patch embedding, one pre-norm attention block, token mean.
struct PatchTransformer {
  PatchTransformer() = default;
  PatchTransformer(const EncoderConfig& cfg, Rng& rng);
  Var operator()(Tape& tape, Var images) const;
  void collect(ParamRefs& out);

  int dim = 0, heads = 1, tokens = 0;
  Conv2d embed;
  Parameter position;  // [tokens * dim]
  LayerNorm norm1, norm2, norm_out;
  Linear qkv;
  std::vector<Linear> head_out;
  Linear mlp_in, mlp_out;
};

// g_proj: three affine maps with SiLU between them.
struct ProjectionHead {
  ProjectionHead() = default;
  ProjectionHead(int feature_dim, int target_dim, Rng& rng);
  Var operator()(Tape& tape, Var features) const;
  void collect(ParamRefs& out);
  int target_dim() const { return l3.out; }

  Linear l1, l2, l3;
};

// Feature encoder + classification head (+ optional projection head and EMA
// shadow of the encoder and head).
class RobustClassifier : public Classifier {
 public:
  RobustClassifier() = default;
  RobustClassifier(const EncoderConfig& cfg, std::uint64_t init_seed);

  Var features(Tape& tape, Var images) const;
  Var logits(Tape& tape, Var images, std::uint64_t draw) const override;
  int num_classes() const override { return config_.num_classes; }
  int feature_dim() const { return config_.feature_dim; }
  const EncoderConfig& config() const { return config_; }

  // Encoder and classification head; what inference and EMA touch.
  ParamRefs parameters();
  ConstParamRefs parameters() const;
  ParamRefs encoder_parameters();
  Linear& head() { return head_; }
  const Linear& head() const { return head_; }

  void attach_projection(int target_dim, std::uint64_t seed);
  bool has_projection() const { return projection_.has_value(); }
  ProjectionHead& projection() { return *projection_; }
  const ProjectionHead& projection() const { return *projection_; }
  void drop_projection() { projection_.reset(); }

  void init_ema();
  bool has_ema() const { return !ema_.empty(); }
  std::vector<Tensor>& ema() { return ema_; }
  const std::vector<Tensor>& ema() const { return ema_; }
  // Copy whose live weights are the EMA shadow.
  RobustClassifier ema_model() const;

  void to_archive(TensorArchive& ar) const;
  static RobustClassifier from_archive(const TensorArchive& ar, const std::string& origin);

 private:
  EncoderConfig config_;
  ConvEncoder conv_;
  PatchTransformer transformer_;
  Linear head_;
  std::optional<ProjectionHead> projection_;
  std::vector<Tensor> ema_;
};

}  // namespace dra
