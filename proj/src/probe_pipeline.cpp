#include "dra/probe_pipeline.hpp"

#include "dra/errors.hpp"

namespace dra::diffusion {

DiffusionProbeClassifier::DiffusionProbeClassifier(const DiffusionModel& model, LinearProbe probe, double sigma,
                                                   std::string tap_point)
    : model_(&model), probe_(std::move(probe)), sigma_(sigma), tap_(std::move(tap_point)) {
  if (sigma < 0.0) throw ArgumentError("probe pipeline sigma must be non-negative");
}

Var DiffusionProbeClassifier::logits(Tape& tape, Var images, std::uint64_t draw) const {
  const Tensor noise = extraction_noise(images.shape(), NoiseMode::seeded(draw), nullptr);
  Var f = extract_var(tape, *model_, images, noise, sigma_, Condition::unconditional(), tap_, {});
  return probe_.logits(tape, f);
}

DiffusionProbeClassifier make_diffusion_probe_classifier(const DiffusionModel& model, const data::LabeledImageBatch& train,
                                                         double sigma, std::uint64_t seed, const std::string& tap_point) {
  ExtractOptions o;
  o.sigma = sigma;
  o.tap_point = tap_point;
  o.noise = NoiseMode::seeded(derive_seed(seed, {static_cast<std::uint64_t>(Stream::kProbe)}));
  const auto rep = extract_representation(model, train.images, Condition::unconditional(), o);
  LinearProbe probe = train_linear_probe(rep.features, train.labels, train.num_classes);
  return DiffusionProbeClassifier(model, std::move(probe), sigma, tap_point);
}

}  // namespace dra::diffusion
