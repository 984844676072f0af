#pragma once

#include <string>

#include "dra/classifier.hpp"
#include "dra/diffusion.hpp"
#include "dra/probe.hpp"

namespace dra::diffusion {

// Frozen diffusion encoder plus linear probe, with fresh extraction noise per
// draw. This is the randomness-reliant defense that EOT evaluation targets.
class DiffusionProbeClassifier : public Classifier {
 public:
  DiffusionProbeClassifier(const DiffusionModel& model, LinearProbe probe, double sigma,
                           std::string tap_point = kBottleneckTap);

  Var logits(Tape& tape, Var images, std::uint64_t draw) const override;
  bool randomized() const override { return sigma_ > 0.0; }
  int num_classes() const override { return probe_.weight.dim(1); }
  double sigma() const { return sigma_; }
  const LinearProbe& probe() const { return probe_; }

 private:
  const DiffusionModel* model_;
  LinearProbe probe_;
  double sigma_;
  std::string tap_;
};

// Fits the probe on unconditional features of `train` at sigma, with noise
// seeded from `seed`.
DiffusionProbeClassifier make_diffusion_probe_classifier(const DiffusionModel& model, const data::LabeledImageBatch& train,
                                                         double sigma, std::uint64_t seed,
                                                         const std::string& tap_point = kBottleneckTap);

}  // namespace dra::diffusion
