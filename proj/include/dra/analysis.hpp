#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dra/archive.hpp"
#include "dra/attacks.hpp"
#include "dra/classifier.hpp"

namespace dra::analysis {

struct RepresentationMeta {
  std::string model_id;
  std::string layer;
  std::optional<double> sigma;
  std::string split = "test";
  std::optional<double> adversarial_epsilon;  // none = clean

  nlohmann::json to_json() const;
  static RepresentationMeta from_json(const nlohmann::json& j);
};

struct RepresentationBatch {
  Tensor features;  // [n, d]
  RepresentationMeta meta;

  int n() const { return features.dim(0); }
  int d() const { return features.dim(1); }
  void validate() const;

  TensorArchive to_archive() const;
  static RepresentationBatch from_archive(const TensorArchive& ar, const std::string& origin);
};

// Rows scaled to unit L2 norm; zero rows stay zero.
Tensor l2_normalize_rows(const Tensor& x);

// Mean squared distance between normalized positive pairs (row i of a, row i of b).
double alignment_metric(const Tensor& a, const Tensor& b);
// log mean_{i != j} exp(-t ||u_i - u_j||^2) over normalized rows.
double uniformity_metric(const Tensor& x, double t = 2.0);

// Mutual-kNN-restricted centered kernel alignment. Gram matrices of
// normalized rows are double-centered; the sum runs over pairs (i, j), i != j,
// where j is among the k nearest neighbours of i in both spaces:
//   score = sum_M Kc Lc / sqrt(sum_M Kc^2 * sum_M Lc^2), clamped to [0, 1].
// Returns 0 when the mask or a normalizer is empty.
double cknna(const Tensor& a, const Tensor& b, int k = 10);
inline constexpr const char* kCknnaFormula =
    "sum_{i!=j, j in kNN_a(i) and kNN_b(i)} Kc_ij Lc_ij / sqrt(sum_{j in kNN_a(i)} Kc_ij^2 * sum_{j in kNN_b(i)} Lc_ij^2), "
    "Kc = HKH, K_ij = <a_i/|a_i|, a_j/|a_j|>, clamped to [0,1]";

// Centered 2D DFT magnitude (fftshift) of a real H x W array.
Tensor centered_dft_magnitude(const Tensor& image_hw);

// Mean over examples (and channels) of the centered |DFT| of the input
// gradient of the cross-entropy loss.
Tensor frequency_saliency(const Classifier& model, const Tensor& images, std::span<const int> labels,
                          std::uint64_t draw = 0);
Tensor frequency_difference(const Classifier& model_a, const Classifier& model_b, const Tensor& images,
                            std::span<const int> labels, std::uint64_t draw = 0);

struct Pca {
  Tensor mean;                      // [d]
  Tensor components;                // [d, d], row i = i-th eigenvector (descending eigenvalue)
  std::vector<double> eigenvalues;  // descending
  int rank = 0;                     // numerically nonzero eigenvalues

  // mean + sum_{i<k} <h - mean, v_i> v_i
  Tensor project(const Tensor& h, int k) const;
};

Pca fit_pca(const Tensor& features);

struct ClsDimReport {
  std::vector<double> accuracy_curve;  // index K = 0..d; K = 0 is the majority-class constant
  std::vector<double> robust_curve;    // index K = 0..d
  double full_accuracy = 0.0;
  double full_robust_accuracy = 0.0;
  int cls95 = 0;
  int cls99 = 0;
  int robust_dim = 0;
  int covariance_rank = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
};

// Threshold dimension: smallest K >= 1 with curve[K] >= threshold * full.
int threshold_dimension(const std::vector<double>& curve, double full, double threshold);
// Smallest K attaining max(curve) over K >= 1.
int argmax_dimension(const std::vector<double>& curve);

// PCA on clean features; clean and adversarial features projected onto the
// clean top-K eigenvectors and classified by the head.
ClsDimReport classification_dimension(const RobustClassifier& model, const Tensor& images, std::span<const int> labels,
                                      const attacks::AttackConfig& attack);
// Variant on precomputed features and head.
ClsDimReport classification_dimension(const Tensor& clean_features, const Tensor& adv_features,
                                      std::span<const int> labels, const Linear& head);

struct SaeConfig {
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int max_latent = 4096;
};

struct SparseAutoencoder {
  Tensor w_enc;  // [d, m]
  Tensor b_enc;  // [m]
  Tensor w_dec;  // [m, d], unit-norm rows
  Tensor b_pre;  // [d]
  int k = 1;

  int d() const { return w_enc.dim(0); }
  int m() const { return w_enc.dim(1); }
  void renormalize_decoder();
  Tensor encode(const Tensor& x) const;
  Tensor reconstruct(const Tensor& x) const;
};

// Mean-predictor SAE: zero decoder, b_pre = mean(x).
SparseAutoencoder mean_sae(const Tensor& x, int m, int k);
// Mean over rows of ||x - reconstruct(x)||^2; fills grads with its gradient
// with respect to (w_enc, b_enc, w_dec, b_pre), top-K selection held fixed.
double sae_loss_gradients(const SparseAutoencoder& sae, const Tensor& x, std::vector<Tensor>& grads);
SparseAutoencoder train_topk_sae(const Tensor& activations, int m, int k, const SaeConfig& config = {});
// MSE(x, reconstruct(x)) / MSE(x, mean(x)).
double normalized_sae_loss(const SparseAutoencoder& sae, const Tensor& activations);

}  // namespace dra::analysis
