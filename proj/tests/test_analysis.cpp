#include <gtest/gtest.h>

#include <Eigen/QR>
#include <complex>
#include <numbers>
#include <numeric>

#include "dra/analysis.hpp"
#include "dra/errors.hpp"
#include "dra/probe.hpp"
#include "test_util.hpp"

using namespace dra;
using namespace dra::analysis;

namespace {

Tensor gaussian(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor({n, d}, rng);
}

std::vector<double> unit_row(const Tensor& x, int i) {
  const int d = x.dim(1);
  std::vector<double> u(d);
  double nn = 0.0;
  for (int j = 0; j < d; ++j) nn += x.at(i, j) * x.at(i, j);
  nn = std::sqrt(nn);
  for (int j = 0; j < d; ++j) u[j] = nn > 0 ? x.at(i, j) / nn : 0.0;
  return u;
}

double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

Tensor random_orthogonal(int d, std::uint64_t seed) {
  const Tensor g = gaussian(d, d, seed);
  Eigen::MatrixXd m = g.matrix();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Tensor q({d, d});
  q.matrix() = qr.householderQ();
  return q;
}

Tensor rotate(const Tensor& x, const Tensor& q) {
  Tensor out(x.shape());
  out.matrix() = x.matrix() * q.matrix();
  return out;
}

// Direct transcription of the documented score with explicit loops.
double cknna_oracle(const Tensor& a, const Tensor& b, int k) {
  const int n = a.dim(0);
  auto gram = [&](const Tensor& x) {
    std::vector<std::vector<double>> g(n, std::vector<double>(n));
    std::vector<std::vector<double>> u(n);
    for (int i = 0; i < n; ++i) u[i] = unit_row(x, i);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) g[i][j] = std::inner_product(u[i].begin(), u[i].end(), u[j].begin(), 0.0);
    return g;
  };
  auto center = [&](std::vector<std::vector<double>> g) {
    std::vector<double> r(n, 0.0), c(n, 0.0);
    double all = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) r[i] += g[i][j] / n, c[j] += g[i][j] / n, all += g[i][j] / (double(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) g[i][j] = g[i][j] - r[i] - c[j] + all;
    return g;
  };
  auto knn = [&](const std::vector<std::vector<double>>& sim) {
    std::vector<std::vector<bool>> f(n, std::vector<bool>(n, false));
    for (int i = 0; i < n; ++i) {
      std::vector<bool> taken(n, false);
      taken[i] = true;
      for (int r = 0; r < k; ++r) {
        int best = -1;
        for (int j = 0; j < n; ++j)
          if (!taken[j] && (best < 0 || sim[i][j] > sim[i][best])) best = j;
        taken[best] = true;
        f[i][best] = true;
      }
    }
    return f;
  };
  const auto ga = gram(a), gb = gram(b);
  const auto ka = center(ga), kb = center(gb);
  const auto na = knn(ga), nb = knn(gb);
  double kl = 0, kk = 0, ll = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) {
        if (na[i][j] && nb[i][j]) kl += ka[i][j] * kb[i][j];
        if (na[i][j]) kk += ka[i][j] * ka[i][j];
        if (nb[i][j]) ll += kb[i][j] * kb[i][j];
      }
  if (kk <= 0 || ll <= 0) return 0.0;
  return std::clamp(kl / std::sqrt(kk * ll), 0.0, 1.0);
}

// Binary logits (0, <w, x>) over a single-channel H x W image.
class LinearImageModel : public Classifier {
 public:
  explicit LinearImageModel(Tensor w) : w_(std::move(w)) {}
  Var logits(Tape& tape, Var images, std::uint64_t) const override {
    const int n = images.shape()[0];
    const int d = static_cast<int>(w_.size());
    Tensor wm({d, 2});
    for (int i = 0; i < d; ++i) wm.at(i, 1) = w_[i];
    return matmul(reshape(images, {n, d}), tape.constant(wm));
  }
  int num_classes() const override { return 2; }

 private:
  Tensor w_;
};

// Centered |DFT| by the defining double sum.
Tensor naive_centered_dft(const Tensor& img) {
  const int h = img.dim(0), w = img.dim(1);
  Tensor out({h, w});
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      std::complex<double> acc = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          acc += img.at(y, x) * std::polar(1.0, -2.0 * std::numbers::pi * (double(u) * y / h + double(v) * x / w));
      out.at((u + h / 2) % h, (v + w / 2) % w) = std::abs(acc);
    }
  return out;
}

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

Linear random_head(int d, int classes, std::uint64_t seed) {
  Rng rng(seed);
  return Linear("head", d, classes, rng);
}

}  // namespace

TEST(Alignment, IdentityAntipodalAndLoopOracle) {
  const Tensor a = gaussian(20, 5, 1);
  EXPECT_EQ(alignment_metric(a, a), 0.0);
  Tensor neg = a;
  for (auto& v : neg.values()) v = -v;
  EXPECT_NEAR(alignment_metric(a, neg), 4.0, 1e-12);
  const Tensor b = gaussian(20, 5, 2);
  double oracle = 0.0;
  for (int i = 0; i < 20; ++i) oracle += sqdist(unit_row(a, i), unit_row(b, i)) / 20;
  EXPECT_NEAR(alignment_metric(a, b), oracle, 1e-10);
  EXPECT_THROW(alignment_metric(a, gaussian(19, 5, 3)), ArgumentError);
}

TEST(Uniformity, CollapsedAntipodalAndPairOracle) {
  const Tensor same({4, 3}, 0.7);
  EXPECT_NEAR(uniformity_metric(same), 0.0, 1e-15);
  EXPECT_NEAR(uniformity_metric(Tensor({2, 2}, {1.0, 0.0, -1.0, 0.0}), 2.0), -8.0, 1e-12);
  const Tensor x = gaussian(30, 4, 4);
  for (double t : {0.5, 2.0, 7.0}) {
    double acc = 0.0;
    for (int i = 0; i < 30; ++i)
      for (int j = 0; j < 30; ++j)
        if (i != j) acc += std::exp(-t * sqdist(unit_row(x, i), unit_row(x, j)));
    EXPECT_NEAR(uniformity_metric(x, t), std::log(acc / (30.0 * 29.0)), 1e-10) << t;
  }
  EXPECT_THROW(uniformity_metric(Tensor({1, 3}, 1.0)), ArgumentError);
  EXPECT_THROW(uniformity_metric(x, 0.0), ArgumentError);
}

TEST(Uniformity, OrthogonalInvariance) {
  const Tensor x = gaussian(25, 6, 5), y = gaussian(25, 6, 6);
  const Tensor q = random_orthogonal(6, 7);
  EXPECT_NEAR(uniformity_metric(rotate(x, q)), uniformity_metric(x), 1e-10);
  EXPECT_NEAR(alignment_metric(rotate(x, q), rotate(y, q)), alignment_metric(x, y), 1e-10);
}

TEST(Cknna, SelfIsOneForEveryK) {
  const Tensor a = gaussian(40, 8, 8);
  for (int k = 1; k < 40; k += 6) EXPECT_NEAR(cknna(a, a, k), 1.0, 1e-12) << k;
}

TEST(Cknna, RotationInvariantAndSymmetric) {
  const Tensor a = gaussian(60, 10, 9);
  const Tensor q = random_orthogonal(10, 10);
  EXPECT_NEAR(cknna(a, rotate(a, q), 10), cknna(a, a, 10), 1e-8);
  Tensor b = gaussian(60, 10, 11);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.6 * a[i] + 0.8 * b[i];
  EXPECT_NEAR(cknna(a, b, 7), cknna(b, a, 7), 1e-12);
}

TEST(Cknna, MatchesLoopOracle) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Tensor a = gaussian(35, 6, 20 + s);
    Tensor b = gaussian(35, 4, 40 + s);
    for (int i = 0; i < 35; ++i) b.at(i, 0) += 2.0 * a.at(i, 0);
    EXPECT_NEAR(cknna(a, b, 5), cknna_oracle(a, b, 5), 1e-10);
    EXPECT_GE(cknna(a, b, 5), 0.0);
    EXPECT_LE(cknna(a, b, 5), 1.0);
  }
}

TEST(Cknna, IndependentRandomIsNearZero) {
  for (std::uint64_t s = 0; s < 5; ++s) EXPECT_LT(cknna(gaussian(500, 16, 100 + s), gaussian(500, 16, 200 + s), 10), 0.1);
}

TEST(Cknna, KOutOfRangeThrows) {
  const Tensor a = gaussian(10, 3, 1);
  EXPECT_THROW(cknna(a, a, 0), ArgumentError);
  EXPECT_THROW(cknna(a, a, 10), ArgumentError);
  EXPECT_THROW(cknna(a, gaussian(9, 3, 2), 3), ArgumentError);
}

TEST(FrequencySaliency, LinearModelMatchesAnalyticDft) {
  const Tensor w = dra::testing::random_tensor({8, 8}, 3);
  const LinearImageModel m(w);
  const Tensor x = dra::testing::random_tensor({6, 1, 8, 8}, 4, 0.0, 1.0);
  const std::vector<int> y{0, 1, 0, 1, 1, 0};
  const Tensor map = frequency_saliency(m, x, y);
  EXPECT_GT(cosine(map, naive_centered_dft(w)), 0.999);
  for (double v : map.values()) EXPECT_GE(v, 0.0);
  // Real inputs: |F(u, v)| = |F(-u, -v)| in centered coordinates.
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b) EXPECT_NEAR(map.at(a, b), map.at((8 - a) % 8, (8 - b) % 8), 1e-12);
}

TEST(FrequencySaliency, ConstantGradientIsDcDelta) {
  const LinearImageModel m(Tensor({6, 6}, 0.3));
  const Tensor x = dra::testing::random_tensor({3, 1, 6, 6}, 5, 0.0, 1.0);
  const std::vector<int> y{0, 1, 1};
  const Tensor map = frequency_saliency(m, x, y);
  for (int a = 0; a < 6; ++a)
    for (int b = 0; b < 6; ++b) {
      if (a == 3 && b == 3) {
        EXPECT_GT(map.at(a, b), 0.0);
      } else {
        EXPECT_NEAR(map.at(a, b), 0.0, 1e-12);
      }
    }
}

TEST(FrequencySaliency, SelfDifferenceIsZeroAndDifferenceSign) {
  EncoderConfig cfg;
  cfg.width = 4;
  cfg.feature_dim = 8;
  const RobustClassifier m(cfg, 3);
  const Tensor x = dra::testing::random_tensor({4, 1, 16, 16}, 6, 0.0, 1.0);
  const std::vector<int> y{0, 1, 0, 1};
  const Tensor diff = frequency_difference(m, m, x, y);
  for (double v : diff.values()) EXPECT_EQ(v, 0.0);
  const LinearImageModel big(Tensor({16, 16}, 2.0)), small(Tensor({16, 16}, 1.0));
  EXPECT_GT(frequency_difference(big, small, x, y).at(8, 8), 0.0);
}

TEST(FrequencySaliency, CenteredDftAgreesWithNaiveSum) {
  const Tensor img = dra::testing::random_tensor({5, 7}, 8);
  EXPECT_LT(max_abs_diff(centered_dft_magnitude(img), naive_centered_dft(img)), 1e-10);
}

TEST(PcaTest, FullBasisReconstructsAndSpectrumDescends) {
  const Tensor f = gaussian(50, 6, 12);
  const Pca p = fit_pca(f);
  EXPECT_EQ(p.rank, 6);
  EXPECT_LT(max_abs_diff(p.project(f, 6), f), 1e-12);
  for (std::size_t i = 1; i < p.eigenvalues.size(); ++i) EXPECT_GE(p.eigenvalues[i - 1], p.eigenvalues[i]);
  // K = 0 collapses to the mean.
  const Tensor z = p.project(f, 0);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(z.at(i, j), p.mean[j]);
  EXPECT_THROW(p.project(f, 7), ArgumentError);
}

TEST(ClsDim, FullDimensionAndMajorityBaseline) {
  const int n = 200, d = 10;
  const Tensor clean = gaussian(n, d, 13);
  Tensor adv = clean;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += 0.3 * gaussian(n, d, 14)[i];
  const Linear head = random_head(d, 3, 15);
  const LinearProbe probe{head.weight.value, head.bias.value};
  const auto pred = argmax_rows(probe.logits(clean));
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % 5 == 0 ? (pred[i] + 1) % 3 : pred[i];
  const auto r = classification_dimension(clean, adv, labels, head);
  ASSERT_EQ(r.accuracy_curve.size(), static_cast<std::size_t>(d + 1));
  EXPECT_NEAR(r.accuracy_curve[d], probe.accuracy(clean, labels), 1e-12);
  EXPECT_NEAR(r.robust_curve[d], probe.accuracy(adv, labels), 1e-12);
  std::vector<int> counts(3, 0);
  for (int y : labels) counts[y]++;
  EXPECT_EQ(r.accuracy_curve[0], static_cast<double>(*std::max_element(counts.begin(), counts.end())) / n);
  EXPECT_LE(r.cls95, r.cls99);
  EXPECT_GE(r.cls95, 1);
  EXPECT_LE(r.cls99, d);
  EXPECT_EQ(r.robust_dim, argmax_dimension(r.robust_curve));
  EXPECT_EQ(r.to_json().at("robust_dim_tie_break"), "smallest K attaining the maximum");
}

TEST(ClsDim, ThresholdAndTieBreakRules) {
  const std::vector<double> curve{0.5, 0.6, 0.95, 0.99, 0.99, 1.0};
  EXPECT_EQ(threshold_dimension(curve, 1.0, 0.95), 2);
  EXPECT_EQ(threshold_dimension(curve, 1.0, 0.99), 3);
  EXPECT_EQ(argmax_dimension({0.9, 0.4, 0.7, 0.7, 0.6}), 2);
  EXPECT_THROW(threshold_dimension({1.0}, 1.0, 0.95), ArgumentError);
}

TEST(ClsDim, RankDeficientFeaturesAreNoted) {
  Tensor f = gaussian(40, 5, 16);
  for (int i = 0; i < 40; ++i) f.at(i, 4) = f.at(i, 0) + f.at(i, 1);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 2;
  const auto r = classification_dimension(f, f, labels, random_head(5, 2, 17));
  EXPECT_EQ(r.covariance_rank, 4);
  EXPECT_FALSE(r.notes.empty());
}

TEST(ClsDim, ModelVariantRuns) {
  EncoderConfig cfg;
  cfg.width = 4;
  cfg.feature_dim = 6;
  const RobustClassifier m(cfg, 9);
  const Tensor x = dra::testing::random_tensor({30, 1, 16, 16}, 18, 0.0, 1.0);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) y[i] = i % 2;
  attacks::AttackConfig a;
  a.steps = 2;
  const auto r = classification_dimension(m, x, y, a);
  EXPECT_NEAR(r.accuracy_curve[6], accuracy(predict_logits(m, x), y), 1e-12);
}

TEST(Sae, MeanPredictorIsExactlyOne) {
  const Tensor x = gaussian(64, 8, 19);
  EXPECT_EQ(normalized_sae_loss(mean_sae(x, 16, 4), x), 1.0);
  EXPECT_THROW(normalized_sae_loss(mean_sae(Tensor({5, 3}, 2.0), 4, 2), Tensor({5, 3}, 2.0)), ArgumentError);
  EXPECT_THROW(mean_sae(x, 4, 5), ArgumentError);
  EXPECT_THROW(train_topk_sae(x, 4, 5), ArgumentError);
}

TEST(Sae, PerfectReconstructionIsZero) {
  const Tensor x = gaussian(20, 3, 20);
  SparseAutoencoder s = mean_sae(x, 6, 6);
  s.b_pre.fill(0.0);
  for (int j = 0; j < 3; ++j) {
    s.w_enc.at(j, j) = 1.0, s.w_enc.at(j, j + 3) = -1.0;
    s.w_dec.at(j, j) = 1.0, s.w_dec.at(j + 3, j) = -1.0;
  }
  // Codes +x and -x; keeping all six reconstructs x twice over, so halve the decoder.
  for (auto& v : s.w_dec.values()) v *= 0.5;
  EXPECT_NEAR(normalized_sae_loss(s, x), 0.0, 1e-24);
}

TEST(Sae, HandGradientsMatchFiniteDifferences) {
  const Tensor x = gaussian(12, 5, 21);
  SparseAutoencoder s = mean_sae(x, 9, 3);
  s.w_enc = gaussian(5, 9, 22);
  s.b_enc = dra::testing::random_tensor({9}, 23);
  s.w_dec = gaussian(9, 5, 24);
  s.b_pre = dra::testing::random_tensor({5}, 25);
  std::vector<Tensor> grads;
  sae_loss_gradients(s, x, grads);
  Tensor* fields[] = {&s.w_enc, &s.b_enc, &s.w_dec, &s.b_pre};
  const double h = 1e-6;
  double worst = 0.0;
  for (int f = 0; f < 4; ++f)
    for (std::size_t i = 0; i < fields[f]->size(); ++i) {
      double& p = (*fields[f])[i];
      const double orig = p;
      std::vector<Tensor> scratch;
      p = orig + h;
      const double up = sae_loss_gradients(s, x, scratch);
      p = orig - h;
      const double down = sae_loss_gradients(s, x, scratch);
      p = orig;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(num - grads[f][i]) / std::max({std::abs(num), std::abs(grads[f][i]), 1e-6}));
    }
  EXPECT_LT(worst, 1e-4);
}

TEST(Sae, PlantedSubspaceIsRecovered) {
  const int k = 8, d = 32, n = 1000;
  Rng rng(0);
  const Tensor basis = normal_tensor({k, d}, rng);
  const Tensor codes = normal_tensor({n, k}, rng);
  Tensor x({n, d});
  x.matrix() = codes.matrix() * basis.matrix();
  const Eigen::RowVectorXd mu = x.matrix().colwise().mean();
  x.matrix().rowwise() -= mu;
  const auto s = train_topk_sae(x, 64, k);
  EXPECT_LT(normalized_sae_loss(s, x), 0.05);
  for (int i = 0; i < s.m(); ++i) EXPECT_NEAR(s.w_dec.matrix().row(i).norm(), 1.0, 1e-12);
}

TEST(Sae, NoBottleneckAutoencodes) {
  const Tensor x = gaussian(1000, 16, 26);
  const auto s = train_topk_sae(x, 16, 16);
  EXPECT_LT(normalized_sae_loss(s, x), 0.05);
}

TEST(Sae, LossDecreasesWithK) {
  const Tensor x = gaussian(1000, 32, 27);
  std::vector<double> loss;
  for (int k : {8, 16, 32}) loss.push_back(normalized_sae_loss(train_topk_sae(x, 256, k), x));
  EXPECT_GE(loss[0], loss[1]);
  EXPECT_GE(loss[1], loss[2]);
  EXPECT_LT(loss[0], 1.0);
}

TEST(Sae, TrainingIsSeeded) {
  const Tensor x = gaussian(100, 6, 28);
  SaeConfig c;
  c.epochs = 3;
  c.seed = 4;
  const auto a = train_topk_sae(x, 12, 3, c), b = train_topk_sae(x, 12, 3, c);
  EXPECT_TRUE(a.w_dec.identical(b.w_dec));
  EXPECT_TRUE(a.w_enc.identical(b.w_enc));
}

TEST(RepresentationBatchTest, ArchiveRoundTrip) {
  RepresentationBatch b;
  b.features = gaussian(4, 3, 29);
  b.meta.model_id = "abc";
  b.meta.layer = "penultimate";
  b.meta.adversarial_epsilon = 8.0 / 255.0;
  const auto back = RepresentationBatch::from_archive(b.to_archive(), "mem");
  EXPECT_TRUE(back.features.identical(b.features));
  EXPECT_EQ(back.meta.to_json(), b.meta.to_json());
  b.features[0] = std::nan("");
  EXPECT_THROW(b.validate(), ArgumentError);
}
