#include "dra/analysis.hpp"

#include <fftw3.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>

#include "dra/errors.hpp"
#include "dra/probe.hpp"

namespace dra::analysis {

nlohmann::json RepresentationMeta::to_json() const {
  nlohmann::json j = {{"model_id", model_id}, {"layer", layer}, {"split", split}};
  j["sigma"] = sigma ? nlohmann::json(*sigma) : nlohmann::json(nullptr);
  j["perturbation"] = adversarial_epsilon ? nlohmann::json{{"kind", "adversarial"}, {"epsilon", *adversarial_epsilon}}
                                          : nlohmann::json{{"kind", "clean"}};
  return j;
}

RepresentationMeta RepresentationMeta::from_json(const nlohmann::json& j) {
  RepresentationMeta m;
  m.model_id = j.value("model_id", "");
  m.layer = j.value("layer", "");
  m.split = j.value("split", "test");
  if (j.contains("sigma") && !j.at("sigma").is_null()) m.sigma = j.at("sigma").get<double>();
  if (j.contains("perturbation") && j.at("perturbation").value("kind", "clean") == "adversarial") {
    m.adversarial_epsilon = j.at("perturbation").at("epsilon").get<double>();
  }
  return m;
}

void RepresentationBatch::validate() const {
  if (features.rank() != 2) throw ArgumentError("representation batch must be a 2D array");
  if (!features.all_finite()) throw ArgumentError("representation batch has non-finite entries");
}

TensorArchive RepresentationBatch::to_archive() const {
  validate();
  TensorArchive ar;
  ar.put("features", features);
  ar.meta()["kind"] = "representation-batch";
  ar.meta()["representation"] = meta.to_json();
  return ar;
}

RepresentationBatch RepresentationBatch::from_archive(const TensorArchive& ar, const std::string& origin) {
  try {
    RepresentationBatch b;
    b.features = ar.get("features");
    b.meta = RepresentationMeta::from_json(ar.meta().at("representation"));
    b.validate();
    return b;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw ArgumentError("expected a 2D feature array");
  Tensor out = x;
  auto m = out.matrix();
  for (int i = 0; i < m.rows(); ++i) {
    const double nrm = m.row(i).norm();
    if (nrm > 0.0) m.row(i) /= nrm;
  }
  return out;
}

double alignment_metric(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ArgumentError("alignment_metric: batches must have matching shapes");
  if (a.dim(0) == 0) throw ArgumentError("alignment_metric: empty batch");
  const Tensor u = l2_normalize_rows(a), v = l2_normalize_rows(b);
  return (u.matrix() - v.matrix()).rowwise().squaredNorm().mean();
}

namespace {

RowMatrix squared_distances(const Tensor& unit) {
  const auto u = unit.matrix();
  const Eigen::VectorXd sq = u.rowwise().squaredNorm();
  RowMatrix g = u * u.transpose();
  RowMatrix d2 = (-2.0 * g).colwise() + sq;
  d2.rowwise() += sq.transpose();
  return d2.cwiseMax(0.0);
}

}  // namespace

double uniformity_metric(const Tensor& x, double t) {
  if (x.rank() != 2 || x.dim(0) < 2) throw ArgumentError("uniformity_metric needs at least two rows");
  if (!(t > 0.0)) throw ArgumentError("uniformity temperature must be positive");
  const RowMatrix d2 = squared_distances(l2_normalize_rows(x));
  const int n = x.dim(0);
  double lo = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) lo = std::min(lo, d2(i, j));
  // log-mean-exp shifted by the largest term exp(-t * lo).
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) acc += std::exp(-t * (d2(i, j) - lo));
  return -t * lo + std::log(acc / (static_cast<double>(n) * (n - 1)));
}

namespace {

RowMatrix centered_gram(const Tensor& x) {
  const Tensor u = l2_normalize_rows(x);
  RowMatrix k = u.matrix() * u.matrix().transpose();
  const Eigen::VectorXd row_mean = k.rowwise().mean();
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const double all = k.mean();
  k.colwise() -= row_mean;
  k.rowwise() -= col_mean;
  k.array() += all;
  return k;
}

// knn[i] = flags of the k most similar j != i (ties broken by lower index).
std::vector<std::vector<char>> knn_sets(const Tensor& x, int k) {
  const Tensor u = l2_normalize_rows(x);
  const RowMatrix sim = u.matrix() * u.matrix().transpose();
  const int n = x.dim(0);
  std::vector<std::vector<char>> flags(n, std::vector<char>(n, 0));
  std::vector<int> order;
  for (int i = 0; i < n; ++i) {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    order.erase(order.begin() + i);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      return sim(i, a) != sim(i, b) ? sim(i, a) > sim(i, b) : a < b;
    });
    for (int j = 0; j < k; ++j) flags[i][order[j]] = 1;
  }
  return flags;
}

}  // namespace

double cknna(const Tensor& a, const Tensor& b, int k) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) throw ArgumentError("cknna: batches must be row-aligned");
  const int n = a.dim(0);
  if (k < 1 || k >= n) throw ArgumentError("cknna: k must satisfy 1 <= k < n");
  const RowMatrix kc = centered_gram(a), lc = centered_gram(b);
  const auto na = knn_sets(a, k), nb = knn_sets(b, k);
  double kl = 0.0, kk = 0.0, ll = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if (na[i][j] && nb[i][j]) kl += kc(i, j) * lc(i, j);
      if (na[i][j]) kk += kc(i, j) * kc(i, j);
      if (nb[i][j]) ll += lc(i, j) * lc(i, j);
    }
  if (kk <= 0.0 || ll <= 0.0) return 0.0;
  return std::clamp(kl / std::sqrt(kk * ll), 0.0, 1.0);
}

Tensor centered_dft_magnitude(const Tensor& image) {
  if (image.rank() != 2) throw ArgumentError("centered_dft_magnitude expects an H x W array");
  const int h = image.dim(0), w = image.dim(1);
  std::vector<std::complex<double>> in(static_cast<std::size_t>(h) * w), out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = image[i];
  fftw_plan plan = fftw_plan_dft_2d(h, w, reinterpret_cast<fftw_complex*>(in.data()),
                                    reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  Tensor mag({h, w});
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) mag.at((u + h / 2) % h, (v + w / 2) % w) = std::abs(out[static_cast<std::size_t>(u) * w + v]);
  return mag;
}

Tensor frequency_saliency(const Classifier& model, const Tensor& images, std::span<const int> labels, std::uint64_t draw) {
  if (images.rank() != 4 || static_cast<int>(labels.size()) != images.dim(0)) throw ArgumentError("frequency_saliency: one label per image");
  Tape tape;
  Var x = tape.input(images);
  tape.backward(sum(cross_entropy_rows(model.logits(tape, x, draw), labels)));
  const Tensor g = tape.grad(x);
  if (!g.all_finite()) throw NumericError("non-finite input gradients in frequency_saliency");
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor map({h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n * c; ++i) {
    Tensor slice({h, w}, std::vector<double>(g.data() + i * plane, g.data() + (i + 1) * plane));
    const Tensor m = centered_dft_magnitude(slice);
    for (std::size_t j = 0; j < plane; ++j) map[j] += m[j] / (n * c);
  }
  return map;
}

Tensor frequency_difference(const Classifier& model_a, const Classifier& model_b, const Tensor& images,
                            std::span<const int> labels, std::uint64_t draw) {
  Tensor a = frequency_saliency(model_a, images, labels, draw);
  const Tensor b = frequency_saliency(model_b, images, labels, draw);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
  return a;
}

Tensor Pca::project(const Tensor& h, int k) const {
  const int d = mean.dim(0);
  if (h.rank() != 2 || h.dim(1) != d) throw ArgumentError("Pca::project: feature width mismatch");
  if (k < 0 || k > d) throw ArgumentError("Pca::project: k out of range");
  const Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), d);
  const auto v = components.matrix().topRows(k);
  RowMatrix centered = h.matrix().rowwise() - mu;
  RowMatrix out = (centered * v.transpose()) * v;
  out.rowwise() += mu;
  Tensor t(h.shape());
  t.matrix() = out;
  return t;
}

Pca fit_pca(const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) < 2) throw ArgumentError("fit_pca needs at least two rows");
  const int n = features.dim(0), d = features.dim(1);
  Pca p;
  p.mean = Tensor({d});
  Eigen::Map<Eigen::RowVectorXd> mu(p.mean.data(), d);
  mu = features.matrix().colwise().mean();
  const RowMatrix centered = features.matrix().rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
  p.components = Tensor({d, d});
  const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
  for (int i = 0; i < d; ++i) {
    const int src = d - 1 - i;  // ascending -> descending
    double ev = es.eigenvalues()(src);
    if (ev <= top * 1e-12) ev = 0.0;
    p.eigenvalues.push_back(ev);
    if (ev > 0.0) ++p.rank;
    for (int j = 0; j < d; ++j) p.components.at(i, j) = es.eigenvectors()(j, src);
  }
  return p;
}

nlohmann::json ClsDimReport::to_json() const {
  return {{"accuracy_curve", accuracy_curve}, {"robust_curve", robust_curve}, {"full_accuracy", full_accuracy},
          {"full_robust_accuracy", full_robust_accuracy}, {"cls95", cls95}, {"cls99", cls99}, {"robust_dim", robust_dim},
          {"robust_dim_tie_break", "smallest K attaining the maximum"}, {"covariance_rank", covariance_rank}, {"notes", notes}};
}

int threshold_dimension(const std::vector<double>& curve, double full, double threshold) {
  if (curve.size() < 2) throw ArgumentError("threshold_dimension needs K >= 1 entries");
  for (std::size_t k = 1; k < curve.size(); ++k)
    if (curve[k] >= threshold * full) return static_cast<int>(k);
  return static_cast<int>(curve.size()) - 1;
}

int argmax_dimension(const std::vector<double>& curve) {
  if (curve.size() < 2) throw ArgumentError("argmax_dimension needs K >= 1 entries");
  int best = 1;
  for (std::size_t k = 2; k < curve.size(); ++k)
    if (curve[k] > curve[best]) best = static_cast<int>(k);
  return best;
}

ClsDimReport classification_dimension(const Tensor& clean_features, const Tensor& adv_features,
                                      std::span<const int> labels, const Linear& head) {
  if (clean_features.shape() != adv_features.shape()) throw ArgumentError("clean and adversarial features must match in shape");
  if (static_cast<int>(labels.size()) != clean_features.dim(0)) throw ArgumentError("one label per feature row");
  const int d = clean_features.dim(1);
  const Pca pca = fit_pca(clean_features);
  LinearProbe probe{head.weight.value, head.bias.value};
  ClsDimReport r;
  r.covariance_rank = pca.rank;
  if (pca.rank < d) {
    r.notes.push_back("covariance rank " + std::to_string(pca.rank) + " < " + std::to_string(d) +
                      ": spectrum zero-padded beyond the rank");
  }
  if (clean_features.dim(0) <= d) r.notes.push_back("n <= d: covariance estimate is rank-limited");
  r.full_accuracy = probe.accuracy(clean_features, labels);
  r.full_robust_accuracy = probe.accuracy(adv_features, labels);
  // K = 0 keeps no feature information: the constant majority-class predictor.
  const int classes = head.weight.value.dim(1);
  std::vector<int> counts(classes, 0);
  for (int y : labels) counts.at(y)++;
  const double majority = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / labels.size();
  r.accuracy_curve.push_back(majority);
  r.robust_curve.push_back(majority);
  for (int k = 1; k <= d; ++k) {
    r.accuracy_curve.push_back(probe.accuracy(pca.project(clean_features, k), labels));
    r.robust_curve.push_back(probe.accuracy(pca.project(adv_features, k), labels));
  }
  r.cls95 = threshold_dimension(r.accuracy_curve, r.full_accuracy, 0.95);
  r.cls99 = threshold_dimension(r.accuracy_curve, r.full_accuracy, 0.99);
  r.robust_dim = argmax_dimension(r.robust_curve);
  return r;
}

ClsDimReport classification_dimension(const RobustClassifier& model, const Tensor& images, std::span<const int> labels,
                                      const attacks::AttackConfig& attack) {
  const Tensor adv = attacks::pgd_attack(model, images, labels, attack).adversarial;
  Tape tape(false);
  const Tensor clean_f = model.features(tape, tape.constant(images)).value();
  const Tensor adv_f = model.features(tape, tape.constant(adv)).value();
  return classification_dimension(clean_f, adv_f, labels, model.head());
}

void SparseAutoencoder::renormalize_decoder() {
  auto w = w_dec.matrix();
  for (int i = 0; i < w.rows(); ++i) {
    const double nrm = w.row(i).norm();
    if (nrm > 0.0) w.row(i) /= nrm;
  }
}

namespace {

// Pre-activations W_enc^T (x - b_pre) + b_enc with all but the k largest per
// row set to zero.
RowMatrix topk_codes(const SparseAutoencoder& sae, const Tensor& x) {
  const Eigen::Map<const Eigen::RowVectorXd> bp(sae.b_pre.data(), sae.d());
  const Eigen::Map<const Eigen::RowVectorXd> be(sae.b_enc.data(), sae.m());
  RowMatrix pre = ((x.matrix().rowwise() - bp) * sae.w_enc.matrix()).rowwise() + be;
  const int m = sae.m();
  std::vector<int> order(m);
  for (int i = 0; i < pre.rows(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + (sae.k - 1), order.end(), [&](int a, int b) {
      return pre(i, a) != pre(i, b) ? pre(i, a) > pre(i, b) : a < b;
    });
    std::vector<char> keep(m, 0);
    for (int j = 0; j < sae.k; ++j) keep[order[j]] = 1;
    for (int j = 0; j < m; ++j)
      if (!keep[j]) pre(i, j) = 0.0;
  }
  return pre;
}

void check_sae_inputs(const Tensor& x, int m, int k) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ArgumentError("SAE activations must be a nonempty 2D array");
  if (k < 1 || k > m) throw ArgumentError("SAE sparsity K must satisfy 1 <= K <= m");
}

}  // namespace

Tensor SparseAutoencoder::encode(const Tensor& x) const {
  Tensor z({x.dim(0), m()});
  z.matrix() = topk_codes(*this, x);
  return z;
}

Tensor SparseAutoencoder::reconstruct(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != d()) throw ArgumentError("SAE input width mismatch");
  const Eigen::Map<const Eigen::RowVectorXd> bp(b_pre.data(), d());
  Tensor out(x.shape());
  out.matrix() = (topk_codes(*this, x) * w_dec.matrix()).rowwise() + bp;
  return out;
}

SparseAutoencoder mean_sae(const Tensor& x, int m, int k) {
  check_sae_inputs(x, m, k);
  const int d = x.dim(1);
  SparseAutoencoder s;
  s.k = k;
  s.w_enc = Tensor({d, m});
  s.b_enc = Tensor({m});
  s.w_dec = Tensor({m, d});
  s.b_pre = Tensor({d});
  Eigen::Map<Eigen::RowVectorXd>(s.b_pre.data(), d) = x.matrix().colwise().mean();
  return s;
}

double normalized_sae_loss(const SparseAutoencoder& sae, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != sae.d()) throw ArgumentError("SAE input width mismatch");
  const Eigen::RowVectorXd mu = x.matrix().colwise().mean();
  const RowMatrix centered = x.matrix().rowwise() - mu;
  const double base = centered.squaredNorm();
  if (!(base > 0.0)) throw ArgumentError("normalized SAE loss undefined for zero-variance activations");
  const RowMatrix residual = x.matrix() - sae.reconstruct(x).matrix();
  return residual.squaredNorm() / base;
}

double sae_loss_gradients(const SparseAutoencoder& s, const Tensor& xb, std::vector<Tensor>& grads) {
  const int d = s.d(), m = s.m();
  const RowMatrix z = topk_codes(s, xb);
  const Eigen::Map<const Eigen::RowVectorXd> bp(s.b_pre.data(), d);
  const RowMatrix xc = xb.matrix().rowwise() - bp;
  const RowMatrix r = z * s.w_dec.matrix() - xc;  // reconstruction residual
  const double b = xb.dim(0);
  const RowMatrix dr = (2.0 / b) * r;
  RowMatrix dz = dr * s.w_dec.matrix().transpose();
  for (int i = 0; i < dz.rows(); ++i)
    for (int j = 0; j < m; ++j)
      if (z(i, j) == 0.0) dz(i, j) = 0.0;
  grads = {Tensor({d, m}), Tensor({m}), Tensor({m, d}), Tensor({d})};
  grads[0].matrix() = xc.transpose() * dz;
  Eigen::Map<Eigen::RowVectorXd>(grads[1].data(), m) = dz.colwise().sum();
  grads[2].matrix() = z.transpose() * dr;
  // b_pre enters both the reconstruction and the encoder input.
  Eigen::Map<Eigen::RowVectorXd>(grads[3].data(), d) =
      dr.colwise().sum() - (dz * s.w_enc.matrix().transpose()).colwise().sum();
  return r.squaredNorm() / b;
}

SparseAutoencoder train_topk_sae(const Tensor& x, int m, int k, const SaeConfig& config) {
  check_sae_inputs(x, m, k);
  if (m > config.max_latent) throw ArgumentError("SAE latent width exceeds the configured cap");
  if (config.epochs < 0 || config.batch_size <= 0) throw ConfigError("SAE training needs epochs >= 0 and batch_size > 0");
  const int n = x.dim(0), d = x.dim(1);
  Rng rng(stream_seed(config.seed, Stream::kSae));
  SparseAutoencoder s = mean_sae(x, m, k);
  s.w_dec = normal_tensor({m, d}, rng);
  s.renormalize_decoder();
  s.w_enc.matrix() = s.w_dec.matrix().transpose();

  Parameter p_enc{"w_enc", s.w_enc}, p_benc{"b_enc", s.b_enc}, p_dec{"w_dec", s.w_dec}, p_pre{"b_pre", s.b_pre};
  ParamRefs params{&p_enc, &p_benc, &p_dec, &p_pre};
  auto sync = [&] {
    s.w_enc = p_enc.value;
    s.b_enc = p_benc.value;
    s.w_dec = p_dec.value;
    s.b_pre = p_pre.value;
  };
  Adam opt;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int begin = 0; begin < n; begin += config.batch_size) {
      const int end = std::min(n, begin + config.batch_size);
      const Tensor xb = x.gather_rows(std::span<const int>(order).subspan(begin, end - begin));
      sync();
      std::vector<Tensor> grads;
      sae_loss_gradients(s, xb, grads);
      opt.step(params, grads, config.learning_rate);
      s.w_dec = p_dec.value;
      s.renormalize_decoder();
      p_dec.value = s.w_dec;
    }
  }
  sync();
  return s;
}

}  // namespace dra::analysis
