#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "dra/errors.hpp"
#include "dra/probe.hpp"
#include "dra/robust_train.hpp"
#include "test_util.hpp"

using namespace dra;
using namespace dra::robust;

namespace {

data::DatasetOptions data_opts() {
  data::DatasetOptions o;
  o.cache_dir = std::filesystem::temp_directory_path() / "dra_test_robust_cache";
  return o;
}

const data::LabeledImageBatch& toy_train() {
  static const auto d = data::load_dataset("toy-2class", data::Split::kTrain, 2, data_opts()).examples;
  return d;
}

const data::LabeledImageBatch& toy_test() {
  static const auto d = data::load_dataset("toy-2class", data::Split::kTest, 2, data_opts()).examples;
  return d;
}

data::LabeledImageBatch head(const data::LabeledImageBatch& b, int n, int offset = 0) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), offset);
  return b.select(idx);
}

const diffusion::DiffusionModel& untrained_dm() {
  static const diffusion::DiffusionModel m(diffusion::UNetConfig{}, {}, 4);
  return m;
}

TrainRecipe tiny_recipe() {
  TrainRecipe r;
  r.encoder.width = 4;
  r.encoder.feature_dim = 8;
  r.batch_size = 16;
  r.epochs = 3.0;
  r.pgd_steps = 2;
  r.seed = 7;
  return r;
}

double hand_trades(double c0, double c1, double a0, double a1, int label, double beta) {
  const double zc = std::exp(c0) + std::exp(c1), za = std::exp(a0) + std::exp(a1);
  const double p[2] = {std::exp(c0) / zc, std::exp(c1) / zc};
  const double q[2] = {std::exp(a0) / za, std::exp(a1) / za};
  const double ce = -std::log(p[label]);
  const double kl = p[0] * std::log(p[0] / q[0]) + p[1] * std::log(p[1] / q[1]);
  return ce + beta * kl;
}

}  // namespace

TEST(TradesLoss, HandComputedPair) {
  Tape tape(false);
  const std::vector<int> y{0};
  Var clean = tape.constant(Tensor({1, 2}, {2.0, 0.0}));
  Var adv = tape.constant(Tensor({1, 2}, {0.0, 2.0}));
  EXPECT_NEAR(trades_loss(clean, adv, y, 5.0).value()[0], hand_trades(2, 0, 0, 2, 0, 5.0), 1e-10);
}

TEST(TradesLoss, IdentitiesAndNonNegativity) {
  const Tensor a = dra::testing::random_tensor({6, 3}, 1, -3.0, 3.0);
  const Tensor b = dra::testing::random_tensor({6, 3}, 2, -3.0, 3.0);
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  Tape tape(false);
  Var va = tape.constant(a), vb = tape.constant(b);
  const double ce = mean(cross_entropy_rows(va, y)).value()[0];
  EXPECT_NEAR(trades_loss(va, va, y, 5.0).value()[0], ce, 1e-15);
  EXPECT_EQ(trades_loss(va, vb, y, 0.0).value()[0], ce);
  EXPECT_GE(trades_loss(va, vb, y, 5.0).value()[0], ce);
  EXPECT_GE(trades_loss(va, vb, y, 5.0).value()[0], 0.0);
  Tensor bad = a;
  bad[0] = std::nan("");
  EXPECT_THROW(trades_loss(va, tape.constant(bad), y, 1.0), NumericError);
}

TEST(TradesLoss, ModelVariantMatchesLogitVariant) {
  EncoderConfig cfg;
  cfg.width = 4;
  cfg.feature_dim = 8;
  const RobustClassifier m(cfg, 3);
  const Tensor x = dra::testing::random_tensor({3, 1, 16, 16}, 4, 0.0, 1.0);
  const Tensor xa = attacks::project_linf(dra::testing::random_tensor({3, 1, 16, 16}, 5, 0.0, 1.0), x, 8.0 / 255.0);
  const std::vector<int> y{0, 1, 0};
  Tape tape(false);
  Var vx = tape.constant(x), va = tape.constant(xa);
  EXPECT_EQ(trades_loss(tape, m, vx, vx, y, 5.0).value()[0], mean(cross_entropy_rows(m.logits(tape, vx, 0), y)).value()[0]);
  EXPECT_EQ(trades_loss(tape, m, vx, va, y, 5.0).value()[0],
            trades_loss(m.logits(tape, vx, 0), m.logits(tape, va, 0), y, 5.0).value()[0]);
}

TEST(DraLoss, ParallelOrthogonalAntiparallel) {
  Rng rng(5);
  const ProjectionHead h(4, 3, rng);
  const Tensor feats = dra::testing::random_tensor({5, 4}, 6);
  Tensor z;
  {
    Tape tape(false);
    z = h(tape, tape.constant(feats)).value();
  }
  Tape tape(false);
  Var f = tape.constant(feats);
  EXPECT_NEAR(dra_loss(tape, h, f, z).value()[0], -1.0, 1e-12);
  Tensor neg = z;
  for (auto& v : neg.values()) v = -v;
  EXPECT_NEAR(dra_loss(tape, h, f, neg).value()[0], 1.0, 1e-12);
  // Gram-Schmidt against each projected row.
  Tensor orth({5, 3});
  for (int i = 0; i < 5; ++i) {
    double e[3] = {1.0, 0.0, 0.0};
    if (std::abs(z.at(i, 0)) > 0.9 * std::sqrt(z.at(i, 0) * z.at(i, 0) + z.at(i, 1) * z.at(i, 1) + z.at(i, 2) * z.at(i, 2)))
      e[0] = 0.0, e[1] = 1.0;
    double dot = 0.0, nn = 0.0;
    for (int j = 0; j < 3; ++j) dot += e[j] * z.at(i, j), nn += z.at(i, j) * z.at(i, j);
    for (int j = 0; j < 3; ++j) orth.at(i, j) = e[j] - dot / nn * z.at(i, j);
  }
  EXPECT_NEAR(dra_loss(tape, h, f, orth).value()[0], 0.0, 1e-12);
  EXPECT_EQ(dra_loss(tape, h, f, Tensor({5, 3})).value()[0], 0.0);
  EXPECT_THROW(dra_loss(tape, h, f, Tensor({5, 4})), ArgumentError);
}

TEST(DraLoss, BoundedForRandomInputs) {
  Rng rng(8);
  const ProjectionHead h(6, 5, rng);
  for (std::uint64_t s = 0; s < 50; ++s) {
    Tape tape(false);
    const double v = dra_loss(tape, h, tape.constant(dra::testing::random_tensor({4, 6}, s, -5, 5)),
                              dra::testing::random_tensor({4, 5}, s + 100, -5, 5))
                         .value()[0];
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(TotalObjective, Arithmetic) {
  EXPECT_DOUBLE_EQ(total_objective(2.0, -0.5, 1.2), 1.4);
  EXPECT_EQ(total_objective(2.0, -0.5, 0.0), 2.0);
  EXPECT_EQ(TrainRecipe{}.lambda, 1.2);
  Tape tape(false);
  EXPECT_DOUBLE_EQ(total_objective(tape.constant(Tensor({1}, {2.0})), tape.constant(Tensor({1}, {-0.5})), 1.2).value()[0], 1.4);
}

TEST(TotalObjective, GradientMatchesFiniteDifferencesIncludingHead) {
  EncoderConfig cfg;
  cfg.width = 2;
  cfg.feature_dim = 3;
  cfg.image_size = 8;
  RobustClassifier m(cfg, 11);
  m.attach_projection(4, 11);
  const Tensor x = dra::testing::random_tensor({2, 1, 8, 8}, 12, 0.0, 1.0);
  const Tensor xa = dra::testing::random_tensor({2, 1, 8, 8}, 13, 0.0, 1.0);
  const Tensor target = dra::testing::random_tensor({2, 4}, 14);
  const std::vector<int> y{0, 1};
  ParamRefs params = m.parameters();
  m.projection().collect(params);
  auto loss = [&](Tape& tape) {
    Var h_adv = m.features(tape, tape.constant(xa));
    Var at = trades_loss(m.logits(tape, tape.constant(x), 0), m.head()(tape, h_adv), y, 5.0);
    return total_objective(at, dra_loss(tape, m.projection(), h_adv, target), 1.2);
  };
  EXPECT_LT(dra::testing::max_param_grad_rel_error(loss, params), 1e-4);
}

TEST(TotalObjective, InputGradientsOfTradesAndDra) {
  Rng rng(2);
  const ProjectionHead h(3, 2, rng);
  const Tensor target = dra::testing::random_tensor({4, 2}, 3);
  const std::vector<int> y{0, 1, 1, 0};
  auto f = [&](Tape& tape, const std::vector<Var>& v) {
    return total_objective(trades_loss(v[0], v[1], y, 5.0), dra_loss(tape, h, v[2], target), 0.7);
  };
  EXPECT_LT(dra::testing::max_grad_rel_error(f, {dra::testing::random_tensor({4, 2}, 4, -2, 2),
                                                 dra::testing::random_tensor({4, 2}, 5, -2, 2),
                                                 dra::testing::random_tensor({4, 3}, 6)}),
            1e-4);
}

TEST(EmaUpdate, ArithmeticAndGeometricSeries) {
  std::vector<Tensor> shadow{Tensor({2}, 0.0)};
  const std::vector<Tensor> live{Tensor({2}, 1.0)};
  ema_update(shadow, live, 0.995);
  // 1 - 0.995 is not exactly representable; it equals 0.005 to rounding.
  EXPECT_EQ(shadow[0][0], 1.0 - 0.995);
  EXPECT_NEAR(shadow[0][0], 0.005, 1e-15);
  auto frozen = shadow;
  ema_update(frozen, live, 1.0);
  EXPECT_TRUE(frozen[0].identical(shadow[0]));

  std::vector<Tensor> s{Tensor({1}, 0.0)};
  for (int n = 1; n <= 500; ++n) {
    ema_update(s, {Tensor({1}, 1.0)}, 0.995);
    EXPECT_NEAR(s[0][0], 1.0 - std::pow(0.995, n), 1e-12) << n;
  }
  EXPECT_THROW(ema_update(s, {Tensor({2}, 1.0)}, 0.9), ArgumentError);
  EXPECT_THROW(ema_update(s, {}, 0.9), ArgumentError);
}

TEST(EmaUpdate, MatchesIndependentFoldOverArbitrarySequence) {
  const double tau = 0.9;
  std::vector<Tensor> seq;
  for (std::uint64_t i = 0; i < 30; ++i) seq.push_back(dra::testing::random_tensor({5}, i));
  std::vector<Tensor> shadow{Tensor({5}, 0.25)};
  for (const auto& t : seq) ema_update(shadow, {t}, tau);
  // Closed form: tau^n * s0 + sum_k (1 - tau) tau^(n-1-k) x_k.
  const int n = static_cast<int>(seq.size());
  for (int j = 0; j < 5; ++j) {
    double expect = std::pow(tau, n) * 0.25;
    for (int k = 0; k < n; ++k) expect += (1.0 - tau) * std::pow(tau, n - 1 - k) * seq[k][j];
    EXPECT_NEAR(shadow[0][j], expect, 1e-12);
  }
}

TEST(TrainRecipeTest, ValidationAndJson) {
  TrainRecipe r;
  EXPECT_NO_THROW(r.validate());
  r.lambda = -0.1;
  EXPECT_THROW(r.validate(), ConfigError);
  r = {};
  r.ema_tau = 1.5;
  EXPECT_THROW(r.validate(), ConfigError);
  r = tiny_recipe();
  EXPECT_EQ(TrainRecipe::from_json(r.to_json()).to_json(), r.to_json());
  EXPECT_EQ(r.total_steps(64), 12);
  auto j = r.to_json();
  j["optimizer"]["kind"] = "lion";
  EXPECT_THROW(TrainRecipe::from_json(j), ConfigError);
}

TEST(TrainRobust, SeedDeterministicAndCarriesRecipe) {
  const auto real = head(toy_train(), 64);
  const DiffusionTarget target(untrained_dm(), 0.1, true);
  TrainInputs in{&real, nullptr, &target};
  TrainLog la, lb;
  const auto a = train_robust(tiny_recipe(), in, true, false, &la);
  const auto b = train_robust(tiny_recipe(), in, true, false, &lb);
  EXPECT_EQ(a.checkpoint_id(), b.checkpoint_id());
  EXPECT_EQ(la.total, lb.total);
  EXPECT_EQ(a.recipe.to_json(), tiny_recipe().to_json());
}

TEST(TrainRobust, LambdaZeroReproducesBaselineTrace) {
  const auto real = head(toy_train(), 64);
  const DiffusionTarget target(untrained_dm(), 0.1, true);
  TrainInputs with{&real, nullptr, &target};
  TrainInputs without{&real, nullptr, nullptr};
  TrainRecipe r = tiny_recipe();
  r.lambda = 0.0;
  TrainLog dra0, base, base_other_lambda;
  const auto c0 = train_robust(r, with, true, false, &dra0);
  const auto cb = train_robust(r, without, false, false, &base);
  EXPECT_EQ(dra0.at_loss, base.at_loss);
  EXPECT_EQ(dra0.total, base.total);
  for (std::size_t i = 0; i < c0.model.parameters().size(); ++i)
    EXPECT_TRUE(c0.model.parameters()[i]->value.identical(cb.model.parameters()[i]->value));
  // With DRA off the lambda field is ignored.
  r.lambda = 3.0;
  train_robust(r, without, false, false, &base_other_lambda);
  EXPECT_EQ(base_other_lambda.total, base.total);
}

TEST(TrainRobust, ProjectionHeadNeverAffectsLogits) {
  const auto real = head(toy_train(), 64);
  const DiffusionTarget target(untrained_dm(), 0.1, true);
  auto ck = train_robust(tiny_recipe(), {&real, nullptr, &target}, true, false);
  ASSERT_TRUE(ck.model.has_projection());
  const Tensor x = head(toy_test(), 8).images;
  const Tensor with = predict_logits(ck.model, x);
  RobustClassifier stripped = ck.model;
  stripped.drop_projection();
  EXPECT_TRUE(predict_logits(stripped, x).identical(with));
  for (Parameter* p : [&] {
         ParamRefs pr;
         ck.model.projection().collect(pr);
         return pr;
       }())
    for (auto& v : p->value.values()) v += 1.0;
  EXPECT_TRUE(predict_logits(ck.model, x).identical(with));
  EXPECT_FALSE(ck.evaluated_model(false).has_projection());
}

TEST(TrainRobust, CheckpointRoundTripAndEma) {
  const auto real = head(toy_train(), 64);
  const auto ck = train_robust(tiny_recipe(), {&real, nullptr, nullptr}, false, false);
  const auto dir = dra::testing::scratch_dir("robust_ckpt");
  ck.save(dir / "c.dra");
  const auto back = RobustCheckpoint::load(dir / "c.dra");
  EXPECT_EQ(back.checkpoint_id(), ck.checkpoint_id());
  EXPECT_EQ(back.recipe.to_json(), ck.recipe.to_json());
  EXPECT_EQ(back.steps, 12);
  const Tensor x = head(toy_test(), 4).images;
  EXPECT_TRUE(predict_logits(back.evaluated_model(true), x).identical(predict_logits(ck.evaluated_model(true), x)));
  EXPECT_FALSE(predict_logits(ck.evaluated_model(true), x).identical(predict_logits(ck.evaluated_model(false), x)));
  std::ofstream(dir / "bad.dra") << "garbage";
  EXPECT_THROW(RobustCheckpoint::load(dir / "bad.dra"), IngestionError);
}

TEST(TrainRobust, ConfigurationErrors) {
  const auto real = head(toy_train(), 32);
  EXPECT_THROW(train_robust(tiny_recipe(), {&real, nullptr, nullptr}, true, false), ConfigError);
  EXPECT_THROW(train_robust(tiny_recipe(), {&real, nullptr, nullptr}, false, true), ConfigError);
  EXPECT_THROW(train_robust(tiny_recipe(), {nullptr, nullptr, nullptr}, false, false), ConfigError);
}

TEST(TrainRobust, SyntheticMixAndDivergence) {
  const auto real = head(toy_train(), 64);
  auto synth = head(toy_train(), 64, 64);
  synth.sources.assign(64, data::Source::kSynthetic);
  TrainRecipe r = tiny_recipe();
  r.epochs = 0.5;
  const auto ck = train_robust(r, {&real, &synth, nullptr}, false, true);
  EXPECT_TRUE(ck.use_synth);
  EXPECT_NE(ck.data_fingerprint.find('+'), std::string::npos);
  r.learning_rate = 1e300;
  r.epochs = 3.0;
  try {
    train_robust(r, {&real, nullptr, nullptr}, false, false);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(NoisyPretrain, ZeroSigmaIsPlainSupervisedTraining) {
  const auto train = head(toy_train(), 96);
  diffusion::NoiseSchedule sched;
  PretrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.fixed_sigma = 0.0;
  const NoisyEncoder enc = noisy_discriminative_pretrain(diffusion::UNetConfig{}, train, sched, cfg);

  // Reference loop on clean inputs with no noise tensor at all.
  diffusion::UNetConfig arch;
  Rng init(stream_seed(cfg.seed, Stream::kInit));
  diffusion::UNetEncoder e("nd.", arch, false, init);
  Linear lin("nd.head", arch.bottleneck_channels, 2, init);
  ParamRefs params;
  e.collect(params);
  lin.collect(params);
  Adam opt;
  data::ExampleStream stream(train, stream_seed(cfg.seed, Stream::kShuffle));
  for (long step = 0; step < cfg.steps; ++step) {
    const auto b = stream.take(cfg.batch_size);
    const std::vector<double> sig(b.size(), sched.sigma_min);
    Tape tape;
    Var f = spatial_mean(e(tape, tape.constant(b.images), sig, diffusion::Condition::unconditional()).bottleneck);
    Var loss = mean(cross_entropy_rows(lin(tape, f), b.labels));
    tape.backward(loss);
    opt.step(params, gradients(tape, params), cosine_lr(cfg.learning_rate, step, cfg.steps));
  }
  NoisyEncoder& got = const_cast<NoisyEncoder&>(enc);
  const ParamRefs trained = got.parameters();
  ASSERT_EQ(trained.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_TRUE(trained[i]->value.identical(params[i]->value)) << params[i]->name;
}

TEST(NoisyPretrain, ArchiveRoundTripAndTargetShape) {
  const auto train = head(toy_train(), 32);
  PretrainConfig cfg;
  cfg.steps = 2;
  const auto enc = noisy_discriminative_pretrain(diffusion::UNetConfig{}, train, {}, cfg);
  const auto back = NoisyEncoder::from_archive(enc.to_archive(), "mem");
  const NoisyDiscriminativeTarget t1(enc, 0.1), t2(back, 0.1);
  const auto x = head(toy_test(), 5);
  const Tensor a = t1.targets(x.images, x.labels, 9);
  EXPECT_EQ(a.shape(), (Shape{5, t1.dim()}));
  EXPECT_TRUE(a.identical(t2.targets(x.images, x.labels, 9)));
  EXPECT_EQ(t1.id(), "noisy-discriminative");
}

TEST(NoisyPretrain, ProbeAccuracyComparableToDiffusionProbe) {
  const auto& train = toy_train();
  const auto& test = toy_test();
  diffusion::DiffusionTrainConfig dcfg;
  dcfg.steps = 2000;
  dcfg.seed = 3;
  const auto dm = diffusion::train_diffusion(train, dcfg);
  PretrainConfig pcfg;
  pcfg.seed = 3;
  const auto enc = noisy_discriminative_pretrain(dcfg.unet, train, dcfg.schedule, pcfg);

  const auto probe_train = head(train, 600);
  const double sigma = dcfg.schedule.eval_sigma;
  const DiffusionTarget dt(dm, sigma, false);
  const NoisyDiscriminativeTarget nt(enc, sigma);
  auto probe_acc = [&](const TargetProvider& t) {
    const auto p = train_linear_probe(t.targets(probe_train.images, probe_train.labels, 1), probe_train.labels, 2);
    return p.accuracy(t.targets(test.images, test.labels, 2), test.labels);
  };
  const double diff_acc = probe_acc(dt), nd_acc = probe_acc(nt);
  RecordProperty("diffusion_probe", std::to_string(diff_acc));
  RecordProperty("noisy_discriminative_probe", std::to_string(nd_acc));
  EXPECT_NEAR(nd_acc, diff_acc, 0.05);
}
