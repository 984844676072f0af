#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

#include "dra/diffusion.hpp"
#include "dra/errors.hpp"
#include "dra/probe.hpp"
#include "test_util.hpp"

using namespace dra;
using namespace dra::diffusion;

namespace {

// Returns a fixed tensor regardless of the input.
class ConstantPredictor : public NoisePredictor {
 public:
  explicit ConstantPredictor(Tensor out) : out_(std::move(out)) {}
  Var predict_noise(Tape& tape, Var, std::span<const double>, const Condition&) const override {
    return tape.constant(out_);
  }

 private:
  Tensor out_;
};

// Predicts zeros shaped like the input.
class ZeroPredictor : public NoisePredictor {
 public:
  Var predict_noise(Tape& tape, Var noisy, std::span<const double>, const Condition&) const override {
    return tape.constant(Tensor(noisy.shape()));
  }
};

// Two dense layers over flattened pixels.
class ToyDenoiser : public NoisePredictor {
 public:
  ToyDenoiser(int dim, int hidden, Rng& rng) : l1("toy.l1", dim, hidden, rng), l2("toy.l2", hidden, dim, rng) {}
  Var predict_noise(Tape& tape, Var noisy, std::span<const double> sigmas, const Condition&) const override {
    const Shape shape = noisy.shape();
    Var flat = reshape(noisy, {shape[0], static_cast<int>(shape_size(shape) / shape[0])});
    Var h = silu(l1(tape, scale(flat, 1.0 / (1.0 + sigmas[0]))));
    return reshape(l2(tape, h), shape);
  }
  ParamRefs params() {
    ParamRefs p;
    l1.collect(p);
    l2.collect(p);
    return p;
  }

  Linear l1, l2;
};

data::DatasetOptions data_opts() {
  data::DatasetOptions o;
  o.cache_dir = std::filesystem::temp_directory_path() / "dra_test_diffusion_cache";
  return o;
}

const data::LabeledImageBatch& toy_train() {
  static const auto d = data::load_dataset("toy-2class", data::Split::kTrain, 1, data_opts()).examples;
  return d;
}

const data::LabeledImageBatch& toy_test() {
  static const auto d = data::load_dataset("toy-2class", data::Split::kTest, 1, data_opts()).examples;
  return d;
}

data::LabeledImageBatch head(const data::LabeledImageBatch& b, int n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return b.select(idx);
}

// Trained once and shared by every test that needs a fitted denoiser.
const DiffusionModel& trained_model() {
  static const DiffusionModel m = [] {
    DiffusionTrainConfig cfg;
    cfg.steps = 2000;
    cfg.seed = 3;
    return train_diffusion(toy_train(), cfg);
  }();
  return m;
}

DiffusionModel small_untrained(std::uint64_t seed = 5) {
  UNetConfig cfg;
  return DiffusionModel(cfg, {}, seed);
}

std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return out;
}

}  // namespace

TEST(NoiseScheduleTest, Validation) {
  NoiseSchedule s;
  EXPECT_NO_THROW(s.validate());
  s.eval_sigma = 100.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.sigma_min = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.train_sampler = "uniform-t";
  EXPECT_THROW(s.validate(), ConfigError);
  const auto g = NoiseSchedule{}.sampling_grid(5);
  EXPECT_DOUBLE_EQ(g.front(), 80.0);
  EXPECT_NEAR(g.back(), 0.002, 1e-15);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
}

TEST(DenoiseLoss, PerfectDenoiserIsExactlyZero) {
  const Tensor x = dra::testing::random_tensor({3, 1, 4, 4}, 1, 0.0, 1.0);
  const Tensor noise = dra::testing::random_tensor({3, 1, 4, 4}, 2);
  ConstantPredictor oracle(noise);
  Tape tape(false);
  EXPECT_EQ(denoise_loss(tape, oracle, x, 0.3, noise, Condition::unconditional()).value()[0], 0.0);
}

TEST(DenoiseLoss, ZeroModelMatchesUnitMoment) {
  Rng rng(9);
  const Shape shape{64, 1, 16, 16};
  const Tensor x = uniform_tensor(shape, rng, 0.0, 1.0);
  const Tensor noise = normal_tensor(shape, rng);
  ConstantPredictor zero{Tensor(shape)};
  Tape tape(false);
  const double loss = denoise_loss(tape, zero, x, 0.5, noise, Condition::unconditional()).value()[0];
  // Var(eps^2) = 2 for a standard normal.
  const double stderr_mean = std::sqrt(2.0 / static_cast<double>(shape_size(shape)));
  EXPECT_NEAR(loss, 1.0, 3.0 * stderr_mean);
  EXPECT_GE(loss, 0.0);
}

TEST(DenoiseLoss, ParameterGradientMatchesFiniteDifferences) {
  Rng rng(4);
  ToyDenoiser toy(16, 6, rng);
  const Tensor x = dra::testing::random_tensor({3, 1, 4, 4}, 11, 0.0, 1.0);
  const Tensor noise = dra::testing::random_tensor({3, 1, 4, 4}, 12);
  auto loss = [&](Tape& tape) { return denoise_loss(tape, toy, x, 0.4, noise, Condition::unconditional()); };
  EXPECT_LT(dra::testing::max_param_grad_rel_error(loss, toy.params()), 1e-4);
}

TEST(DenoiseLoss, UNetParameterGradientMatchesFiniteDifferences) {
  UNetConfig cfg;
  cfg.image_size = 4;
  cfg.base_channels = 2;
  cfg.mid_channels = 2;
  cfg.bottleneck_channels = 3;
  DiffusionModel m(cfg, {}, 2);
  const Tensor x = dra::testing::random_tensor({2, 1, 4, 4}, 21, 0.0, 1.0);
  const Tensor noise = dra::testing::random_tensor({2, 1, 4, 4}, 22);
  const std::vector<double> sigmas{0.3, 2.0};
  auto loss = [&](Tape& tape) { return denoise_loss(tape, m, x, sigmas, noise, Condition::of({0, 1})); };
  EXPECT_LT(dra::testing::max_param_grad_rel_error(loss, m.parameters()), 1e-4);
}

TEST(DenoiseLoss, RejectsMismatchedNoiseAndNonFinite) {
  const Tensor x({2, 1, 4, 4}, 0.5);
  ConstantPredictor zero{Tensor({2, 1, 4, 4})};
  Tape tape(false);
  EXPECT_THROW(denoise_loss(tape, zero, x, 0.1, Tensor({2, 1, 4, 3}), Condition::unconditional()), ArgumentError);
  Tensor bad({2, 1, 4, 4});
  bad[3] = std::nan("");
  ConstantPredictor nan_model(bad);
  try {
    denoise_loss(tape, nan_model, x, 0.1, Tensor({2, 1, 4, 4}), Condition::unconditional());
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("noise-prediction"), std::string::npos);
  }
}

TEST(DiffusionModelTest, ForwardFiniteAcrossScheduleAndTapsRegistered) {
  const auto m = small_untrained();
  const auto& taps = m.tap_points();
  EXPECT_NE(std::find(taps.begin(), taps.end(), kBottleneckTap), taps.end());
  const Tensor x = dra::testing::random_tensor({2, 1, 16, 16}, 3, 0.0, 1.0);
  for (double s : {m.schedule().sigma_min, 0.1, 1.0, m.schedule().sigma_max}) {
    Tape tape(false);
    const std::vector<double> sig(2, s);
    EXPECT_TRUE(m.predict_noise(tape, tape.constant(x), sig, Condition::of({0, 1})).value().all_finite());
    for (const auto& t : taps) {
      const Tensor a = m.tap(tape, tape.constant(x), sig, Condition::unconditional(), t).value();
      EXPECT_EQ(a.dim(1), m.tap_width(t)) << t;
      EXPECT_TRUE(a.all_finite());
    }
  }
}

TEST(DiffusionModelTest, CheckpointRoundTrip) {
  const auto m = small_untrained(8);
  const auto dir = dra::testing::scratch_dir("dm_ckpt");
  m.save(dir / "m.dra");
  const auto back = DiffusionModel::load(dir / "m.dra");
  EXPECT_EQ(back.checkpoint_id(), m.checkpoint_id());
  const auto ar = TensorArchive::load(dir / "m.dra");
  EXPECT_EQ(ar.meta().at("tap_points").size(), m.tap_points().size());
  EXPECT_NE(small_untrained(9).checkpoint_id(), m.checkpoint_id());
}

TEST(TrainDiffusion, ZeroStepsEqualsInitialization) {
  DiffusionTrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 17;
  const auto m = train_diffusion(head(toy_train(), 64), cfg);
  EXPECT_EQ(m.checkpoint_id(), DiffusionModel(cfg.unet, cfg.schedule, 17).checkpoint_id());
}

TEST(TrainDiffusion, SeedDeterministic) {
  DiffusionTrainConfig cfg;
  cfg.steps = 15;
  cfg.seed = 2;
  const auto train = head(toy_train(), 128);
  std::vector<double> ta, tb;
  const auto a = train_diffusion(train, cfg, &ta);
  const auto b = train_diffusion(train, cfg, &tb);
  EXPECT_EQ(a.checkpoint_id(), b.checkpoint_id());
  EXPECT_EQ(ta, tb);
  cfg.seed = 3;
  EXPECT_NE(train_diffusion(train, cfg).checkpoint_id(), a.checkpoint_id());
}

TEST(TrainDiffusion, DivergenceReportsStep) {
  DiffusionTrainConfig cfg;
  cfg.steps = 30;
  cfg.learning_rate = 1e200;
  try {
    train_diffusion(head(toy_train(), 64), cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(TrainDiffusion, HeldOutLossBeatsZeroModel) {
  const auto& m = trained_model();
  const auto test = head(toy_test(), 400);
  const double zero_loss = heldout_denoise_loss(ZeroPredictor{}, m.schedule(), test, 5);
  EXPECT_NEAR(zero_loss, 1.0, 3.0 * std::sqrt(2.0 / static_cast<double>(test.images.size())));
  const double held = heldout_denoise_loss(m, m.schedule(), test, 5);
  EXPECT_LT(held, 0.9 * zero_loss);
}

TEST(SampleImages, DeterministicAndClamped) {
  const auto& m = trained_model();
  const Tensor a = sample_images(m, 4, 0, 42);
  const Tensor b = sample_images(m, 4, 0, 42);
  EXPECT_TRUE(a.identical(b));
  EXPECT_EQ(a.shape(), (Shape{4, 1, 16, 16}));
  for (double v : a.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_FALSE(sample_images(m, 4, 0, 43).identical(a));
  EXPECT_THROW(sample_images(m, 0, 0, 1), ArgumentError);
  EXPECT_THROW(sample_images(m, 2, 2, 1), ArgumentError);
}

TEST(SampleImages, GeneratedClassZeroIsRecognized) {
  const auto& m = trained_model();
  ExtractOptions opt;
  opt.noise = NoiseMode::seeded(7);
  const auto train = head(toy_train(), 600);
  const auto ftr = extract_representation(m, train.images, Condition::unconditional(), opt);
  const LinearProbe probe = train_linear_probe(ftr.features, train.labels, 2);
  const Tensor gen = sample_images(m, 100, 0, 5);
  opt.noise = NoiseMode::seeded(8);
  const auto fg = extract_representation(m, gen, Condition::unconditional(), opt);
  const std::vector<int> zeros(100, 0);
  EXPECT_GT(probe.accuracy(fg.features, zeros), 0.5);
}

TEST(ExtractRepresentation, SeededReplayIsBitIdentical) {
  const auto m = small_untrained();
  const Tensor x = dra::testing::random_tensor({5, 1, 16, 16}, 4, 0.0, 1.0);
  ExtractOptions opt;
  opt.noise = NoiseMode::seeded(123);
  const auto a = extract_representation(m, x, Condition::unconditional(), opt);
  const auto b = extract_representation(m, x, Condition::unconditional(), opt);
  EXPECT_TRUE(a.features.identical(b.features));
  EXPECT_EQ(a.features.shape(), (Shape{5, m.tap_width(kBottleneckTap)}));
  EXPECT_EQ(a.pooling, "spatial-mean");
  EXPECT_EQ(a.tap_point, kBottleneckTap);

  // Row noise depends on the global row index only.
  const auto tail = extract_representation(m, x.rows(0, 2), Condition::unconditional(), opt);
  EXPECT_TRUE(tail.features.identical(a.features.rows(0, 2)));

  Rng r1(1), r2(1);
  opt.noise = NoiseMode::fresh();
  const auto f1 = extract_representation(m, x, Condition::unconditional(), opt, &r1);
  const auto f2 = extract_representation(m, x, Condition::unconditional(), opt, &r2);
  EXPECT_TRUE(f1.features.identical(f2.features));
  EXPECT_FALSE(f1.features.identical(extract_representation(m, x, Condition::unconditional(), opt, &r1).features));
}

TEST(ExtractRepresentation, MatchesSpatialMeanOfTap) {
  const auto m = small_untrained();
  const Tensor x = dra::testing::random_tensor({3, 1, 16, 16}, 6, 0.0, 1.0);
  ExtractOptions opt;
  opt.sigma = 0.2;
  opt.tap_point = "down1";
  opt.noise = NoiseMode::seeded(9);
  const auto rep = extract_representation(m, x, Condition::of({0, 1, 0}), opt);
  Tensor noisy = extraction_noise(x.shape(), opt.noise, nullptr);
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] = x[i] + 0.2 * noisy[i];
  Tape tape(false);
  const std::vector<double> sig(3, 0.2);
  const Tensor act = m.tap(tape, tape.constant(noisy), sig, Condition::of({0, 1, 0}), "down1").value();
  const int c = act.dim(1), hw = act.dim(2) * act.dim(3);
  for (int i = 0; i < 3; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int p = 0; p < hw; ++p) s += act[(static_cast<std::size_t>(i) * c + ch) * hw + p];
      EXPECT_NEAR(rep.features.at(i, ch), s / hw, 1e-12);
    }
}

TEST(ExtractRepresentation, ErrorsAndExtraTimestep) {
  const auto m = small_untrained();
  const Tensor x = dra::testing::random_tensor({2, 1, 16, 16}, 6, 0.0, 1.0);
  ExtractOptions opt;
  opt.noise = NoiseMode::seeded(1);
  opt.tap_point = "head";
  EXPECT_THROW(extract_representation(m, x, Condition::unconditional(), opt), ConfigError);
  opt.tap_point = kBottleneckTap;
  opt.sigma = 1000.0;
  EXPECT_THROW(extract_representation(m, x, Condition::unconditional(), opt), ArgumentError);
  opt.sigma = 0.1;
  opt.extra_timestep = true;
  const auto two = extract_representation(m, x, Condition::unconditional(), opt);
  EXPECT_EQ(two.features.dim(1), 2 * m.tap_width(kBottleneckTap));
  EXPECT_TRUE(two.features.identical(extract_representation(m, x, Condition::unconditional(), opt).features));
}

TEST(ExtractRepresentation, ZeroingChangesOnlyListedCoordinates) {
  const auto m = small_untrained();
  const Tensor x = dra::testing::random_tensor({4, 1, 16, 16}, 7, 0.0, 1.0);
  ExtractOptions opt;
  opt.noise = NoiseMode::seeded(3);
  const auto base = extract_representation(m, x, Condition::unconditional(), opt).features;
  opt.zero_channels = {2, 9};
  const auto z = extract_representation(m, x, Condition::unconditional(), opt).features;
  for (int i = 0; i < base.dim(0); ++i)
    for (int ch = 0; ch < base.dim(1); ++ch) {
      if (ch == 2 || ch == 9) {
        EXPECT_EQ(z.at(i, ch), 0.0);
      } else {
        const double a = z.at(i, ch), b = base.at(i, ch);
        EXPECT_EQ(std::memcmp(&a, &b, sizeof(double)), 0);
      }
    }
  opt.zero_channels = {99};
  EXPECT_THROW(extract_representation(m, x, Condition::unconditional(), opt), ArgumentError);
}

TEST(SweepProbe, DegenerateAndUnsorted) {
  const auto m = small_untrained();
  const auto train = head(toy_train(), 40), test = head(toy_test(), 20);
  const std::vector<double> one{0.1};
  const auto c = sweep_probe_timesteps(m, train, test, one, 0);
  ASSERT_EQ(c.sigmas.size(), 1u);
  EXPECT_EQ(c.best_sigma, 0.1);
  const std::vector<double> unsorted{0.5, 0.1, 1.0};
  EXPECT_THROW(sweep_probe_timesteps(m, train, test, unsorted, 0), ArgumentError);
}

TEST(SweepProbe, PeakIsInteriorOnToyData) {
  const auto& m = trained_model();
  const auto grid = log_grid(m.schedule().sigma_min, m.schedule().sigma_max, 7);
  const auto c = sweep_probe_timesteps(m, head(toy_train(), 600), toy_test(), grid, 1);
  EXPECT_NE(c.best_sigma, grid.front());
  EXPECT_NE(c.best_sigma, grid.back());
  EXPECT_GT(*std::max_element(c.accuracy.begin(), c.accuracy.end()), 0.8);
}

TEST(SweepProbe, SigmaMaxIsNearChance) {
  const auto& m = trained_model();
  const auto test = toy_test();
  const std::vector<double> top{m.schedule().sigma_max};
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    mean += sweep_probe_timesteps(m, head(toy_train(), 600), test, top, seed).accuracy[0] / 5.0;
  // Binomial standard error of the 5-seed mean at p = 0.5.
  const double se = std::sqrt(0.25 / test.size() / 5.0);
  EXPECT_NEAR(mean, 0.5, 3.0 * se);
}

TEST(OutlierChannels, PlantedChannelIsTheOnlyOneReported) {
  Rng rng(3);
  Tensor act = normal_tensor({20, 12, 4, 4}, rng);
  EXPECT_TRUE(outlier_channels(act, 10.0).empty());
  const std::size_t hw = 16;
  for (int i = 0; i < 20; ++i)
    for (std::size_t p = 0; p < hw; ++p) act[(static_cast<std::size_t>(i) * 12 + 7) * hw + p] *= 100.0;
  EXPECT_EQ(outlier_channels(act, 10.0), (std::vector<int>{7}));
  EXPECT_THROW(outlier_channels(act, 1.0), ArgumentError);
}

TEST(OutlierChannels, PlantedInModelBottleneck) {
  auto m = small_untrained(12);
  const auto data = head(toy_train(), 16);
  const auto before = identify_outlier_channels(m, data, 10.0);
  EXPECT_TRUE(before.empty());
  m.mid_conv().bias.value[5] += 100.0;
  EXPECT_EQ(identify_outlier_channels(m, data, 10.0), (std::vector<int>{5}));
  data::LabeledImageBatch empty;
  empty.num_classes = 2;
  EXPECT_THROW(identify_outlier_channels(m, empty, 10.0), ArgumentError);
}
