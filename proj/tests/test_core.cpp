#include <gtest/gtest.h>

#include <fstream>

#include "dra/archive.hpp"
#include "dra/errors.hpp"
#include "test_util.hpp"

using namespace dra;
using dra::testing::max_grad_rel_error;
using dra::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

}  // namespace

TEST(Tensor, ShapeAndRows) {
  Tensor t({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.dim(0), 3);
  EXPECT_EQ(t.at(2, 1), 6);
  const Tensor r = t.rows(1, 3);
  EXPECT_EQ(r.shape(), (Shape{2, 2}));
  EXPECT_EQ(r[0], 3);
  const std::vector<int> idx{2, 0};
  const Tensor g = t.gather_rows(idx);
  EXPECT_EQ(g[0], 5);
  EXPECT_EQ(g[3], 2);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ArgumentError);
}

TEST(Tensor, ConcatAndIdentical) {
  Tensor a({1, 2}, {1, 2}), b({2, 2}, {3, 4, 5, 6});
  std::vector<Tensor> parts{a, b};
  const Tensor c = concat_rows(parts);
  EXPECT_EQ(c.dim(0), 3);
  EXPECT_TRUE(c.rows(1, 3).identical(b));
  EXPECT_FALSE(a.identical(b));
  EXPECT_EQ(concat_cols(a, a).dim(1), 4);
}

TEST(Rng, DeriveSeedSeparatesPaths) {
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_NE(stream_seed(0, Stream::kInit), stream_seed(0, Stream::kData));
  Rng a(5), b(5);
  EXPECT_TRUE(normal_tensor({10}, a).identical(normal_tensor({10}, b)));
}

TEST(Archive, RoundTripAndDeterministicBytes) {
  TensorArchive ar;
  ar.put("w", random_tensor({3, 4}, 1));
  ar.put_u8("img", {2, 2}, {0, 17, 128, 255});
  ar.put_i64("labels", {3}, {0, 1, -5});
  ar.meta()["kind"] = "test";
  const std::string bytes = ar.serialize();
  const TensorArchive back = TensorArchive::parse(bytes, "mem");
  EXPECT_TRUE(back.get("w").identical(ar.get("w")));
  EXPECT_EQ(back.get_u8("img"), (std::vector<std::uint8_t>{0, 17, 128, 255}));
  EXPECT_EQ(back.get_i64("labels")[2], -5);
  EXPECT_EQ(back.meta()["kind"], "test");
  EXPECT_EQ(back.serialize(), bytes);

  // Header length prefix is little-endian u64 followed by JSON.
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | static_cast<unsigned char>(bytes[i]);
  const auto header = nlohmann::json::parse(bytes.substr(8, header_len));
  EXPECT_EQ(header.at("w").at("dtype"), "F64");
  EXPECT_EQ(header.at("img").at("dtype"), "U8");
  EXPECT_TRUE(header.contains("__metadata__"));
}

TEST(Archive, CorruptFileNamesPath) {
  const auto dir = dra::testing::scratch_dir("archive");
  const auto p = dir / "broken.dra";
  std::ofstream(p) << "garbage";
  try {
    TensorArchive::load(p);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.dra"), std::string::npos);
  }
  EXPECT_THROW(TensorArchive::load(dir / "missing.dra"), IngestionError);
}

TEST(Archive, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Autodiff, ElementwiseGradients) {
  const Tensor a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
  auto chk = [&](const dra::testing::ScalarFn& f) { return max_grad_rel_error(f, {a, b}); };
  EXPECT_LT(chk([](Tape&, const std::vector<Var>& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); }), kGradTol);
  EXPECT_LT(chk([](Tape&, const std::vector<Var>& v) { return mean(square(scale(add_scalar(v[0], 0.3), 1.7))); }),
            kGradTol);
  EXPECT_LT(chk([](Tape&, const std::vector<Var>& v) { return sum(mul(silu(v[0]), v[1])); }), kGradTol);
  // Keep relu away from its kink.
  Tensor away = a;
  for (double& x : away.values()) x += x > 0 ? 0.1 : -0.1;
  EXPECT_LT(max_grad_rel_error([](Tape&, const std::vector<Var>& v) { return sum(mul(relu(v[0]), v[1])); }, {away, b}),
            kGradTol);
}

TEST(Autodiff, LinearAlgebraGradients) {
  const Tensor a = random_tensor({3, 4}, 3), b = random_tensor({4, 5}, 4), bias = random_tensor({5}, 5);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) { return sum(square(add_row_bias(matmul(v[0], v[1]), v[2]))); },
                {a, b, bias}),
            kGradTol);
  const Tensor x = random_tensor({2, 3, 4}, 6), y = random_tensor({2, 4, 3}, 7), z = random_tensor({2, 3, 4}, 8);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) { return sum(square(batched_matmul(v[0], v[1], false, false))); },
                {x, y}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) { return sum(square(batched_matmul(v[0], v[1], true, true))); },
                {y, x}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) { return sum(square(batched_matmul(v[0], v[1], false, true))); },
                {x, z}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error(
                [&](Tape& t, const std::vector<Var>& v) {
                  return sum(mul(transpose12(v[0]), t.constant(random_tensor({2, 4, 3}, 9))));
                },
                {x}),
            kGradTol);
}

TEST(Autodiff, ShapeGradients) {
  const Tensor a = random_tensor({3, 6}, 10);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) {
                  return sum(square(add_scalar(slice_cols(reshape(v[0], {6, 3}), 1, 3), 0.5)));
                },
                {a}),
            kGradTol);
}

TEST(Autodiff, ImageOpGradients) {
  const Tensor x = random_tensor({2, 2, 5, 5}, 11), w = random_tensor({3, 2, 3, 3}, 12), b = random_tensor({3}, 13);
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      EXPECT_LT(max_grad_rel_error(
                    [&](Tape&, const std::vector<Var>& v) { return sum(square(conv2d(v[0], v[1], v[2], stride, pad))); },
                    {x, w, b}),
                kGradTol)
          << "stride " << stride << " pad " << pad;
    }
  const Tensor cb = random_tensor({2, 2}, 14);
  EXPECT_LT(max_grad_rel_error(
                [](Tape&, const std::vector<Var>& v) {
                  return sum(square(spatial_mean(add_channel_bias(upsample_nearest2x(v[0]), v[1]))));
                },
                {x, cb}),
            kGradTol);
  const Tensor tok = random_tensor({2, 3, 4}, 15);
  EXPECT_LT(max_grad_rel_error([](Tape&, const std::vector<Var>& v) { return sum(square(token_mean(v[0]))); }, {tok}),
            kGradTol);
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  const Tensor x = random_tensor({1, 2, 4, 4}, 16), w = random_tensor({2, 2, 3, 3}, 17), b = random_tensor({2}, 18);
  Tape t(false);
  const Tensor y = conv2d(t.constant(x), t.constant(w), t.constant(b), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q) {
              const int yy = 2 * i - 1 + p, xx = 2 * j - 1 + q;
              if (yy < 0 || yy >= 4 || xx < 0 || xx >= 4) continue;
              acc += w[((o * 2 + c) * 3 + p) * 3 + q] * x[(c * 4 + yy) * 4 + xx];
            }
        EXPECT_NEAR(y[(o * 2 + i) * 2 + j], acc, 1e-12);
      }
}

TEST(Autodiff, NormalizationAndLossGradients) {
  const Tensor x = random_tensor({3, 4}, 19), g = random_tensor({4}, 20, 0.5, 1.5), bb = random_tensor({4}, 21);
  EXPECT_LT(max_grad_rel_error(
                [](Tape& t, const std::vector<Var>& v) {
                  return sum(mul(layer_norm(v[0], v[1], v[2]), t.constant(random_tensor({3, 4}, 22))));
                },
                {x, g, bb}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error(
                [](Tape& t, const std::vector<Var>& v) {
                  return sum(mul(softmax_last(v[0]), t.constant(random_tensor({3, 4}, 23))));
                },
                {x}),
            kGradTol);
  const std::vector<int> labels{0, 3, 1};
  const Tensor q = random_tensor({3, 4}, 24);
  EXPECT_LT(max_grad_rel_error([&](Tape&, const std::vector<Var>& v) { return mean(cross_entropy_rows(v[0], labels)); },
                               {x}),
            kGradTol);
  EXPECT_LT(max_grad_rel_error([](Tape&, const std::vector<Var>& v) { return mean(kl_rows(v[0], v[1])); }, {x, q}),
            kGradTol);
  const Tensor target = random_tensor({3, 4}, 25);
  EXPECT_LT(max_grad_rel_error([&](Tape&, const std::vector<Var>& v) { return sum(cosine_rows(v[0], target)); }, {x}),
            kGradTol);
  const Tensor table = random_tensor({5, 3}, 26);
  const std::vector<int> rows{4, 0, 4};
  EXPECT_LT(max_grad_rel_error([&](Tape&, const std::vector<Var>& v) { return sum(square(embedding(v[0], rows))); },
                               {table}),
            kGradTol);
}

TEST(Autodiff, LossValuesMatchScalarArithmetic) {
  Tape t(false);
  const Var logits = t.constant(Tensor({1, 2}, {2.0, 0.0}));
  const std::vector<int> y{0};
  EXPECT_NEAR(cross_entropy_rows(logits, y).value()[0], std::log(1.0 + std::exp(-2.0)), 1e-14);
  const Var q = t.constant(Tensor({1, 2}, {0.0, 2.0}));
  const double p0 = 1.0 / (1.0 + std::exp(-2.0)), p1 = 1.0 - p0;
  EXPECT_NEAR(kl_rows(logits, q).value()[0], p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0), 1e-14);
  const Tensor zero({1, 2});
  EXPECT_EQ(cosine_rows(t.constant(zero), Tensor({1, 2}, {1.0, 0.0})).value()[0], 0.0);
}

TEST(Autodiff, ParamNodeReusedAndAccumulates) {
  Parameter p{"p", Tensor({2}, {1.0, 2.0})};
  Tape t;
  const Var a = t.param(p), b = t.param(p);
  EXPECT_EQ(a.id, b.id);
  t.backward(sum(mul(a, b)));
  const Tensor g = t.param_grad(p);
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], 4.0);
}

TEST(Optim, MomentumSgdMatchesRecursion) {
  Parameter p{"p", Tensor({1}, {1.0})};
  ParamRefs ps{&p};
  MomentumSgd opt(0.9, 0.1);
  double w = 1.0, v = 0.0;
  for (int i = 0; i < 5; ++i) {
    const double g = 0.5 * i;
    opt.step(ps, {Tensor({1}, {g})}, 0.01);
    v = 0.9 * v + (g + 0.1 * w);
    w -= 0.01 * v;
    EXPECT_DOUBLE_EQ(p.value[0], w);
  }
}

TEST(Optim, AdamFirstStepIsSignTimesLr) {
  Parameter p{"p", Tensor({2}, {0.0, 0.0})};
  ParamRefs ps{&p};
  Adam opt;
  opt.step(ps, {Tensor({2}, {3.0, -0.25})}, 0.1);
  EXPECT_NEAR(p.value[0], -0.1, 1e-8);
  EXPECT_NEAR(p.value[1], 0.1, 1e-8);
}

TEST(Optim, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.2, 0, 100), 0.2);
  EXPECT_NEAR(cosine_lr(0.2, 50, 100), 0.1, 1e-15);
  EXPECT_NEAR(cosine_lr(0.2, 100, 100), 0.0, 1e-15);
}

TEST(Nn, SnapshotRestore) {
  Rng rng(1);
  Linear l("l", 3, 2, rng);
  ParamRefs ps;
  l.collect(ps);
  const auto snap = snapshot(ps);
  l.weight.value.fill(0.0);
  restore(ps, snap);
  EXPECT_TRUE(l.weight.value.identical(snap[0]));
  EXPECT_EQ(parameter_count(ps), 8u);
}
