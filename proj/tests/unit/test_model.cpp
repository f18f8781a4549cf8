#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "gradcheck.hpp"
#include "provshift/autodiff.hpp"
#include "provshift/model.hpp"
#include "provshift/synthgen.hpp"
#include "test_util.hpp"

using namespace provshift;

namespace {

Batch random_batch(std::size_t n, std::size_t d, Rng& rng, bool weighted) {
  Batch b;
  b.x = MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < b.x.size(); ++i) b.x(i) = 2 * uniform01(rng) - 1;
  for (std::size_t i = 0; i < n; ++i) {
    b.y.push_back(static_cast<int>(rng() % 2));
    b.z.push_back(static_cast<int>(i % 2));
    b.source.push_back(static_cast<long>(i));
  }
  b.targets = one_hot(b.y);
  b.weights = VectorXd::Ones(static_cast<Eigen::Index>(n));
  if (weighted)
    for (Eigen::Index i = 0; i < b.weights.size(); ++i) b.weights(i) = 0.1 + uniform01(rng);
  return b;
}

Dataset toy_dataset(std::size_t n0, std::size_t n1) {
  Dataset d;
  d.dim = 2;
  for (std::size_t i = 0; i < n0 + n1; ++i) {
    const int z = i < n0 ? 0 : 1;
    d.examples.push_back({{static_cast<double>(i), 1.0}, static_cast<int>(i % 2), z, "s" + std::to_string(i), "e" + std::to_string(i)});
  }
  return d;
}

}  // namespace

TEST(Forward, ZeroWeightsGiveHalf) {
  Rng rng = make_rng(0, "t");
  ModelState m = ModelState::create(3, 4, Activation::kTanh, rng);
  for (auto& p : m.params.params) p.value.setZero();
  Batch b = random_batch(5, 3, rng, false);
  const ForwardResult f = forward(m, b);
  for (Eigen::Index i = 0; i < f.probabilities.size(); ++i) EXPECT_DOUBLE_EQ(f.probabilities(i), 0.5);
}

TEST(Forward, IdentityFeaturizerHandMultiply) {
  Rng rng = make_rng(0, "t");
  ModelState m = ModelState::create(3, 3, Activation::kLinear, rng);
  m.params.at("featurizer.weight").value = MatrixXd::Identity(3, 3);
  m.params.at("featurizer.bias").value.setZero();
  MatrixXd w(3, 2);
  w << 1, -1, 1, -1, 1, -1;
  m.params.at("classifier.weight").value = w;
  m.params.at("classifier.bias").value.setZero();
  Batch b;
  b.x = MatrixXd(1, 3);
  b.x << 0.5, -2.0, 4.0;
  b.y = {1};
  b.z = {0};
  b.targets = one_hot(b.y);
  b.weights = VectorXd::Ones(1);
  b.source = {0};
  const ForwardResult f = forward(m, b);
  // logit0 = sum(x), logit1 = -sum(x)
  EXPECT_DOUBLE_EQ(f.logits(0, 0) - f.logits(0, 1), 2 * (0.5 - 2.0 + 4.0));
  EXPECT_NEAR(f.probabilities(0, 0), 1 / (1 + std::exp(-5.0)), 1e-12);
}

TEST(Forward, CopiesGiveIdenticalRowsAndNormalizedProbabilities) {
  Rng rng = make_rng(1, "t");
  ModelState m = ModelState::create(4, 6, Activation::kRelu, rng);
  Batch b = random_batch(1, 4, rng, false);
  Batch many = b;
  many.x = b.x.replicate(7, 1);
  many.y.assign(7, b.y[0]);
  many.z.assign(7, 0);
  many.targets = one_hot(many.y);
  many.weights = VectorXd::Ones(7);
  many.source.assign(7, 0);
  const ForwardResult f = forward(m, many);
  for (Eigen::Index i = 0; i < 7; ++i) {
    EXPECT_EQ(f.probabilities.row(i), f.probabilities.row(0));
    EXPECT_NEAR(f.probabilities.row(i).sum(), 1.0, 1e-9);
    EXPECT_TRUE(f.logits.row(i).allFinite());
  }
}

TEST(Forward, NonFiniteInputRejected) {
  Rng rng = make_rng(1, "t");
  ModelState m = ModelState::create(2, 2, Activation::kTanh, rng);
  Batch b = random_batch(3, 2, rng, false);
  b.x(1, 1) = std::nan("");
  EXPECT_ERROR_CODE(forward(m, b), "non-finite-input");
  EXPECT_ERROR_CODE(loss_and_grad(m, b), "non-finite-input");
}

TEST(Loss, PerfectPredictionsNearZero) {
  Rng rng = make_rng(2, "t");
  ModelState m = ModelState::create(1, 1, Activation::kLinear, rng);
  m.params.at("featurizer.weight").value.setConstant(1);
  m.params.at("featurizer.bias").value.setZero();
  MatrixXd w(1, 2);
  w << -40, 40;
  m.params.at("classifier.weight").value = w;
  m.params.at("classifier.bias").value.setZero();
  Batch b;
  b.x = MatrixXd(2, 1);
  b.x << 1, -1;
  b.y = {1, 0};
  b.z = {0, 1};
  b.targets = one_hot(b.y);
  b.weights = VectorXd::Ones(2);
  b.source = {0, 1};
  EXPECT_LT(loss_and_grad(m, b).loss, 1e-6);
}

TEST(Loss, GceAtHalfAndCeLimit) {
  Rng rng = make_rng(3, "t");
  ModelState m = ModelState::create(3, 4, Activation::kTanh, rng);
  Batch b = random_batch(6, 3, rng, false);
  ModelState zero = m;
  for (auto& p : zero.params.params) p.value.setZero();
  EXPECT_NEAR(loss_and_grad(zero, b, LossKind::gce(1.0)).loss, 0.5, 1e-15);
  const double ce = loss_and_grad(m, b).loss;
  const double gce = loss_and_grad(m, b, LossKind::gce(1e-4)).loss;
  EXPECT_NEAR(gce, ce, 1e-3 * ce);
  EXPECT_ERROR_CODE(loss_and_grad(m, b, LossKind::gce(0.0)), "argument");
  EXPECT_ERROR_CODE(loss_and_grad(m, b, LossKind::gce(1.5)), "argument");
}

TEST(Loss, CeMatchesDirectWeightedMean) {
  Rng rng = make_rng(4, "t");
  ModelState m = ModelState::create(3, 5, Activation::kTanh, rng);
  Batch b = random_batch(9, 3, rng, true);
  const ForwardResult f = forward(m, b);
  double num = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    num += b.weights(static_cast<Eigen::Index>(i)) * -std::log(f.probabilities(static_cast<Eigen::Index>(i), b.y[i]));
  const double direct = num / b.weights.sum();
  EXPECT_NEAR(loss_and_grad(m, b).loss, direct, 1e-12);
  EXPECT_GE(direct, 0.0);
}

TEST(Gradients, FiniteDifferencesOnRandomConfigurations) {
  for (int cfg = 0; cfg < 20; ++cfg) {
    Rng rng = make_rng(static_cast<std::uint64_t>(cfg), "gradcheck");
    const std::size_t d = 1 + rng() % 6, h = 1 + rng() % 8, n = 2 + rng() % 10;
    const Activation act = cfg % 3 == 0 ? Activation::kTanh : cfg % 3 == 1 ? Activation::kRelu : Activation::kLinear;
    const LossKind kind = cfg % 4 == 3 ? LossKind::gce(0.2 + 0.1 * (cfg % 5)) : LossKind::ce();
    ModelState m = ModelState::create(d, h, act, rng);
    const Batch b = random_batch(n, d, rng, cfg % 2 == 0);
    const LossAndGrad lg = loss_and_grad(m, b, kind);
    const auto res = provshift::testing::check_gradients(m.params, lg.grads, [&](const ParameterSet& p) {
      ModelState s = m;
      s.params = p;
      return loss_and_grad(s, b, kind).loss;
    });
    EXPECT_EQ(res.failures, 0u) << "config " << cfg << " max rel " << res.max_rel_error;
  }
}

TEST(Autodiff, OpsMatchFiniteDifferences) {
  Rng rng = make_rng(5, "ops");
  MatrixXd a0 = MatrixXd::Random(3, 4), b0 = MatrixXd::Random(4, 2), c0 = (MatrixXd::Random(3, 4).array().abs() + 0.5).matrix();
  (void)rng;
  auto f = [&](const MatrixXd& a, const MatrixXd& b, const MatrixXd& c, MatrixXd* ga, MatrixXd* gb, MatrixXd* gc) {
    ad::Tape t;
    ad::Var va = t.variable(a), vb = t.variable(b), vc = t.variable(c);
    ad::Var x = ad::add(ad::tanh(va), ad::div(ad::square(va), vc));
    x = ad::mul(x, ad::log(ad::sqrt(vc)));
    x = ad::add(x, ad::exp(ad::scale(va, -0.3)));
    ad::Var y = ad::matmul(x, vb);
    y = ad::concat_cols(y, ad::l2_normalize_rows(y));
    ad::Var s = ad::softmax(y);
    ad::Var r = ad::add(ad::sum(ad::mul(s, s)), ad::dot(ad::col_mean(x), ad::col_mean(ad::recip(vc))));
    r = ad::add(r, ad::mean(ad::relu(ad::sub_row(x, ad::col_mean(vc)))));
    if (ga) {
      t.backward(r);
      *ga = t.grad(va);
      *gb = t.grad(vb);
      *gc = t.grad(vc);
    }
    return r.scalar();
  };
  MatrixXd ga, gb, gc;
  f(a0, b0, c0, &ga, &gb, &gc);
  ParameterSet ps;
  ps.params = {{"a", a0, {}}, {"b", b0, {}}, {"c", c0, {}}};
  const auto res = provshift::testing::check_gradients(ps, {ga, gb, gc}, [&](const ParameterSet& p) {
    return f(p.params[0].value, p.params[1].value, p.params[2].value, nullptr, nullptr, nullptr);
  });
  EXPECT_EQ(res.failures, 0u) << res.max_rel_error;
}

TEST(Optimizer, ZeroLearningRateIsNoOp) {
  Rng rng = make_rng(6, "t");
  ModelState m = ModelState::create(3, 4, Activation::kTanh, rng);
  const ModelState before = m;
  Batch b = random_batch(6, 3, rng, false);
  for (auto kind : {OptimizerConfig::kSgd, OptimizerConfig::kAdam}) {
    OptimizerState opt(OptimizerConfig{kind, 0.0, 0.1});
    optimizer_step(m.params, opt, loss_and_grad(m, b).grads);
    EXPECT_EQ(m.params, before.params);
  }
}

TEST(Optimizer, SgdHandUpdate) {
  ParameterSet p;
  p.params = {{"theta", MatrixXd::Constant(1, 1, 1.0), {}}};
  OptimizerState opt(OptimizerConfig{OptimizerConfig::kSgd, 0.1, 0.0});
  optimizer_step(p, opt, {MatrixXd::Constant(1, 1, 2.0)});
  EXPECT_DOUBLE_EQ(p.params[0].value(0, 0), 0.8);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ParameterSet p;
  p.params = {{"theta", MatrixXd::Constant(1, 1, 1.0), {}}};
  OptimizerState opt(OptimizerConfig{OptimizerConfig::kAdam, 0.01, 0.0});
  optimizer_step(p, opt, {MatrixXd::Constant(1, 1, 3.0)});
  EXPECT_NEAR(p.params[0].value(0, 0), 1.0 - 0.01, 1e-9);
}

TEST(Optimizer, FrozenEntriesUntouched) {
  Rng rng = make_rng(7, "t");
  ModelState m = ModelState::create(3, 4, Activation::kTanh, rng);
  auto& cw = m.params.at("classifier.weight");
  cw.frozen = MatrixXd::Ones(cw.value.rows(), cw.value.cols());
  auto& cb = m.params.at("classifier.bias");
  cb.frozen = MatrixXd::Ones(cb.value.rows(), cb.value.cols());
  const auto hash = parameter_hash(m.params, {"classifier.weight", "classifier.bias"});
  const auto fhash = parameter_hash(m.params, {"featurizer.weight"});
  Batch b = random_batch(8, 3, rng, false);
  OptimizerState opt(OptimizerConfig{OptimizerConfig::kAdam, 0.1, 0.5});
  for (int i = 0; i < 5; ++i) optimizer_step(m.params, opt, loss_and_grad(m, b).grads);
  EXPECT_EQ(parameter_hash(m.params, {"classifier.weight", "classifier.bias"}), hash);
  EXPECT_NE(parameter_hash(m.params, {"featurizer.weight"}), fhash);
}

TEST(Optimizer, NonFiniteGradientSignalsDivergence) {
  ParameterSet p;
  p.params = {{"theta", MatrixXd::Constant(1, 1, 1.0), {}}};
  OptimizerState opt;
  EXPECT_ERROR_CODE(optimizer_step(p, opt, {MatrixXd::Constant(1, 1, std::nan(""))}), "divergence");
}

TEST(Optimizer, ProximalDecayStaysStable) {
  ParameterSet p;
  p.params = {{"theta", MatrixXd::Constant(1, 1, 2.0), {}}};
  OptimizerState opt(OptimizerConfig{OptimizerConfig::kSgd, 0.5, 1e6});
  optimizer_step(p, opt, {MatrixXd::Zero(1, 1)});
  EXPECT_NEAR(p.params[0].value(0, 0), 2.0 / (1 + 0.5e6), 1e-15);
}

TEST(Batcher, ExactHistogramOnSkewedData) {
  const Dataset d = toy_dataset(80, 20);
  BalancedBatcher bb(d, 8, 1);
  for (int i = 0; i < 50; ++i) {
    const Batch b = bb.next();
    ASSERT_EQ(b.size(), 16u);
    EXPECT_EQ(b.rows_with_z(0).size(), 8u);
    EXPECT_EQ(b.rows_with_z(1).size(), 8u);
  }
}

TEST(Batcher, MinorityRecyclesWithinEpoch) {
  const Dataset d = toy_dataset(100, 10);
  BalancedBatcher bb(d, 16, 2);
  std::map<long, int> counts;
  const Batch b = bb.next();
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b.z[i] == 1) ++counts[b.source[i]];
  int total = 0;
  for (const auto& [row, c] : counts) {
    EXPECT_GE(c, 1);
    EXPECT_LE(c, 2);
    total += c;
  }
  EXPECT_EQ(total, 16);
  EXPECT_EQ(counts.size(), 10u);  // every minority example used before any third use
}

TEST(Batcher, DeterministicAndStarvation) {
  const Dataset d = toy_dataset(30, 30);
  BalancedBatcher a(d, 4, 9), b(d, 4, 9);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.next_rows(), b.next_rows());
  EXPECT_ERROR_CODE(BalancedBatcher(toy_dataset(10, 0), 4, 0), "provenance-starved");
}

TEST(Training, DeterministicFinalParameters) {
  GenConfig g;
  g.n = 400;
  g.subjects = 400;
  const Dataset d = generate(g);
  auto run = [&] {
    Rng rng = make_rng(3, "model");
    ModelState m = ModelState::create(d.dim, 8, Activation::kTanh, rng);
    OptimizerState opt(OptimizerConfig{OptimizerConfig::kAdam, 0.01, 0.001});
    BalancedBatcher bb(d, 16, 3);
    for (int i = 0; i < 50; ++i) optimizer_step(m.params, opt, loss_and_grad(m, bb.next()).grads);
    return m;
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripBitExact) {
  Rng rng = make_rng(8, "t");
  ModelState m = ModelState::create(3, 4, Activation::kRelu, rng);
  m.params.at("featurizer.weight").frozen = MatrixXd::Zero(3, 4);
  m.params.at("featurizer.weight").frozen(1, 2) = 1;
  OptimizerState opt;
  Batch b = random_batch(6, 3, rng, false);
  for (int i = 0; i < 3; ++i) optimizer_step(m.params, opt, loss_and_grad(m, b).grads);
  const auto path = std::filesystem::temp_directory_path() / "provshift_ckpt_test.json";
  save_checkpoint({m, opt, 3, {{"note", "x"}}}, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.model, m);
  EXPECT_EQ(back.optimizer, opt);
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.extra["note"], "x");
  std::filesystem::remove(path);
}

TEST(Mlp, InputGradientMatchesFiniteDifferences) {
  Rng rng = make_rng(9, "mlp");
  const Mlp mlp = Mlp::create(3, 5, 3, 2, 0.0, rng);
  MatrixXd x = MatrixXd::Random(4, 3);
  const MatrixXd targets = one_hot({0, 1, 1, 0});
  auto loss = [&](const MatrixXd& in) {
    ad::Tape t;
    const auto bound = bind(t, mlp.params);
    const MlpPass pass = mlp_forward(bound, t.constant(in), 0.0, false, nullptr);
    return ad::sum(ad::cross_entropy_rows(pass.output, targets)).scalar();
  };
  ad::Tape t;
  const auto bound = bind(t, mlp.params);
  const MlpPass pass = mlp_forward(bound, t.constant(x), 0.0, false, nullptr);
  const MatrixXd g = mlp_input_gradient(bound, pass, targets).value();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    MatrixXd up = x, down = x;
    up(i) += 1e-5;
    down(i) -= 1e-5;
    EXPECT_NEAR(g(i), (loss(up) - loss(down)) / 2e-5, 1e-6);
  }
}
