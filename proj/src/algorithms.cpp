#include "provshift/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "provshift/error.hpp"
#include "provshift/sampler.hpp"

namespace provshift {

namespace {

constexpr std::size_t kLabelEmbeddingDim = 8;
constexpr double kVarianceFloor = 1e-6;

struct TaskGraph {
  BoundModel m;
  ad::Var x;
  ad::Var h;
  ad::Var logits;
  ad::Var ce;
  ad::Var task;
};

TaskGraph task_graph(ad::Tape& tape, const ModelState& model, const Batch& batch) {
  TaskGraph g;
  g.m = bind_model(tape, model);
  g.x = tape.constant(batch.x);
  g.h = g.m.featurize(g.x);
  g.logits = g.m.classify(g.h);
  g.ce = ad::cross_entropy_rows(g.logits, batch.targets);
  g.task = ad::weighted_sum_rows(g.ce, mean_coefficients(batch.weights));
  return g;
}

void descend(TrainContext& ctx, ad::Tape& tape, const BoundModel& m, ad::Var loss) {
  if (!std::isfinite(loss.scalar())) throw divergence_error("non-finite loss at step " + std::to_string(ctx.step));
  tape.backward(loss);
  optimizer_step(ctx.model.params, ctx.opt, collect_gradients(tape, m.vars, ctx.model.params));
}

std::vector<ad::Var> split_by_z(ad::Var h, const Batch& batch) {
  return {ad::select_rows(h, batch.rows_with_z(0)), ad::select_rows(h, batch.rows_with_z(1))};
}

MatrixXd select(const MatrixXd& m, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

Batch subset(const Batch& b, const std::vector<int>& rows) {
  Batch out;
  out.x = select(b.x, rows);
  out.targets = select(b.targets, rows);
  out.weights.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.y.push_back(b.y[static_cast<std::size_t>(rows[i])]);
    out.z.push_back(b.z[static_cast<std::size_t>(rows[i])]);
    out.weights(static_cast<Eigen::Index>(i)) = b.weights(rows[i]);
    out.source.push_back(b.source.empty() ? -1 : b.source[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

MatrixXd augment_with_z(const MatrixXd& x, int z) {
  MatrixXd out(x.rows(), x.cols() + 2);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setConstant(z == 0 ? 1.0 : 0.0);
  out.col(x.cols() + 1).setConstant(z == 1 ? 1.0 : 0.0);
  return out;
}

MatrixXd augment_with_z(const MatrixXd& x, const std::vector<int>& z) {
  MatrixXd out(x.rows(), x.cols() + 2);
  out.leftCols(x.cols()) = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out(i, x.cols()) = z[static_cast<std::size_t>(i)] == 0 ? 1.0 : 0.0;
    out(i, x.cols() + 1) = z[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;
  }
  return out;
}

MatrixXd dataset_matrix(const Dataset& data) {
  MatrixXd x(static_cast<Eigen::Index>(data.examples.size()), static_cast<Eigen::Index>(data.dim));
  for (std::size_t i = 0; i < data.examples.size(); ++i)
    for (std::size_t k = 0; k < data.dim; ++k)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = data.examples[i].features[k];
  return x;
}

MatrixXd model_proba(const ModelState& model, const MatrixXd& x) {
  ad::Tape tape;
  BoundModel m = bind_model(tape, model, false);
  return ad::softmax(m.classify(m.featurize(tape.constant(x)))).value();
}

Mlp make_discriminator(const TrainContext& ctx, std::size_t input) {
  Rng rng = make_rng(ctx.seed, "discriminator");
  return Mlp::create(input, static_cast<std::size_t>(as_int(ctx.hp, "disc_width")),
                     static_cast<std::size_t>(as_int(ctx.hp, "disc_depth")), 2, as_real(ctx.hp, "disc_dropout"), rng);
}

ParameterSet disc_parameters(const TrainContext& ctx) {
  ParameterSet set = ctx.disc->params;
  if (ctx.kind == AlgorithmKind::kCDANN) set.params.push_back({"label_embedding", ctx.label_embedding, {}});
  return set;
}

// Discriminator logits on the given representation; conditional variants
// append the label embedding of each row.
MlpPass disc_pass(TrainContext& ctx, const std::vector<ad::Var>& disc_vars, ad::Var features, ad::Var embedding,
                  const Batch& batch, bool conditional) {
  ad::Tape& tape = *features.tape;
  ad::Var input = features;
  if (conditional) input = ad::concat_cols(features, ad::matmul(tape.constant(batch.targets), embedding));
  return mlp_forward(disc_vars, input, ctx.disc->dropout, true, &ctx.rng);
}

double row_accuracy(const MatrixXd& logits, const std::vector<int>& labels) {
  double hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int pred = logits(i, 1) > logits(i, 0) ? 1 : 0;
    hits += pred == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  }
  return logits.rows() ? hits / static_cast<double>(logits.rows()) : 0.0;
}

std::vector<double> row_ce(const MatrixXd& proba, const std::vector<int>& labels) {
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = -std::log(std::max(proba(static_cast<Eigen::Index>(i), labels[i]), 1e-300));
  return out;
}

void reset_batcher(TrainContext& ctx, std::uint64_t stream, std::vector<double> weights = {}) {
  ctx.batcher = std::make_unique<BalancedBatcher>(*ctx.train, ctx.settings.per_provenance,
                                                  derive_seed(ctx.seed, "stage-batches", stream), std::move(weights));
}

Diagnostics step_erm(TrainContext& ctx, const Batch& batch) {
  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  descend(ctx, tape, g.m, g.task);
  return {{"loss", g.task.scalar()}};
}

Diagnostics step_backdoor(TrainContext& ctx, const Batch& batch) {
  Batch b = batch;
  b.x = augment_with_z(batch.x, batch.z);
  return step_erm(ctx, b);
}

Diagnostics step_mtl(TrainContext& ctx, const Batch& batch) {
  const double rho = as_real(ctx.hp, "ema");
  ad::Tape tape;
  BoundModel m = bind_model(tape, ctx.model);
  ad::Var h = m.featurize(tape.constant(batch.x));
  const VectorXd coeffs = mean_coefficients(batch.weights);
  ad::Var loss;
  bool first = true;
  MatrixXd next_ez = ctx.ez;
  for (int z = 0; z < 2; ++z) {
    const auto rows = batch.rows_with_z(z);
    if (rows.empty()) continue;
    ad::Var hz = ad::select_rows(h, rows);
    ad::Var ez = ad::add(tape.constant(rho * ctx.ez.row(z)), ad::scale(ad::col_mean(hz), 1.0 - rho));
    next_ez.row(z) = ez.value();
    ad::Var logits = m.classify(ad::concat_cols(hz, ad::repeat_rows(ez, static_cast<Eigen::Index>(rows.size()))));
    VectorXd c(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) c(static_cast<Eigen::Index>(i)) = coeffs(rows[i]);
    ad::Var part = ad::weighted_sum_rows(ad::cross_entropy_rows(logits, select(batch.targets, rows)), c);
    loss = first ? part : ad::add(loss, part);
    first = false;
  }
  descend(ctx, tape, m, loss);
  ctx.ez = next_ez;
  return {{"loss", loss.scalar()}};
}

Diagnostics step_mixed(TrainContext& ctx, const Batch& mixed, double fallbacks = -1) {
  Diagnostics d = step_erm(ctx, mixed);
  if (fallbacks >= 0) d["passthrough"] = fallbacks;
  return d;
}

Diagnostics step_lisa(TrainContext& ctx, const Batch& batch) {
  const double alpha = as_real(ctx.hp, "alpha");
  LisaSelection sel = lisa_pair_selection(batch, as_real(ctx.hp, "intra_ratio"), ctx.rng);
  std::vector<MixPair> pairs;
  for (const auto& p : sel.pairs) {
    double lam = 1.0;
    if (p.strategy != LisaPair::kPassThrough) lam = sample_beta(ctx.rng, alpha, alpha);
    pairs.push_back({p.i, p.j, lam});
  }
  Batch mixed = as_string(ctx.hp, "mix_method") == "cutmix" ? cutmix_apply(batch, pairs, ctx.rng) : mixup_apply(batch, pairs);
  Diagnostics d = step_mixed(ctx, mixed, static_cast<double>(sel.passthrough));
  d["switched"] = static_cast<double>(sel.switched);
  return d;
}

Diagnostics step_alignment(TrainContext& ctx, const Batch& batch, bool coral) {
  const double gamma = as_real(ctx.hp, "gamma");
  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  const auto parts = split_by_z(g.h, batch);
  ad::Var penalty;
  if (coral) {
    penalty = coral_penalty(parts);
  } else {
    penalty = mmd_penalty(parts, median_bandwidths({parts[0].value(), parts[1].value()}));
  }
  ad::Var loss = ad::add(g.task, ad::scale(penalty, gamma));
  descend(ctx, tape, g.m, loss);
  return {{"loss", loss.scalar()}, {"task", g.task.scalar()}, {"penalty", penalty.scalar()}};
}

Diagnostics step_cad(TrainContext& ctx, const Batch& batch) {
  ad::Tape tape;
  BoundModel m = bind_model(tape, ctx.model);
  ad::Var h = m.featurize(tape.constant(batch.x));
  CadTerms cad = cad_objective(h, batch.y, batch.z, as_real(ctx.hp, "lambda"), as_real(ctx.hp, "temperature"));
  ad::Var logits = m.classify(tape.constant(h.value()));
  ad::Var ce = ad::weighted_sum_rows(ad::cross_entropy_rows(logits, batch.targets), mean_coefficients(batch.weights));
  ad::Var loss = ad::add(cad.objective, ce);
  descend(ctx, tape, m, loss);
  return {{"loss", loss.scalar()},
          {"task", ce.scalar()},
          {"contrastive", cad.contrastive.scalar()},
          {"penalty", cad.bottleneck.scalar()},
          {"skipped_anchors", static_cast<double>(cad.skipped_anchors)}};
}

Diagnostics step_fish(TrainContext& ctx, const Batch& batch) {
  std::vector<Batch> parts;
  for (int z = 0; z < 2; ++z) {
    const auto rows = batch.rows_with_z(z);
    if (!rows.empty()) parts.push_back(subset(batch, rows));
  }
  const double before = loss_and_grad(ctx.model, batch).loss;
  fish_step(ctx, parts, as_real(ctx.hp, "meta_lr"));
  return {{"loss", before}};
}

Diagnostics step_adversarial(TrainContext& ctx, const Batch& batch, bool conditional) {
  AdversarialDiagnostics ad_diag;
  const long steps = as_int(ctx.hp, "disc_steps");
  for (long k = 0; k < steps; ++k) ad_diag = adversarial_disc_step(ctx, batch, conditional);

  const double lambda = as_real(ctx.hp, "lambda");
  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  std::vector<ad::Var> disc_vars;
  for (const auto& p : ctx.disc->params.params) disc_vars.push_back(tape.constant(p.value));
  ad::Var emb = tape.constant(conditional ? ctx.label_embedding : MatrixXd());
  MlpPass pass = disc_pass(ctx, disc_vars, g.h, emb, batch, conditional);
  const VectorXd uniform = VectorXd::Constant(static_cast<Eigen::Index>(batch.size()), 1.0 / static_cast<double>(batch.size()));
  ad::Var disc_loss = ad::weighted_sum_rows(ad::cross_entropy_rows(pass.output, one_hot(batch.z)), uniform);
  ad::Var loss = ad::sub(g.task, ad::scale(disc_loss, lambda));
  descend(ctx, tape, g.m, loss);
  return {{"loss", loss.scalar()},
          {"task", g.task.scalar()},
          {"disc_loss", ad_diag.disc_loss},
          {"disc_accuracy", ad_diag.disc_accuracy},
          {"grad_penalty", ad_diag.grad_penalty}};
}

Diagnostics step_irm(TrainContext& ctx, const Batch& batch) {
  const long anneal = as_int(ctx.hp, "anneal_iters");
  const double weight = ctx.step >= anneal ? as_real(ctx.hp, "lambda") : 1.0;
  if (ctx.step == anneal) ctx.opt.reset();
  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  std::vector<ad::Var> logits;
  std::vector<MatrixXd> targets;
  for (int z = 0; z < 2; ++z) {
    const auto rows = batch.rows_with_z(z);
    if (rows.empty()) continue;
    logits.push_back(ad::select_rows(g.logits, rows));
    targets.push_back(select(batch.targets, rows));
  }
  ad::Var penalty = irm_penalty(logits, targets);
  ad::Var loss = ad::add(g.task, ad::scale(penalty, weight));
  if (weight > 1.0) loss = ad::scale(loss, 1.0 / weight);
  descend(ctx, tape, g.m, loss);
  return {{"loss", loss.scalar()}, {"task", g.task.scalar()}, {"penalty", penalty.scalar()}, {"penalty_weight", weight}};
}

Diagnostics step_groupdro(TrainContext& ctx, const Batch& batch) {
  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  std::vector<double> losses(2, 0.0);
  std::vector<double> totals(2, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) totals[static_cast<std::size_t>(batch.z[i])] += batch.weights(static_cast<Eigen::Index>(i));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto z = static_cast<std::size_t>(batch.z[i]);
    losses[z] += batch.weights(static_cast<Eigen::Index>(i)) / totals[z] * g.ce.value()(static_cast<Eigen::Index>(i), 0);
  }
  ctx.q = groupdro_update(ctx.q, losses, as_real(ctx.hp, "eta"));
  VectorXd coeffs(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto z = static_cast<std::size_t>(batch.z[i]);
    coeffs(static_cast<Eigen::Index>(i)) = ctx.q[z] * (batch.weights(static_cast<Eigen::Index>(i)) / totals[z]);
  }
  ad::Var loss = ad::weighted_sum_rows(g.ce, coeffs);
  descend(ctx, tape, g.m, loss);
  return {{"loss", loss.scalar()}, {"q0", ctx.q[0]}, {"q1", ctx.q[1]}, {"loss_z0", losses[0]}, {"loss_z1", losses[1]}};
}

Diagnostics step_lff(TrainContext& ctx, const Batch& batch) {
  const double q = as_real(ctx.hp, "q");
  const auto pb = model_proba(*ctx.biased, batch.x);
  const auto pd = model_proba(ctx.model, batch.x);
  const auto w = lff_weights(row_ce(pb, batch.y), row_ce(pd, batch.y));

  LossAndGrad biased = loss_and_grad(*ctx.biased, batch, LossKind::gce(q));
  optimizer_step(ctx.biased->params, *ctx.biased_opt, biased.grads);

  ad::Tape tape;
  TaskGraph g = task_graph(tape, ctx.model, batch);
  VectorXd coeffs = mean_coefficients(batch.weights);
  double mean_w = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    coeffs(static_cast<Eigen::Index>(i)) *= w[i];
    mean_w += w[i] / static_cast<double>(w.size());
  }
  ad::Var loss = ad::weighted_sum_rows(g.ce, coeffs);
  descend(ctx, tape, g.m, loss);
  return {{"loss", loss.scalar()}, {"biased_loss", biased.loss}, {"mean_weight", mean_w}};
}

Diagnostics step_dualfilter(TrainContext& ctx, const Batch& batch) {
  Diagnostics d = step_erm(ctx, batch);
  d["masked"] = static_cast<double>(ctx.masked_count);
  return d;
}

void train_copy(ModelState& model, BalancedBatcher& batcher, OptimizerConfig config, long steps,
                    bool predict_provenance) {
  OptimizerState opt(config);
  for (long s = 0; s < steps; ++s) {
    Batch b = batcher.next();
    if (predict_provenance) b.targets = one_hot(b.z);
    optimizer_step(model.params, opt, loss_and_grad(model, b).grads);
  }
}

}  // namespace

long planned_steps(AlgorithmKind kind, long steps) { return is_two_stage(kind) ? 2 * steps : steps; }

MatrixXd backdoor_predict(const ModelState& model, const MatrixXd& x, const VectorXd& train_pz) {
  if (train_pz.size() != 2 || (train_pz.array() < 0).any() || std::abs(train_pz.sum() - 1.0) > 1e-9)
    throw argument_error("train_pz must be a distribution over two provenances");
  MatrixXd p = MatrixXd::Zero(x.rows(), 2);
  for (int z = 0; z < 2; ++z) {
    if (train_pz(z) == 0.0) continue;
    p += train_pz(z) * model_proba(model, augment_with_z(x, z));
  }
  return p;
}

MatrixXd predict_proba(const ModelPredictor& predictor, const Dataset& data) {
  const MatrixXd x = dataset_matrix(data);
  if (!x.allFinite()) throw Error("non-finite-input", "dataset features contain NaN or infinity");
  switch (predictor.mode) {
    case ModelPredictor::kBackDoor:
      return backdoor_predict(predictor.model, x, predictor.train_pz);
    case ModelPredictor::kMTL: {
      ad::Tape tape;
      BoundModel m = bind_model(tape, predictor.model, false);
      ad::Var h = m.featurize(tape.constant(x));
      ad::Var e = ad::repeat_rows(ad::col_mean(h), x.rows());
      return ad::softmax(m.classify(ad::concat_cols(h, e))).value();
    }
    case ModelPredictor::kStandard:
      break;
  }
  return model_proba(predictor.model, x);
}

nlohmann::json to_json(const ModelPredictor& p) {
  const char* mode = p.mode == ModelPredictor::kMTL ? "mtl" : p.mode == ModelPredictor::kBackDoor ? "backdoor" : "standard";
  return {{"mode", mode}, {"model", to_json(p.model)}, {"train_pz", {p.train_pz(0), p.train_pz(1)}}};
}

ModelPredictor predictor_from_json(const nlohmann::json& j) {
  ModelPredictor p;
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "mtl")
    p.mode = ModelPredictor::kMTL;
  else if (mode == "backdoor")
    p.mode = ModelPredictor::kBackDoor;
  else if (mode == "standard")
    p.mode = ModelPredictor::kStandard;
  else
    throw Error("parse-error", "unknown predictor mode '" + mode + "'");
  p.model = model_from_json(j.at("model"));
  p.train_pz(0) = j.at("train_pz").at(0).get<double>();
  p.train_pz(1) = j.at("train_pz").at(1).get<double>();
  return p;
}

ModelPredictor make_predictor(const TrainContext& ctx) {
  ModelPredictor p;
  p.model = ctx.model;
  if (ctx.kind == AlgorithmKind::kMTL) p.mode = ModelPredictor::kMTL;
  if (ctx.kind == AlgorithmKind::kBackDoor) {
    p.mode = ModelPredictor::kBackDoor;
    p.train_pz = ctx.train_pz;
  }
  return p;
}

TrainContext make_context(AlgorithmKind kind, const HParams& given, std::shared_ptr<const Dataset> train,
                          const TrainSettings& settings, std::uint64_t seed, Profile profile) {
  if (!train || train->examples.empty()) throw Error("empty-dataset", "training split is empty");
  if (settings.steps < 1) throw argument_error("step budget must be positive");
  TrainContext ctx;
  ctx.kind = kind;
  ctx.hp = complete_hparams(kind, given, profile);
  ctx.settings = settings;
  ctx.seed = seed;
  ctx.rng = make_rng(seed, "algorithm");
  ctx.original_train = train;
  ctx.train = train;
  ctx.total_steps = planned_steps(kind, settings.steps);

  const auto joint = empirical_joint(*train);
  ctx.train_pz << joint.marginal_z()[0], joint.marginal_z()[1];

  if (kind == AlgorithmKind::kUpSampling || kind == AlgorithmKind::kDownSampling) {
    const auto mode = kind == AlgorithmKind::kUpSampling ? RebalanceMode::kUp : RebalanceMode::kDown;
    ctx.train = std::make_shared<const Dataset>(rebalance(*train, mode, derive_seed(seed, "rebalance")));
  }

  Rng init = make_rng(seed, "model");
  const std::size_t input = train->dim + (kind == AlgorithmKind::kBackDoor ? 2 : 0);
  const std::size_t extra = kind == AlgorithmKind::kMTL ? settings.hidden : 0;
  ctx.model = ModelState::create(input, settings.hidden, settings.activation, init, extra);

  OptimizerConfig oc;
  oc.kind = settings.optimizer;
  oc.lr = as_real(ctx.hp, "lr");
  oc.weight_decay = as_real(ctx.hp, "weight_decay");
  if (kind == AlgorithmKind::kDANN || kind == AlgorithmKind::kCDANN) oc.beta1 = as_real(ctx.hp, "beta1");
  ctx.opt = OptimizerState(oc);
  ctx.batcher = std::make_unique<BalancedBatcher>(*ctx.train, settings.per_provenance, seed);

  switch (kind) {
    case AlgorithmKind::kDANN:
    case AlgorithmKind::kCDANN: {
      const bool conditional = kind == AlgorithmKind::kCDANN;
      ctx.disc = make_discriminator(ctx, settings.hidden + (conditional ? kLabelEmbeddingDim : 0));
      if (conditional) {
        Rng er = make_rng(seed, "label-embedding");
        ctx.label_embedding.resize(2, static_cast<Eigen::Index>(kLabelEmbeddingDim));
        for (Eigen::Index i = 0; i < ctx.label_embedding.size(); ++i)
          ctx.label_embedding.data()[i] = 2.0 * uniform01(er) - 1.0;
      }
      OptimizerConfig dc = oc;
      dc.weight_decay = as_real(ctx.hp, "disc_weight_decay");
      ctx.disc_opt = OptimizerState(dc);
      break;
    }
    case AlgorithmKind::kLfF: {
      Rng br = make_rng(seed, "biased-model");
      ctx.biased = ModelState::create(input, settings.hidden, settings.activation, br);
      ctx.biased_opt = OptimizerState(oc);
      break;
    }
    case AlgorithmKind::kGroupDRO:
      ctx.q = {0.5, 0.5};
      break;
    case AlgorithmKind::kMTL:
      ctx.ez = MatrixXd::Zero(2, static_cast<Eigen::Index>(settings.hidden));
      break;
    case AlgorithmKind::kJTT:
    case AlgorithmKind::kDFR: {
      const double f = as_real(ctx.hp, "first_stage_fraction");
      ctx.stage_boundary = std::clamp<long>(std::lround(f * static_cast<double>(ctx.total_steps)), 1, ctx.total_steps - 1);
      break;
    }
    case AlgorithmKind::kDualFilter:
      ctx.stage_boundary = settings.steps;
      ctx.initial = ctx.model;
      break;
    default:
      break;
  }
  return ctx;
}

Batch next_batch(TrainContext& ctx) { return ctx.batcher->next(); }

Diagnostics train_step(TrainContext& ctx, const Batch& batch) {
  batch.validate();
  if (batch.rows_with_z(0).empty() || batch.rows_with_z(1).empty())
    throw Error("provenance-starved", "batch must contain both provenances");
  using K = AlgorithmKind;
  Diagnostics d;
  switch (ctx.kind) {
    case K::kERM:
    case K::kUpSampling:
    case K::kDownSampling:
    case K::kJTT:
    case K::kDFR:
      d = step_erm(ctx, batch);
      break;
    case K::kBackDoor:
      d = step_backdoor(ctx, batch);
      break;
    case K::kMTL:
      d = step_mtl(ctx, batch);
      break;
    case K::kMixup:
      d = step_mixed(ctx, mixup_batch(batch, as_real(ctx.hp, "alpha"), ctx.rng));
      break;
    case K::kLISA:
      d = step_lisa(ctx, batch);
      break;
    case K::kCORAL:
      d = step_alignment(ctx, batch, true);
      break;
    case K::kMMD:
      d = step_alignment(ctx, batch, false);
      break;
    case K::kCAD:
      d = step_cad(ctx, batch);
      break;
    case K::kFish:
      d = step_fish(ctx, batch);
      break;
    case K::kDANN:
      d = step_adversarial(ctx, batch, false);
      break;
    case K::kCDANN:
      d = step_adversarial(ctx, batch, true);
      break;
    case K::kIRM:
      d = step_irm(ctx, batch);
      break;
    case K::kGroupDRO:
      d = step_groupdro(ctx, batch);
      break;
    case K::kLfF:
      d = step_lff(ctx, batch);
      break;
    case K::kDualFilter:
      d = step_dualfilter(ctx, batch);
      break;
  }
  ++ctx.step;
  d["stage"] = ctx.stage;
  if (ctx.stage == 1 && ctx.step == ctx.stage_boundary) advance_stage(ctx);
  return d;
}

void advance_stage(TrainContext& ctx) {
  if (!is_two_stage(ctx.kind)) throw argument_error(to_string(ctx.kind) + " has a single stage");
  if (ctx.stage != 1) throw argument_error("second stage already started");
  ctx.stage = 2;
  switch (ctx.kind) {
    case AlgorithmKind::kJTT: {
      JttAssembly a = jtt_assemble(ctx.model, *ctx.train, as_real(ctx.hp, "lambda_up"));
      ctx.example_weights = a.weights;
      ctx.error_set_size = a.error_set.size();
      Rng init = make_rng(ctx.seed, "model", 2);
      ctx.model = ModelState::create(ctx.model.input_dim, ctx.model.hidden, ctx.model.activation, init);
      ctx.opt.reset();
      reset_batcher(ctx, 2, ctx.example_weights);
      break;
    }
    case AlgorithmKind::kDFR:
      dfr_second_stage(ctx, *ctx.original_train, as_real(ctx.hp, "l2"), ctx.seed);
      break;
    case AlgorithmKind::kDualFilter: {
      ModelState prov = *ctx.initial;
      BalancedBatcher pb(*ctx.train, ctx.settings.per_provenance, derive_seed(ctx.seed, "provenance-batches"));
      train_copy(prov, pb, ctx.opt.config, as_int(ctx.hp, "warmup_steps"), true);
      const ParameterSet dt = parameter_delta(ctx.model.params, ctx.initial->params);
      const ParameterSet dp = parameter_delta(prov.params, ctx.initial->params);
      MaskTargets targets{as_bool(ctx.hp, "embedding_mask"), as_bool(ctx.hp, "classifier_mask")};
      ctx.dualfilter_mask = dualfilter_select(dt, dp, 1.0 - as_real(ctx.hp, "mask_threshold"),
                                              parse_mask_op(as_string(ctx.hp, "mask_type")), targets,
                                              as_real(ctx.hp, "ablation_rate"));
      ctx.masked_count = 0;
      for (const auto& p : ctx.dualfilter_mask.params) ctx.masked_count += static_cast<std::size_t>(p.value.sum());
      apply_mask(ctx.model.params, ctx.dualfilter_mask);
      for (std::size_t i = 0; i < ctx.model.params.params.size(); ++i) {
        const MatrixXd& m = ctx.dualfilter_mask.params[i].value;
        if (m.sum() > 0) ctx.model.params.params[i].frozen = m;
      }
      ctx.opt.reset();
      break;
    }
    default:
      break;
  }
}

ad::Var coral_penalty(const std::vector<ad::Var>& parts) {
  if (parts.size() < 2) throw argument_error("coral needs at least two groups");
  std::vector<ad::Var> covs;
  for (const auto& f : parts) {
    if (f.rows() < 2) throw Error("insufficient-group", "covariance needs at least two examples per group");
    ad::Var centered = ad::sub_row(f, ad::col_mean(f));
    covs.push_back(ad::scale(ad::matmul(ad::transpose(centered), centered), 1.0 / static_cast<double>(f.rows() - 1)));
  }
  const double d = static_cast<double>(parts[0].cols());
  ad::Var total;
  bool first = true;
  for (std::size_t i = 0; i < covs.size(); ++i)
    for (std::size_t j = i + 1; j < covs.size(); ++j) {
      ad::Var term = ad::scale(ad::sum(ad::square(ad::sub(covs[i], covs[j]))), 1.0 / (4.0 * d * d));
      total = first ? term : ad::add(total, term);
      first = false;
    }
  return total;
}

double coral_penalty(const std::vector<MatrixXd>& parts) {
  ad::Tape tape;
  std::vector<ad::Var> v;
  for (const auto& p : parts) v.push_back(tape.constant(p));
  return coral_penalty(v).scalar();
}

std::vector<double> median_bandwidths(const std::vector<MatrixXd>& parts) {
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& p : parts)
    for (Eigen::Index i = 0; i < p.rows(); ++i) rows.push_back(p.row(i));
  std::vector<double> dist;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) dist.push_back((rows[i] - rows[j]).norm());
  double med = 1.0;
  if (!dist.empty()) {
    const std::size_t mid = dist.size() / 2;
    std::nth_element(dist.begin(), dist.begin() + static_cast<long>(mid), dist.end());
    med = dist[mid];
  }
  if (!(med > 0.0) || !std::isfinite(med)) med = 1.0;
  return {0.5 * med, med, 2.0 * med};
}

namespace {

ad::Var mean_kernel(ad::Var a, ad::Var b, const std::vector<double>& bandwidths) {
  ad::Var sq = ad::sub(ad::add_col_row(ad::row_sum(ad::square(a)), ad::transpose(ad::row_sum(ad::square(b)))),
                       ad::scale(ad::matmul(a, ad::transpose(b)), 2.0));
  ad::Var total;
  for (std::size_t k = 0; k < bandwidths.size(); ++k) {
    const double s = bandwidths[k];
    ad::Var term = ad::mean(ad::exp(ad::scale(sq, -1.0 / (2.0 * s * s))));
    total = k == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, 1.0 / static_cast<double>(bandwidths.size()));
}

}  // namespace

ad::Var mmd_penalty(const std::vector<ad::Var>& parts, const std::vector<double>& bandwidths) {
  if (parts.size() < 2) throw argument_error("mmd needs at least two groups");
  if (bandwidths.empty()) throw argument_error("mmd needs at least one bandwidth");
  for (const auto& p : parts)
    if (p.rows() == 0) throw Error("insufficient-group", "mmd needs nonempty groups");
  ad::Var total;
  bool first = true;
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t j = i + 1; j < parts.size(); ++j) {
      ad::Var term = ad::sub(ad::add(mean_kernel(parts[i], parts[i], bandwidths), mean_kernel(parts[j], parts[j], bandwidths)),
                             ad::scale(mean_kernel(parts[i], parts[j], bandwidths), 2.0));
      total = first ? term : ad::add(total, term);
      first = false;
    }
  return total;
}

double mmd_penalty(const std::vector<MatrixXd>& parts, const std::vector<double>& bandwidths) {
  ad::Tape tape;
  std::vector<ad::Var> v;
  for (const auto& p : parts) v.push_back(tape.constant(p));
  return mmd_penalty(v, bandwidths.empty() ? median_bandwidths(parts) : bandwidths).scalar();
}

ad::Var irm_penalty(const std::vector<ad::Var>& logits_by_z, const std::vector<MatrixXd>& targets_by_z) {
  if (logits_by_z.empty() || logits_by_z.size() != targets_by_z.size()) throw argument_error("irm needs matching groups");
  ad::Tape& tape = *logits_by_z[0].tape;
  ad::Var total;
  for (std::size_t k = 0; k < logits_by_z.size(); ++k) {
    const ad::Var& l = logits_by_z[k];
    ad::Var residual = ad::sub(ad::softmax(l), tape.constant(targets_by_z[k]));
    ad::Var g = ad::scale(ad::dot(residual, l), 1.0 / static_cast<double>(l.rows()));
    ad::Var term = ad::square(g);
    total = k == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, 1.0 / static_cast<double>(logits_by_z.size()));
}

double irm_penalty(const std::vector<MatrixXd>& logits_by_z, const std::vector<MatrixXd>& targets_by_z) {
  ad::Tape tape;
  std::vector<ad::Var> v;
  for (const auto& l : logits_by_z) v.push_back(tape.constant(l));
  return irm_penalty(v, targets_by_z).scalar();
}

std::vector<double> groupdro_update(const std::vector<double>& q, const std::vector<double>& losses, double eta) {
  if (q.size() != losses.size() || q.empty()) throw argument_error("q and group losses differ in length");
  std::vector<double> next(q.size());
  double total = 0;
  for (std::size_t g = 0; g < q.size(); ++g) {
    next[g] = q[g] * std::exp(eta * losses[g]);
    total += next[g];
  }
  if (!std::isfinite(total) || !(total > 0)) throw divergence_error("group weights overflowed");
  for (auto& v : next) v /= total;
  return next;
}

Batch mixup_apply(const Batch& batch, const std::vector<MixPair>& pairs) {
  Batch out = batch;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    if (!(p.lambda >= 0.0 && p.lambda <= 1.0)) throw argument_error("mixing weight outside [0, 1]");
    const auto r = static_cast<Eigen::Index>(k);
    out.x.row(r) = p.lambda * batch.x.row(p.i) + (1.0 - p.lambda) * batch.x.row(p.j);
    out.targets.row(r) = p.lambda * batch.targets.row(p.i) + (1.0 - p.lambda) * batch.targets.row(p.j);
    out.weights(r) = batch.weights(p.i);
    out.y[k] = batch.y[static_cast<std::size_t>(p.i)];
    out.z[k] = batch.z[static_cast<std::size_t>(p.i)];
    out.source[k] = -1;
  }
  return out;
}

Batch mixup_batch(const Batch& batch, double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw argument_error("mixup alpha must be positive");
  std::vector<int> perm(batch.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<MixPair> pairs;
  for (std::size_t i = 0; i < batch.size(); ++i) pairs.push_back({static_cast<int>(i), perm[i], sample_beta(rng, alpha, alpha)});
  return mixup_apply(batch, pairs);
}

LisaSelection lisa_pair_selection(const Batch& batch, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw argument_error("intra-domain ratio must lie in [0, 1]");
  std::array<std::vector<int>, 4> cells;
  for (std::size_t i = 0; i < batch.size(); ++i) cells[static_cast<std::size_t>(2 * batch.y[i] + batch.z[i])].push_back(static_cast<int>(i));
  auto pick = [&](const std::vector<int>& pool) { return pool[std::min(static_cast<std::size_t>(uniform01(rng) * pool.size()), pool.size() - 1)]; };
  LisaSelection sel;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int y = batch.y[i], z = batch.z[i];
    const auto& intra_domain = cells[static_cast<std::size_t>(2 * (1 - y) + z)];
    const auto& intra_label = cells[static_cast<std::size_t>(2 * y + (1 - z))];
    const bool domain_first = uniform01(rng) < ratio;
    const auto& first = domain_first ? intra_domain : intra_label;
    const auto& second = domain_first ? intra_label : intra_domain;
    LisaPair p;
    p.i = static_cast<int>(i);
    if (!first.empty()) {
      p.j = pick(first);
      p.strategy = domain_first ? LisaPair::kIntraDomain : LisaPair::kIntraLabel;
    } else if (!second.empty()) {
      p.j = pick(second);
      p.strategy = domain_first ? LisaPair::kIntraLabel : LisaPair::kIntraDomain;
      ++sel.switched;
    } else {
      p.j = p.i;
      p.strategy = LisaPair::kPassThrough;
      ++sel.passthrough;
    }
    sel.pairs.push_back(p);
  }
  return sel;
}

Batch cutmix_apply(const Batch& batch, const std::vector<MixPair>& pairs, Rng& rng) {
  Batch out = batch;
  const Eigen::Index d = batch.x.cols();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const auto r = static_cast<Eigen::Index>(k);
    const auto len = static_cast<Eigen::Index>(std::lround((1.0 - p.lambda) * static_cast<double>(d)));
    const auto start = len < d ? static_cast<Eigen::Index>(uniform01(rng) * static_cast<double>(d - len + 1)) : 0;
    out.x.row(r) = batch.x.row(p.i);
    if (len > 0) out.x.row(r).segment(start, len) = batch.x.row(p.j).segment(start, len);
    const double lam = 1.0 - static_cast<double>(len) / static_cast<double>(d);
    out.targets.row(r) = lam * batch.targets.row(p.i) + (1.0 - lam) * batch.targets.row(p.j);
    out.weights(r) = batch.weights(p.i);
    out.y[k] = batch.y[static_cast<std::size_t>(p.i)];
    out.z[k] = batch.z[static_cast<std::size_t>(p.i)];
    out.source[k] = -1;
  }
  return out;
}

std::size_t discriminator_input_width(const TrainContext& ctx) {
  if (!ctx.disc) throw argument_error("context has no discriminator");
  return ctx.disc->input_dim();
}

AdversarialDiagnostics adversarial_disc_step(TrainContext& ctx, const Batch& batch, bool conditional) {
  if (!ctx.disc) throw argument_error("context has no discriminator");
  const double gp_weight = as_real(ctx.hp, "grad_penalty");
  ad::Tape tape;
  ParameterSet set = disc_parameters(ctx);
  std::vector<ad::Var> vars = bind(tape, set);
  std::vector<ad::Var> layer_vars(vars.begin(), vars.begin() + static_cast<long>(ctx.disc->params.params.size()));
  ad::Var emb = conditional ? vars.back() : tape.constant(MatrixXd());
  ad::Var features = tape.constant(forward(ctx.model, batch).features);
  MlpPass pass = disc_pass(ctx, layer_vars, features, emb, batch, conditional);
  const MatrixXd targets = one_hot(batch.z);
  const double n = static_cast<double>(batch.size());
  ad::Var loss = ad::scale(ad::sum(ad::cross_entropy_rows(pass.output, targets)), 1.0 / n);
  AdversarialDiagnostics out;
  out.disc_loss = loss.scalar();
  out.disc_accuracy = row_accuracy(pass.output.value(), batch.z);
  if (gp_weight > 0.0) {
    ad::Var g = mlp_input_gradient(layer_vars, pass, targets);
    ad::Var gp = ad::scale(ad::sum(ad::square(g)), 1.0 / n);
    out.grad_penalty = gp.scalar();
    loss = ad::add(loss, ad::scale(gp, gp_weight));
  }
  if (!std::isfinite(loss.scalar())) throw divergence_error("non-finite discriminator loss");
  tape.backward(loss);
  Gradients grads = collect_gradients(tape, vars, set);
  optimizer_step(set, *ctx.disc_opt, grads);
  for (std::size_t i = 0; i < ctx.disc->params.params.size(); ++i) ctx.disc->params.params[i].value = set.params[i].value;
  if (conditional) ctx.label_embedding = set.params.back().value;
  return out;
}

void fish_step(TrainContext& ctx, const std::vector<Batch>& batches, double meta_lr) {
  if (!(meta_lr >= 0.0 && meta_lr <= 1.0)) throw argument_error("meta learning rate must lie in [0, 1]");
  ModelState clone = ctx.model;
  OptimizerState inner(ctx.opt.config);
  for (const auto& b : batches) optimizer_step(clone.params, inner, loss_and_grad(clone, b).grads);
  for (std::size_t i = 0; i < ctx.model.params.params.size(); ++i) {
    MatrixXd& theta = ctx.model.params.params[i].value;
    theta = (1.0 - meta_lr) * theta + meta_lr * clone.params.params[i].value;
    if (!theta.allFinite()) throw divergence_error("non-finite parameter after meta update");
  }
  ++ctx.opt.step;
}

MatrixXd mtl_update(const MatrixXd& ez, const MatrixXd& features, const std::vector<int>& z, double rho) {
  MatrixXd next = ez;
  for (int g = 0; g < 2; ++g) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < z.size(); ++i)
      if (z[i] == g) rows.push_back(static_cast<int>(i));
    if (rows.empty()) continue;
    next.row(g) = rho * ez.row(g) + (1.0 - rho) * select(features, rows).colwise().mean();
  }
  return next;
}

std::vector<double> lff_weights(const std::vector<double>& lb, const std::vector<double>& ld) {
  if (lb.size() != ld.size()) throw argument_error("loss vectors differ in length");
  std::vector<double> w(lb.size());
  for (std::size_t i = 0; i < lb.size(); ++i) {
    if (lb[i] < 0 || ld[i] < 0) throw argument_error("losses must be nonnegative");
    const double s = lb[i] + ld[i];
    w[i] = s > 0 ? lb[i] / s : 0.5;
  }
  return w;
}

double JttAssembly::weight_mass() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

JttAssembly jtt_assemble(const ModelState& first_stage, const Dataset& train, double lambda_up) {
  if (!(lambda_up > 0.0)) throw argument_error("upweight must be positive");
  const MatrixXd p = model_proba(first_stage, dataset_matrix(train));
  JttAssembly a;
  a.weights.assign(train.examples.size(), 1.0);
  for (std::size_t i = 0; i < train.examples.size(); ++i) {
    const int pred = p(static_cast<Eigen::Index>(i), 1) > p(static_cast<Eigen::Index>(i), 0) ? 1 : 0;
    if (pred != train.examples[i].label) {
      a.error_set.push_back(i);
      a.weights[i] = lambda_up;
    }
  }
  return a;
}

void dfr_second_stage(TrainContext& ctx, const Dataset& train, double l2, std::uint64_t seed) {
  if (!(l2 >= 0.0)) throw argument_error("l2 strength must be nonnegative");
  ctx.train = std::make_shared<const Dataset>(rebalance(train, RebalanceMode::kDown, derive_seed(seed, "dfr-subset")));
  for (auto& p : ctx.model.params.params)
    if (p.name.rfind("featurizer.", 0) == 0) p.frozen = MatrixXd::Ones(p.value.rows(), p.value.cols());
  Rng rng = make_rng(seed, "dfr-classifier");
  ctx.model.reinit_classifier(rng);
  OptimizerConfig c = ctx.opt.config;
  c.weight_decay = l2;
  ctx.opt = OptimizerState(c);
  reset_batcher(ctx, 3);
}

MaskSetOp parse_mask_op(const std::string& letter) {
  if (letter == "A") return MaskSetOp::kIntersection;
  if (letter == "D") return MaskSetOp::kDifference;
  if (letter == "I") return MaskSetOp::kProvOnly;
  throw argument_error("unknown mask type '" + letter + "'");
}

ParameterSet parameter_delta(const ParameterSet& after, const ParameterSet& before) {
  ParameterSet d = after;
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    d.params[i].value = (after.params[i].value - before.params[i].value).cwiseAbs();
    d.params[i].frozen.resize(0, 0);
  }
  return d;
}

namespace {

std::vector<Eigen::Index> top_k(const MatrixXd& m, Eigen::Index k) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return m.data()[a] > m.data()[b]; });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

ParameterSet dualfilter_select(const ParameterSet& delta_task, const ParameterSet& delta_prov, double k_fraction,
                               MaskSetOp op, const MaskTargets& targets, double ablation_rate) {
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw argument_error("k_fraction must lie in (0, 1]");
  if (!(ablation_rate >= 0.0 && ablation_rate <= 1.0)) throw argument_error("ablation rate must lie in [0, 1]");
  ParameterSet mask = delta_task;
  for (std::size_t t = 0; t < mask.params.size(); ++t) {
    Parameter& p = mask.params[t];
    const MatrixXd& dt = delta_task.params[t].value;
    const MatrixXd& dp = delta_prov.params[t].value;
    p.value = MatrixXd::Zero(dt.rows(), dt.cols());
    p.frozen.resize(0, 0);
    const bool target = (targets.embedding && p.name == "featurizer.weight") || (targets.classifier && p.name == "classifier.weight");
    if (!target || dt.size() == 0) continue;
    const auto k = static_cast<Eigen::Index>(std::ceil(k_fraction * static_cast<double>(dt.size()) - 1e-9));
    const auto tk = top_k(dt, k);
    const auto pk = top_k(dp, k);
    std::vector<Eigen::Index> chosen;
    switch (op) {
      case MaskSetOp::kIntersection:
        std::set_intersection(tk.begin(), tk.end(), pk.begin(), pk.end(), std::back_inserter(chosen));
        break;
      case MaskSetOp::kDifference:
        std::set_difference(tk.begin(), tk.end(), pk.begin(), pk.end(), std::back_inserter(chosen));
        break;
      case MaskSetOp::kProvOnly:
        chosen = pk;
        break;
    }
    std::stable_sort(chosen.begin(), chosen.end(), [&](Eigen::Index a, Eigen::Index b) { return dp.data()[a] > dp.data()[b]; });
    chosen.resize(static_cast<std::size_t>(std::ceil(ablation_rate * static_cast<double>(chosen.size()) - 1e-9)));
    for (Eigen::Index i : chosen) p.value.data()[i] = 1.0;
  }
  return mask;
}

void apply_mask(ParameterSet& params, const ParameterSet& mask) {
  if (params.params.size() != mask.params.size()) throw argument_error("mask does not match parameters");
  for (std::size_t i = 0; i < params.params.size(); ++i) {
    MatrixXd& v = params.params[i].value;
    v = (mask.params[i].value.array() > 0.5).select(MatrixXd::Zero(v.rows(), v.cols()), v);
  }
}

double symmetric_gaussian_kl(const MatrixXd& a, const MatrixXd& b) {
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::RowVectorXd va = (a.rowwise() - ma).array().square().colwise().mean() + kVarianceFloor;
  const Eigen::RowVectorXd vb = (b.rowwise() - mb).array().square().colwise().mean() + kVarianceFloor;
  const auto dm2 = (ma - mb).array().square();
  return 0.5 * (va.array() / vb.array() + vb.array() / va.array() + dm2 * (1.0 / va.array() + 1.0 / vb.array()) - 2.0).sum();
}

CadTerms cad_objective(ad::Var features, const std::vector<int>& labels, const std::vector<int>& z, double lambda,
                       double temperature) {
  if (!(temperature > 0.0)) throw argument_error("temperature must be positive");
  ad::Tape& tape = *features.tape;
  const auto n = features.rows();
  CadTerms out;

  ad::Var zn = ad::l2_normalize_rows(features);
  ad::Var s = ad::scale(ad::matmul(zn, ad::transpose(zn)), 1.0 / temperature);
  MatrixXd offdiag = MatrixXd::Ones(n, n) - MatrixXd::Identity(n, n);
  ad::Var lse = ad::log(ad::row_sum(ad::mul(ad::exp(s), tape.constant(offdiag))));
  ad::Var logprob = ad::sub(s, ad::matmul(lse, tape.constant(MatrixXd::Ones(1, n))));
  MatrixXd w = MatrixXd::Zero(n, n);
  std::size_t anchors = 0;
  std::vector<int> positives(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) ++positives[static_cast<std::size_t>(i)];
  for (Eigen::Index i = 0; i < n; ++i) anchors += positives[static_cast<std::size_t>(i)] > 0 ? 1 : 0;
  out.skipped_anchors = static_cast<std::size_t>(n) - anchors;
  if (anchors > 0) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const int np = positives[static_cast<std::size_t>(i)];
      if (np == 0) continue;
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)])
          w(i, j) = 1.0 / (static_cast<double>(np) * static_cast<double>(anchors));
    }
    out.contrastive = ad::scale(ad::dot(logprob, tape.constant(w)), -1.0);
  } else {
    out.contrastive = tape.constant(MatrixXd::Zero(1, 1));
  }

  std::vector<int> r0, r1;
  for (std::size_t i = 0; i < z.size(); ++i) (z[i] == 0 ? r0 : r1).push_back(static_cast<int>(i));
  if (r0.empty() || r1.empty()) throw Error("provenance-starved", "bottleneck needs both provenances");
  auto fit = [&](const std::vector<int>& rows) {
    ad::Var f = ad::select_rows(features, rows);
    ad::Var m = ad::col_mean(f);
    ad::Var v = ad::add_scalar(ad::col_mean(ad::square(ad::sub_row(f, m))), kVarianceFloor);
    return std::pair{m, v};
  };
  auto [m0, v0] = fit(r0);
  auto [m1, v1] = fit(r1);
  ad::Var dm2 = ad::square(ad::sub(m0, m1));
  ad::Var terms = ad::add(ad::add(ad::div(v0, v1), ad::div(v1, v0)), ad::mul(dm2, ad::add(ad::recip(v0), ad::recip(v1))));
  out.bottleneck = ad::scale(ad::add_scalar(ad::sum(terms), -2.0 * static_cast<double>(features.cols())), 0.5);
  out.objective = ad::add(out.contrastive, ad::scale(out.bottleneck, lambda));
  return out;
}

}  // namespace provshift
