#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "provshift/autodiff.hpp"
#include "provshift/datamodel.hpp"
#include "provshift/hparams.hpp"
#include "provshift/model.hpp"

namespace provshift {

struct TrainSettings {
  std::size_t hidden = 32;
  Activation activation = Activation::kTanh;
  std::size_t per_provenance = 32;
  // Step budget of a single-stage method; two-stage methods run twice this.
  long steps = 500;
  OptimizerConfig::Kind optimizer = OptimizerConfig::kAdam;
};

long planned_steps(AlgorithmKind kind, long steps);

using Diagnostics = std::map<std::string, double>;

// How a trained context turns features into probabilities.
struct ModelPredictor {
  enum Mode { kStandard, kMTL, kBackDoor } mode = kStandard;
  ModelState model;
  VectorXd train_pz = VectorXd::Constant(2, 0.5);  // BackDoor marginal over z
};

MatrixXd predict_proba(const ModelPredictor& predictor, const Dataset& data);
nlohmann::json to_json(const ModelPredictor& p);
ModelPredictor predictor_from_json(const nlohmann::json& j);

struct TrainContext {
  AlgorithmKind kind = AlgorithmKind::kERM;
  HParams hp;
  TrainSettings settings;
  std::uint64_t seed = 0;

  ModelState model;
  OptimizerState opt;
  Rng rng;  // mixing draws, dropout masks, pair selection

  std::shared_ptr<const Dataset> train;  // the data batches are drawn from
  std::shared_ptr<const Dataset> original_train;
  std::unique_ptr<BalancedBatcher> batcher;

  long step = 0;
  long total_steps = 0;
  long stage_boundary = -1;  // -1 for single-stage methods
  int stage = 1;

  // DANN / CDANN
  std::optional<Mlp> disc;
  MatrixXd label_embedding;  // 2 x k, trained with the discriminator (CDANN)
  std::optional<OptimizerState> disc_opt;
  // LfF
  std::optional<ModelState> biased;
  std::optional<OptimizerState> biased_opt;
  // GroupDRO, one weight per provenance
  std::vector<double> q;
  // MTL, one row per provenance
  MatrixXd ez;
  // JTT
  std::vector<double> example_weights;
  std::size_t error_set_size = 0;
  // DualFilter
  std::optional<ModelState> initial;
  ParameterSet dualfilter_mask;
  std::size_t masked_count = 0;
  // BackDoor
  VectorXd train_pz = VectorXd::Constant(2, 0.5);
};

TrainContext make_context(AlgorithmKind kind, const HParams& hp, std::shared_ptr<const Dataset> train,
                          const TrainSettings& settings, std::uint64_t seed, Profile profile = Profile::kDesk);
Batch next_batch(TrainContext& ctx);
// One optimizer step on the main model (plus the method's auxiliary
// updates). Switches stage right after the step that reaches the boundary.
Diagnostics train_step(TrainContext& ctx, const Batch& batch);
void advance_stage(TrainContext& ctx);
ModelPredictor make_predictor(const TrainContext& ctx);

// Penalties over per-provenance feature blocks.
ad::Var coral_penalty(const std::vector<ad::Var>& features_by_z);
double coral_penalty(const std::vector<MatrixXd>& features_by_z);
std::vector<double> median_bandwidths(const std::vector<MatrixXd>& features_by_z);
ad::Var mmd_penalty(const std::vector<ad::Var>& features_by_z, const std::vector<double>& bandwidths);
double mmd_penalty(const std::vector<MatrixXd>& features_by_z, const std::vector<double>& bandwidths = {});
// Squared derivative of the mean risk with respect to a scalar multiplier on
// the logits, averaged over provenances.
ad::Var irm_penalty(const std::vector<ad::Var>& logits_by_z, const std::vector<MatrixXd>& targets_by_z);
double irm_penalty(const std::vector<MatrixXd>& logits_by_z, const std::vector<MatrixXd>& targets_by_z);

std::vector<double> groupdro_update(const std::vector<double>& q, const std::vector<double>& group_losses, double eta);

struct MixPair {
  int i = 0;
  int j = 0;
  double lambda = 1.0;
};
Batch mixup_apply(const Batch& batch, const std::vector<MixPair>& pairs);
Batch mixup_batch(const Batch& batch, double alpha, Rng& rng);

struct LisaPair {
  int i = 0;
  int j = 0;
  enum Strategy { kIntraDomain, kIntraLabel, kPassThrough } strategy = kPassThrough;
};
struct LisaSelection {
  std::vector<LisaPair> pairs;
  std::size_t switched = 0;     // drawn strategy had no partner, other one used
  std::size_t passthrough = 0;  // neither strategy had a partner
};
LisaSelection lisa_pair_selection(const Batch& batch, double intra_domain_ratio, Rng& rng);
// Cut-mix for dense vectors: a contiguous run of (1 - lambda) * d features
// comes from the partner; labels mix by the realized fraction.
Batch cutmix_apply(const Batch& batch, const std::vector<MixPair>& pairs, Rng& rng);

struct AdversarialDiagnostics {
  double disc_loss = 0.0;
  double disc_accuracy = 0.0;
  double grad_penalty = 0.0;
};
AdversarialDiagnostics adversarial_disc_step(TrainContext& ctx, const Batch& batch, bool conditional);
std::size_t discriminator_input_width(const TrainContext& ctx);

void fish_step(TrainContext& ctx, const std::vector<Batch>& per_provenance_batches, double meta_lr);

// Updated provenance embeddings e_z <- rho * e_z + (1 - rho) * mean(features_z).
MatrixXd mtl_update(const MatrixXd& ez, const MatrixXd& features, const std::vector<int>& z, double rho);

std::vector<double> lff_weights(const std::vector<double>& biased_losses, const std::vector<double>& debiased_losses);

struct JttAssembly {
  std::vector<double> weights;
  std::vector<std::size_t> error_set;
  double weight_mass() const;
};
JttAssembly jtt_assemble(const ModelState& first_stage, const Dataset& train, double lambda_up);

// Freezes the featurizer, reinitializes the classifier, and retrains it on a
// down-sampled joint-balanced copy of `train` with proximal l2 decay.
void dfr_second_stage(TrainContext& ctx, const Dataset& train, double l2, std::uint64_t seed);

// p(y | x) = sum_z p(y | x, z) train_pz[z], never reading the example's z.
MatrixXd backdoor_predict(const ModelState& model, const MatrixXd& x, const VectorXd& train_pz);

enum class MaskSetOp { kIntersection, kDifference, kProvOnly };
MaskSetOp parse_mask_op(const std::string& letter);
struct MaskTargets {
  bool embedding = true;
  bool classifier = false;
};
// Returns 1.0 at masked locations, per tensor of `delta_task`.
ParameterSet dualfilter_select(const ParameterSet& delta_task, const ParameterSet& delta_prov, double k_fraction,
                               MaskSetOp op, const MaskTargets& targets, double ablation_rate = 1.0);
void apply_mask(ParameterSet& params, const ParameterSet& mask);
ParameterSet parameter_delta(const ParameterSet& after, const ParameterSet& before);

struct CadTerms {
  ad::Var contrastive;
  ad::Var bottleneck;
  ad::Var objective;
  std::size_t skipped_anchors = 0;
};
CadTerms cad_objective(ad::Var features, const std::vector<int>& labels, const std::vector<int>& z, double lambda,
                       double temperature);
double symmetric_gaussian_kl(const MatrixXd& a, const MatrixXd& b);

}  // namespace provshift
