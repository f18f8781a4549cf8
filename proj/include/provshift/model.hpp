#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <array>
#include <string>
#include <vector>

#include "provshift/autodiff.hpp"
#include "provshift/datamodel.hpp"
#include "provshift/random.hpp"

namespace provshift {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { kTanh, kRelu, kLinear };
std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

struct Parameter {
  std::string name;
  MatrixXd value;
  MatrixXd frozen;  // empty: fully trainable; otherwise 1.0 marks a frozen entry
};

using Gradients = std::vector<MatrixXd>;

struct ParameterSet {
  std::vector<Parameter> params;

  std::size_t count() const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  bool operator==(const ParameterSet& other) const;  // values and masks, bitwise
};

// FNV-1a over the raw bytes of the named tensors (all tensors when empty).
std::uint64_t parameter_hash(const ParameterSet& set, const std::vector<std::string>& names = {});

std::vector<ad::Var> bind(ad::Tape& tape, const ParameterSet& set);
Gradients collect_gradients(const ad::Tape& tape, const std::vector<ad::Var>& bound, const ParameterSet& set);

// f = classifier(featurizer(x)); featurizer is one dense layer d_in -> hidden
// followed by the activation, classifier is linear classifier_in -> 2.
// classifier_in exceeds hidden when extra per-example channels (the MTL
// domain embedding) are concatenated to the features.
struct ModelState {
  Activation activation = Activation::kTanh;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::size_t classifier_in = 0;
  ParameterSet params;  // featurizer.weight, featurizer.bias, classifier.weight, classifier.bias

  static ModelState create(std::size_t input_dim, std::size_t hidden, Activation activation, Rng& rng,
                           std::size_t classifier_extra = 0);
  std::size_t parameter_count() const { return params.count(); }
  void reinit_classifier(Rng& rng);
  bool operator==(const ModelState& other) const = default;
};

// Bound featurizer/classifier Vars for one tape.
struct BoundModel {
  std::vector<ad::Var> vars;
  Activation activation = Activation::kTanh;

  ad::Var featurize(ad::Var x) const;
  ad::Var classify(ad::Var features) const;
};

BoundModel bind_model(ad::Tape& tape, const ModelState& state, bool trainable = true);

struct Batch {
  MatrixXd x;               // n x d
  std::vector<int> y;
  std::vector<int> z;
  MatrixXd targets;         // n x 2, one-hot unless mixed
  VectorXd weights;         // per-example, nonnegative
  std::vector<long> source; // row in the source dataset, -1 for synthesized rows

  std::size_t size() const { return y.size(); }
  std::vector<int> rows_with_z(int z_value) const;
  void validate() const;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& rows, const std::vector<double>* weights = nullptr);
Batch make_batch(const Dataset& data);
MatrixXd one_hot(const std::vector<int>& labels);

struct ForwardResult {
  MatrixXd features;
  MatrixXd logits;
  MatrixXd probabilities;
};

// Throws "non-finite-input".
ForwardResult forward(const ModelState& state, const Batch& batch);

struct LossKind {
  enum Kind { kCrossEntropy, kGce } kind = kCrossEntropy;
  double q = 0.7;
  static LossKind ce() { return {}; }
  static LossKind gce(double q) { return {kGce, q}; }
};

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

// Weighted mean of per-example losses and its exact gradient.
LossAndGrad loss_and_grad(const ModelState& state, const Batch& batch, LossKind kind = LossKind::ce());

// Coefficients w_i / sum(w) used for weighted-mean losses.
VectorXd mean_coefficients(const VectorXd& weights);

struct OptimizerConfig {
  enum Kind { kSgd, kAdam } kind = kAdam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  OptimizerConfig config;
  std::vector<MatrixXd> m;
  std::vector<MatrixXd> v;
  long step = 0;

  explicit OptimizerState(OptimizerConfig c = {}) : config(c) {}
  void reset() {
    m.clear();
    v.clear();
    step = 0;
  }
  bool operator==(const OptimizerState& other) const;
};

// One update. Weight decay is decoupled and applied in proximal form,
// theta <- (theta - lr * update) / (1 + lr * weight_decay), which stays
// stable for arbitrarily large decay. Frozen entries are left untouched.
// Throws divergence_error on non-finite gradients or parameters.
void optimizer_step(ParameterSet& params, OptimizerState& optimizer, const Gradients& grads);

// Provenance-balanced minibatches: each batch holds exactly per_provenance
// rows of z = 0 followed by per_provenance rows of z = 1. Each provenance
// walks its own shuffled permutation and reshuffles on exhaustion, so the
// minority provenance wraps around within an epoch of the majority.
class BalancedBatcher {
 public:
  BalancedBatcher(const Dataset& data, std::size_t per_provenance, std::uint64_t seed,
                  std::vector<double> weights = {});
  Batch next();
  std::vector<std::size_t> next_rows();

 private:
  const Dataset* data_;
  std::size_t per_provenance_;
  std::vector<double> weights_;
  std::array<std::vector<std::size_t>, 2> members_;
  std::array<std::vector<std::size_t>, 2> order_;
  std::array<std::size_t, 2> cursor_{0, 0};
  Rng rng_;
};

// A generic ReLU MLP with optional dropout, used for the adversarial
// provenance discriminators. Depth counts dense layers (>= 2).
struct Mlp {
  ParameterSet params;
  double dropout = 0.0;

  static Mlp create(std::size_t input, std::size_t width, std::size_t depth, std::size_t output, double dropout, Rng& rng);
  std::size_t layers() const { return params.params.size() / 2; }
  std::size_t input_dim() const { return static_cast<std::size_t>(params.params[0].value.rows()); }
};

struct MlpPass {
  ad::Var output;
  std::vector<MatrixXd> gates;  // per hidden layer: relu'(pre) * dropout scale
};

// Forward pass; dropout masks are drawn from rng when training is set.
MlpPass mlp_forward(const std::vector<ad::Var>& bound, ad::Var input, double dropout, bool training, Rng* rng);
// Gradient of sum_i CE(mlp(input)_i, targets_i) with respect to the input,
// expressed as a differentiable graph in the MLP weights.
ad::Var mlp_input_gradient(const std::vector<ad::Var>& bound, const MlpPass& pass, const MatrixXd& targets);

nlohmann::json to_json(const ParameterSet& set);
ParameterSet parameter_set_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelState& state);
ModelState model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const OptimizerState& opt);
OptimizerState optimizer_from_json(const nlohmann::json& j);

// Versioned text checkpoint of a model plus its optimizer state.
struct Checkpoint {
  ModelState model;
  OptimizerState optimizer;
  long step = 0;
  nlohmann::json extra;  // inference metadata owned by the caller
};
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace provshift
