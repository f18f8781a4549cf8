#include "provshift/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "provshift/error.hpp"

namespace provshift {

namespace {

constexpr int kCheckpointVersion = 1;

MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  return m;
}

bool bitwise_equal(const MatrixXd& a, const MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool all_finite(const MatrixXd& m) { return m.allFinite(); }

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error("parse-error", "matrix payload size mismatch");
  MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[k++].get<double>();
  return m;
}

ad::Var activate(ad::Var pre, Activation a) {
  switch (a) {
    case Activation::kTanh:
      return ad::tanh(pre);
    case Activation::kRelu:
      return ad::relu(pre);
    case Activation::kLinear:
      return pre;
  }
  return pre;
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh:
      return "tanh";
    case Activation::kRelu:
      return "relu";
    case Activation::kLinear:
      return "linear";
  }
  return "tanh";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "linear") return Activation::kLinear;
  throw argument_error("unknown activation '" + name + "'");
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name == name) return i;
  throw argument_error("no parameter named '" + name + "'");
}

Parameter& ParameterSet::at(const std::string& name) { return params[index_of(name)]; }
const Parameter& ParameterSet::at(const std::string& name) const { return params[index_of(name)]; }

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (params.size() != other.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != other.params[i].name) return false;
    if (!bitwise_equal(params[i].value, other.params[i].value)) return false;
    if (!bitwise_equal(params[i].frozen, other.params[i].frozen)) return false;
  }
  return true;
}

std::uint64_t parameter_hash(const ParameterSet& set, const std::vector<std::string>& names) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : set.params) {
    if (!names.empty() && std::find(names.begin(), names.end(), p.name) == names.end()) continue;
    h = fnv1a64(p.name, h);
    const auto* bytes = reinterpret_cast<const char*>(p.value.data());
    h = fnv1a64(std::string_view(bytes, sizeof(double) * static_cast<std::size_t>(p.value.size())), h);
  }
  return h;
}

std::vector<ad::Var> bind(ad::Tape& tape, const ParameterSet& set) {
  std::vector<ad::Var> out;
  out.reserve(set.params.size());
  for (const auto& p : set.params) out.push_back(tape.variable(p.value));
  return out;
}

Gradients collect_gradients(const ad::Tape& tape, const std::vector<ad::Var>& bound, const ParameterSet& set) {
  Gradients g;
  g.reserve(bound.size());
  for (std::size_t i = 0; i < bound.size(); ++i) {
    const MatrixXd& gi = tape.grad(bound[i]);
    if (gi.size() == 0)
      g.push_back(MatrixXd::Zero(set.params[i].value.rows(), set.params[i].value.cols()));
    else
      g.push_back(gi);
  }
  return g;
}

ModelState ModelState::create(std::size_t input_dim, std::size_t hidden, Activation activation, Rng& rng,
                              std::size_t classifier_extra) {
  if (input_dim == 0 || hidden == 0) throw argument_error("model dimensions must be positive");
  ModelState s;
  s.activation = activation;
  s.input_dim = input_dim;
  s.hidden = hidden;
  s.classifier_in = hidden + classifier_extra;
  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto h = static_cast<Eigen::Index>(hidden);
  const auto c = static_cast<Eigen::Index>(s.classifier_in);
  const double b1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(s.classifier_in));
  s.params.params.push_back({"featurizer.weight", uniform_matrix(d, h, b1, rng), {}});
  s.params.params.push_back({"featurizer.bias", uniform_matrix(1, h, b1, rng), {}});
  s.params.params.push_back({"classifier.weight", uniform_matrix(c, 2, b2, rng), {}});
  s.params.params.push_back({"classifier.bias", uniform_matrix(1, 2, b2, rng), {}});
  return s;
}

void ModelState::reinit_classifier(Rng& rng) {
  const double b2 = 1.0 / std::sqrt(static_cast<double>(classifier_in));
  auto& w = params.at("classifier.weight");
  auto& b = params.at("classifier.bias");
  w.value = uniform_matrix(w.value.rows(), w.value.cols(), b2, rng);
  b.value = uniform_matrix(1, 2, b2, rng);
  w.frozen.resize(0, 0);
  b.frozen.resize(0, 0);
}

ad::Var BoundModel::featurize(ad::Var x) const {
  return activate(ad::add_row(ad::matmul(x, vars[0]), vars[1]), activation);
}

ad::Var BoundModel::classify(ad::Var features) const {
  return ad::add_row(ad::matmul(features, vars[2]), vars[3]);
}

BoundModel bind_model(ad::Tape& tape, const ModelState& state, bool trainable) {
  BoundModel bm;
  bm.activation = state.activation;
  for (const auto& p : state.params.params) bm.vars.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  return bm;
}

std::vector<int> Batch::rows_with_z(int z_value) const {
  std::vector<int> rows;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (z[i] == z_value) rows.push_back(static_cast<int>(i));
  return rows;
}

void Batch::validate() const {
  const auto n = static_cast<Eigen::Index>(y.size());
  if (x.rows() != n || static_cast<Eigen::Index>(z.size()) != n || targets.rows() != n || weights.size() != n)
    throw argument_error("batch fields have inconsistent row counts");
  if ((weights.array() < 0.0).any()) throw argument_error("batch weights must be nonnegative");
}

MatrixXd one_hot(const std::vector<int>& labels) {
  MatrixXd t = MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), 2);
  for (std::size_t i = 0; i < labels.size(); ++i) t(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return t;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& rows, const std::vector<double>* weights) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(rows.size());
  b.x.resize(n, static_cast<Eigen::Index>(data.dim));
  b.weights.resize(n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Example& ex = data.examples[rows[i]];
    for (std::size_t k = 0; k < data.dim; ++k) b.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = ex.features[k];
    b.y.push_back(ex.label);
    b.z.push_back(ex.provenance);
    b.weights(static_cast<Eigen::Index>(i)) = weights ? (*weights)[rows[i]] : 1.0;
    b.source.push_back(static_cast<long>(rows[i]));
  }
  b.targets = one_hot(b.y);
  return b;
}

Batch make_batch(const Dataset& data) {
  std::vector<std::size_t> rows(data.examples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return make_batch(data, rows);
}

ForwardResult forward(const ModelState& state, const Batch& batch) {
  if (!batch.x.allFinite()) throw Error("non-finite-input", "batch features contain NaN or infinity");
  if (batch.x.cols() != static_cast<Eigen::Index>(state.input_dim))
    throw argument_error("feature width does not match the model input dimension");
  if (state.classifier_in != state.hidden) throw argument_error("model expects extra classifier channels");
  ad::Tape tape;
  BoundModel m = bind_model(tape, state, false);
  ad::Var h = m.featurize(tape.constant(batch.x));
  ad::Var logits = m.classify(h);
  ForwardResult r;
  r.features = h.value();
  r.logits = logits.value();
  r.probabilities = ad::softmax(logits).value();
  return r;
}

VectorXd mean_coefficients(const VectorXd& weights) {
  const double total = weights.sum();
  if (!(total > 0.0)) throw argument_error("batch weights sum to zero");
  return weights / total;
}

LossAndGrad loss_and_grad(const ModelState& state, const Batch& batch, LossKind kind) {
  if (kind.kind == LossKind::kGce && !(kind.q > 0.0 && kind.q <= 1.0)) throw argument_error("gce q must lie in (0, 1]");
  if (!batch.x.allFinite()) throw Error("non-finite-input", "batch features contain NaN or infinity");
  ad::Tape tape;
  BoundModel m = bind_model(tape, state);
  ad::Var logits = m.classify(m.featurize(tape.constant(batch.x)));
  ad::Var per_row = kind.kind == LossKind::kGce ? ad::gce_rows(logits, batch.y, kind.q)
                                                : ad::cross_entropy_rows(logits, batch.targets);
  ad::Var loss = ad::weighted_sum_rows(per_row, mean_coefficients(batch.weights));
  tape.backward(loss);
  return {loss.scalar(), collect_gradients(tape, m.vars, state.params)};
}

bool OptimizerState::operator==(const OptimizerState& other) const {
  if (step != other.step || m.size() != other.m.size() || v.size() != other.v.size()) return false;
  if (config.kind != other.config.kind || config.lr != other.config.lr || config.weight_decay != other.config.weight_decay ||
      config.beta1 != other.config.beta1 || config.beta2 != other.config.beta2 || config.eps != other.config.eps)
    return false;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!bitwise_equal(m[i], other.m[i])) return false;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!bitwise_equal(v[i], other.v[i])) return false;
  return true;
}

void optimizer_step(ParameterSet& params, OptimizerState& opt, const Gradients& grads) {
  if (grads.size() != params.params.size()) throw argument_error("gradient count does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params.params[i].value.rows() || grads[i].cols() != params.params[i].value.cols())
      throw argument_error("gradient shape mismatch for " + params.params[i].name);
    if (!all_finite(grads[i])) throw divergence_error("non-finite gradient for " + params.params[i].name);
  }
  const auto& c = opt.config;
  const bool adam = c.kind == OptimizerConfig::kAdam;
  if (adam && opt.m.empty()) {
    for (const auto& p : params.params) {
      opt.m.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
      opt.v.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
    }
  }
  ++opt.step;
  const double shrink = 1.0 / (1.0 + c.lr * c.weight_decay);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Parameter& p = params.params[i];
    const bool masked = p.frozen.size() != 0;
    MatrixXd update;
    if (adam) {
      opt.m[i] = c.beta1 * opt.m[i] + (1.0 - c.beta1) * grads[i];
      opt.v[i] = c.beta2 * opt.v[i] + (1.0 - c.beta2) * grads[i].cwiseProduct(grads[i]);
      update = (opt.m[i].array() / bc1) / ((opt.v[i].array() / bc2).sqrt() + c.eps);
    } else {
      update = grads[i];
    }
    MatrixXd next = (p.value - c.lr * update) * shrink;
    if (masked) next = (p.frozen.array() > 0.5).select(p.value, next);
    if (!all_finite(next)) throw divergence_error("non-finite parameter " + p.name);
    p.value = std::move(next);
  }
}

BalancedBatcher::BalancedBatcher(const Dataset& data, std::size_t per_provenance, std::uint64_t seed,
                                 std::vector<double> weights)
    : data_(&data), per_provenance_(per_provenance), weights_(std::move(weights)), rng_(derive_seed(seed, "batches")) {
  if (per_provenance == 0) throw argument_error("batch size per provenance must be positive");
  if (!weights_.empty() && weights_.size() != data.examples.size()) throw argument_error("weight count mismatch");
  for (std::size_t i = 0; i < data.examples.size(); ++i) members_[static_cast<std::size_t>(data.examples[i].provenance)].push_back(i);
  for (int z = 0; z < 2; ++z) {
    if (members_[static_cast<std::size_t>(z)].empty())
      throw Error("provenance-starved", "no examples with z=" + std::to_string(z));
    order_[static_cast<std::size_t>(z)] = members_[static_cast<std::size_t>(z)];
    std::shuffle(order_[static_cast<std::size_t>(z)].begin(), order_[static_cast<std::size_t>(z)].end(), rng_);
  }
}

std::vector<std::size_t> BalancedBatcher::next_rows() {
  std::vector<std::size_t> rows;
  rows.reserve(2 * per_provenance_);
  for (std::size_t z = 0; z < 2; ++z) {
    for (std::size_t k = 0; k < per_provenance_; ++k) {
      if (cursor_[z] == order_[z].size()) {
        std::shuffle(order_[z].begin(), order_[z].end(), rng_);
        cursor_[z] = 0;
      }
      rows.push_back(order_[z][cursor_[z]++]);
    }
  }
  return rows;
}

Batch BalancedBatcher::next() {
  const auto rows = next_rows();
  return make_batch(*data_, rows, weights_.empty() ? nullptr : &weights_);
}

Mlp Mlp::create(std::size_t input, std::size_t width, std::size_t depth, std::size_t output, double dropout, Rng& rng) {
  if (depth < 2) throw argument_error("mlp depth must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw argument_error("dropout must lie in [0, 1)");
  Mlp mlp;
  mlp.dropout = dropout;
  std::size_t fan_in = input;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t fan_out = l + 1 == depth ? output : width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const std::string prefix = "mlp.l" + std::to_string(l);
    mlp.params.params.push_back({prefix + ".weight",
                                 uniform_matrix(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out), bound, rng), {}});
    mlp.params.params.push_back({prefix + ".bias", uniform_matrix(1, static_cast<Eigen::Index>(fan_out), bound, rng), {}});
    fan_in = fan_out;
  }
  return mlp;
}

MlpPass mlp_forward(const std::vector<ad::Var>& bound, ad::Var input, double dropout, bool training, Rng* rng) {
  MlpPass pass;
  ad::Var a = input;
  ad::Tape& tape = *input.tape;
  const std::size_t layers = bound.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    ad::Var pre = ad::add_row(ad::matmul(a, bound[2 * l]), bound[2 * l + 1]);
    if (l + 1 == layers) {
      pass.output = pre;
      break;
    }
    MatrixXd gate = (pre.value().array() > 0.0).cast<double>().matrix();
    if (training && dropout > 0.0) {
      const double keep = 1.0 / (1.0 - dropout);
      for (Eigen::Index i = 0; i < gate.rows(); ++i)
        for (Eigen::Index j = 0; j < gate.cols(); ++j) gate(i, j) *= uniform01(*rng) < dropout ? 0.0 : keep;
    }
    a = ad::mul(pre, tape.constant(gate));
    pass.gates.push_back(std::move(gate));
  }
  return pass;
}

ad::Var mlp_input_gradient(const std::vector<ad::Var>& bound, const MlpPass& pass, const MatrixXd& targets) {
  ad::Tape& tape = *pass.output.tape;
  ad::Var g = ad::sub(ad::softmax(pass.output), tape.constant(targets));
  const std::size_t layers = bound.size() / 2;
  for (std::size_t l = layers; l-- > 0;) {
    g = ad::matmul(g, ad::transpose(bound[2 * l]));
    if (l > 0) g = ad::mul(g, tape.constant(pass.gates[l - 1]));
  }
  return g;
}

nlohmann::json to_json(const ParameterSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : set.params) {
    nlohmann::json e = {{"name", p.name}, {"value", matrix_to_json(p.value)}};
    if (p.frozen.size() != 0) e["frozen"] = matrix_to_json(p.frozen);
    arr.push_back(e);
  }
  return arr;
}

ParameterSet parameter_set_from_json(const nlohmann::json& j) {
  ParameterSet set;
  for (const auto& e : j) {
    Parameter p;
    p.name = e.at("name").get<std::string>();
    p.value = matrix_from_json(e.at("value"));
    if (e.contains("frozen")) p.frozen = matrix_from_json(e.at("frozen"));
    set.params.push_back(std::move(p));
  }
  return set;
}

nlohmann::json to_json(const ModelState& s) {
  return {{"activation", to_string(s.activation)},
          {"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"classifier_in", s.classifier_in},
          {"params", to_json(s.params)}};
}

ModelState model_from_json(const nlohmann::json& j) {
  ModelState s;
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.classifier_in = j.at("classifier_in").get<std::size_t>();
  s.params = parameter_set_from_json(j.at("params"));
  return s;
}

nlohmann::json to_json(const OptimizerState& o) {
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (const auto& x : o.m) m.push_back(matrix_to_json(x));
  for (const auto& x : o.v) v.push_back(matrix_to_json(x));
  return {{"kind", o.config.kind == OptimizerConfig::kAdam ? "adam" : "sgd"},
          {"lr", o.config.lr},
          {"weight_decay", o.config.weight_decay},
          {"beta1", o.config.beta1},
          {"beta2", o.config.beta2},
          {"eps", o.config.eps},
          {"step", o.step},
          {"m", m},
          {"v", v}};
}

OptimizerState optimizer_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "adam" && kind != "sgd") throw Error("parse-error", "unknown optimizer kind '" + kind + "'");
  c.kind = kind == "adam" ? OptimizerConfig::kAdam : OptimizerConfig::kSgd;
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  OptimizerState o(c);
  o.step = j.at("step").get<long>();
  for (const auto& x : j.at("m")) o.m.push_back(matrix_from_json(x));
  for (const auto& x : j.at("v")) o.v.push_back(matrix_from_json(x));
  return o;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json j = {{"format", "provshift-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"step", ckpt.step},
                      {"model", to_json(ckpt.model)},
                      {"optimizer", to_json(ckpt.optimizer)},
                      {"extra", ckpt.extra}};
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write " + path.string());
  out << j.dump() << "\n";
  if (!out) throw Error("io-error", "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse-error", path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "provshift-checkpoint" || j.value("version", 0) != kCheckpointVersion)
    throw Error("parse-error", path.string() + " is not a version-1 checkpoint");
  Checkpoint c;
  c.step = j.at("step").get<long>();
  c.model = model_from_json(j.at("model"));
  c.optimizer = optimizer_from_json(j.at("optimizer"));
  c.extra = j.value("extra", nlohmann::json::object());
  return c;
}

}  // namespace provshift
