#include "provshift/hparams.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "provshift/dataset_io.hpp"
#include "provshift/error.hpp"

namespace provshift {

namespace {

const std::vector<std::pair<AlgorithmKind, std::string>>& names() {
  static const std::vector<std::pair<AlgorithmKind, std::string>> kNames = {
      {AlgorithmKind::kERM, "ERM"},           {AlgorithmKind::kUpSampling, "UpSampling"},
      {AlgorithmKind::kDownSampling, "DownSampling"}, {AlgorithmKind::kBackDoor, "BackDoor"},
      {AlgorithmKind::kMTL, "MTL"},           {AlgorithmKind::kMixup, "Mixup"},
      {AlgorithmKind::kLISA, "LISA"},         {AlgorithmKind::kCORAL, "CORAL"},
      {AlgorithmKind::kMMD, "MMD"},           {AlgorithmKind::kCAD, "CAD"},
      {AlgorithmKind::kFish, "Fish"},         {AlgorithmKind::kDANN, "DANN"},
      {AlgorithmKind::kCDANN, "CDANN"},       {AlgorithmKind::kIRM, "IRM"},
      {AlgorithmKind::kGroupDRO, "GroupDRO"}, {AlgorithmKind::kJTT, "JTT"},
      {AlgorithmKind::kDFR, "DFR"},           {AlgorithmKind::kLfF, "LfF"},
      {AlgorithmKind::kDualFilter, "DualFilter"},
  };
  return kNames;
}

constexpr double kInf = 1e300;

HParamSpec real(std::string name, double def, Distribution d, double min, double max, bool min_ex = false,
                bool max_ex = false) {
  HParamSpec s;
  s.name = std::move(name);
  s.default_value = def;
  s.distribution = std::move(d);
  s.min = min;
  s.max = max;
  s.min_exclusive = min_ex;
  s.max_exclusive = max_ex;
  return s;
}

HParamSpec integer(std::string name, double def, Distribution d, double min, double max) {
  HParamSpec s = real(std::move(name), def, std::move(d), min, max);
  s.integer = true;
  return s;
}

HParamSpec flag(std::string name, bool def) {
  HParamSpec s;
  s.name = std::move(name);
  s.default_value = def;
  s.distribution = {Distribution::kChoice, 0, 0, {false, true}};
  return s;
}

HParamSpec text(std::string name, std::string def, std::vector<std::string> allowed) {
  HParamSpec s;
  s.name = std::move(name);
  s.default_value = def;
  std::vector<HValue> choices(allowed.begin(), allowed.end());
  s.distribution = {Distribution::kChoice, 0, 0, std::move(choices)};
  s.allowed = std::move(allowed);
  return s;
}

Distribution log10u(double lo, double hi) { return {Distribution::kLog10Uniform, lo, hi, {}}; }
Distribution unif(double lo, double hi) { return {Distribution::kUniform, lo, hi, {}}; }
Distribution log2u(double lo, double hi) { return {Distribution::kLog2Uniform, lo, hi, {}}; }
Distribution choice(std::vector<HValue> c) { return {Distribution::kChoice, 0, 0, std::move(c)}; }
Distribution log10choice(std::vector<HValue> c) { return {Distribution::kLog10Choice, 0, 0, std::move(c)}; }

const HValue& lookup(const HParams& hp, const std::string& name) {
  auto it = hp.find(name);
  if (it == hp.end()) throw argument_error("missing hyperparameter '" + name + "'");
  return it->second;
}

}  // namespace

const std::vector<AlgorithmKind>& all_algorithms() {
  static const std::vector<AlgorithmKind> kAll = [] {
    std::vector<AlgorithmKind> v;
    for (const auto& [k, n] : names()) v.push_back(k);
    return v;
  }();
  return kAll;
}

std::string to_string(AlgorithmKind kind) {
  for (const auto& [k, n] : names())
    if (k == kind) return n;
  return "?";
}

AlgorithmKind parse_algorithm(const std::string& name) {
  for (const auto& [k, n] : names())
    if (n == name) return k;
  throw usage_error("unknown algorithm '" + name + "'");
}

bool is_two_stage(AlgorithmKind kind) {
  return kind == AlgorithmKind::kJTT || kind == AlgorithmKind::kDFR || kind == AlgorithmKind::kDualFilter;
}

double as_real(const HParams& hp, const std::string& name) {
  const HValue& v = lookup(hp, name);
  if (const double* d = std::get_if<double>(&v)) return *d;
  throw argument_error("hyperparameter '" + name + "' is not numeric");
}

long as_int(const HParams& hp, const std::string& name) { return std::lround(as_real(hp, name)); }

bool as_bool(const HParams& hp, const std::string& name) {
  const HValue& v = lookup(hp, name);
  if (const bool* b = std::get_if<bool>(&v)) return *b;
  throw argument_error("hyperparameter '" + name + "' is not boolean");
}

std::string as_string(const HParams& hp, const std::string& name) {
  const HValue& v = lookup(hp, name);
  if (const std::string* s = std::get_if<std::string>(&v)) return *s;
  throw argument_error("hyperparameter '" + name + "' is not text");
}

std::string format_hvalue(const HValue& v) {
  if (const double* d = std::get_if<double>(&v)) return format_double(*d);
  if (const bool* b = std::get_if<bool>(&v)) return *b ? "true" : "false";
  return std::get<std::string>(v);
}

nlohmann::json to_json(const HParams& hp) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : hp) std::visit([&](const auto& x) { j[k] = x; }, v);
  return j;
}

HParams hparams_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw argument_error("hyperparameters must be a JSON object");
  HParams hp;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it->is_boolean())
      hp[it.key()] = it->get<bool>();
    else if (it->is_number())
      hp[it.key()] = it->get<double>();
    else if (it->is_string())
      hp[it.key()] = it->get<std::string>();
    else
      throw argument_error("hyperparameter '" + it.key() + "' has an unsupported type");
  }
  return hp;
}

HValue Distribution::draw(Rng& rng) const {
  switch (kind) {
    case kLog10Uniform:
      return std::pow(10.0, lo + (hi - lo) * uniform01(rng));
    case kUniform:
      return lo + (hi - lo) * uniform01(rng);
    case kLog2Uniform:
      return std::floor(std::pow(2.0, lo + (hi - lo) * uniform01(rng)));
    case kChoice:
    case kLog10Choice: {
      const auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(choices.size()));
      const HValue& c = choices[std::min(k, choices.size() - 1)];
      if (kind == kLog10Choice) return std::pow(10.0, std::get<double>(c));
      return c;
    }
  }
  return 0.0;
}

std::string Distribution::describe() const {
  std::ostringstream s;
  auto list = [&] {
    std::string out = "[";
    for (std::size_t i = 0; i < choices.size(); ++i) out += (i ? ", " : "") + format_hvalue(choices[i]);
    return out + "]";
  };
  switch (kind) {
    case kLog10Uniform:
      s << "10^Uniform(" << format_double(lo) << ", " << format_double(hi) << ")";
      break;
    case kUniform:
      s << "Uniform(" << format_double(lo) << ", " << format_double(hi) << ")";
      break;
    case kLog2Uniform:
      s << "2^Uniform(" << format_double(lo) << ", " << format_double(hi) << ")";
      break;
    case kChoice:
      s << "RandomChoice(" << list() << ")";
      break;
    case kLog10Choice:
      s << "10^RandomChoice(" << list() << ")";
      break;
  }
  return s.str();
}

Profile parse_profile(const std::string& name) {
  if (name == "paper") return Profile::kPaper;
  if (name == "desk") return Profile::kDesk;
  throw usage_error("unknown hyperparameter profile '" + name + "'");
}

std::string to_string(Profile p) { return p == Profile::kPaper ? "paper" : "desk"; }

std::vector<HParamSpec> registry(AlgorithmKind kind, Profile profile) {
  const bool paper = profile == Profile::kPaper;
  std::vector<HParamSpec> r;
  r.push_back(paper ? real("lr", 1e-5, log10u(-5, -3.5), 0, 1, true) : real("lr", 1e-3, log10u(-3, -1.5), 0, 1, true));
  r.push_back(real("weight_decay", 0, log10u(-6, -2), 0, kInf));
  using K = AlgorithmKind;
  switch (kind) {
    case K::kDANN:
    case K::kCDANN:
      r.push_back(real("lambda", 1.0, log10u(-2, 2), 0, kInf));
      r.push_back(real("disc_weight_decay", 0, log10u(-6, -2), 0, kInf));
      r.push_back(integer("disc_steps", 1, log2u(0, 3), 1, 64));
      r.push_back(paper ? integer("disc_width", 256, log2u(6, 10), 1, 4096) : integer("disc_width", 64, log2u(4, 7), 1, 4096));
      r.push_back(integer("disc_depth", 3, choice({3.0, 4.0, 5.0}), 2, 16));
      r.push_back(real("disc_dropout", 0, choice({0.0, 0.1, 0.5}), 0, 1, false, true));
      r.push_back(real("grad_penalty", 0, log10u(-2, 1), 0, kInf));
      r.push_back(real("beta1", 0.5, choice({0.0, 0.5}), 0, 1, false, true));
      break;
    case K::kIRM:
      r.push_back(real("lambda", 100, log10u(-1, 5), 0, kInf));
      r.push_back(integer("anneal_iters", 500, log10u(0, 4), 0, 1e9));
      break;
    case K::kMixup:
      r.push_back(real("alpha", 0.2, log10u(0, 4), 0, kInf, true));
      break;
    case K::kLISA:
      r.push_back(real("alpha", 2.0, log10u(-1, 1), 0, kInf, true));
      r.push_back(real("intra_ratio", 0.5, unif(0, 1), 0, 1));
      r.push_back(text("mix_method", "mixup", {"mixup", "cutmix"}));
      break;
    case K::kGroupDRO:
      r.push_back(real("eta", 0.01, log10u(-1, 1), 0, kInf));
      break;
    case K::kMMD:
    case K::kCORAL:
      r.push_back(real("gamma", 1, log10u(-1, 1), 0, kInf));
      break;
    case K::kFish:
      r.push_back(real("meta_lr", 0.5, choice({0.05, 0.1, 0.5}), 0, 1));
      break;
    case K::kMTL:
      r.push_back(real("ema", 0.99, choice({0.5, 0.9, 0.99, 1.0}), 0, 1));
      break;
    case K::kCAD:
      r.push_back(real("lambda", 0.1, log10choice({-4.0, -2.0, -1.0, 0.0, 1.0, 2.0}), 0, kInf));
      r.push_back(real("temperature", 0.1, choice({0.05, 0.1}), 0, kInf, true));
      break;
    case K::kJTT:
      r.push_back(real("first_stage_fraction", 0.5, unif(0.2, 0.8), 0, 1, true, true));
      r.push_back(real("lambda_up", 0.1, log10u(0, 2.5), 0, kInf, true));
      break;
    case K::kDFR:
      r.push_back(real("first_stage_fraction", 0.5, unif(0.2, 0.8), 0, 1, true, true));
      r.push_back(real("l2", 0.1, log10u(-2, 0.5), 0, kInf));
      break;
    case K::kLfF:
      r.push_back(real("q", 0.1, unif(0.05, 0.3), 0, 1, true));
      break;
    case K::kDualFilter:
      r.push_back(text("mask_type", "A", {"D", "I", "A"}));
      r.push_back(real("mask_threshold", 0.5, unif(0.5, 0.9), 0, 1, false, true));
      r.push_back(real("ablation_rate", 0.5, unif(0.5, 0.9), 0, 1));
      r.push_back(integer("warmup_steps", 50, choice({10.0, 25.0, 50.0}), 1, 1e9));
      r.push_back(flag("embedding_mask", true));
      r.push_back(flag("classifier_mask", false));
      break;
    default:
      break;
  }
  return r;
}

HParams default_hparams(AlgorithmKind kind, Profile profile) {
  HParams hp;
  for (const auto& s : registry(kind, profile)) hp[s.name] = s.default_value;
  return hp;
}

HParams sample_hparams(AlgorithmKind kind, Rng& rng, Profile profile) {
  HParams hp;
  for (const auto& s : registry(kind, profile)) {
    HValue v = s.distribution.draw(rng);
    // Integer-valued rows drawn from continuous distributions truncate.
    if (s.integer)
      if (double* d = std::get_if<double>(&v)) *d = std::floor(*d);
    hp[s.name] = v;
  }
  return hp;
}

void validate_hparams(AlgorithmKind kind, const HParams& hp, Profile profile) {
  const auto specs = registry(kind, profile);
  for (const auto& [name, value] : hp) {
    auto it = std::find_if(specs.begin(), specs.end(), [&](const HParamSpec& s) { return s.name == name; });
    if (it == specs.end()) throw argument_error("unknown hyperparameter '" + name + "' for " + to_string(kind));
    if (value.index() != it->default_value.index())
      throw argument_error("hyperparameter '" + name + "' has the wrong type");
    if (const double* d = std::get_if<double>(&value)) {
      const bool low = it->min_exclusive ? !(*d > it->min) : !(*d >= it->min);
      const bool high = it->max_exclusive ? !(*d < it->max) : !(*d <= it->max);
      if (low || high || !std::isfinite(*d))
        throw argument_error("hyperparameter '" + name + "' = " + format_double(*d) + " is outside its domain");
      if (it->integer && *d != std::floor(*d)) throw argument_error("hyperparameter '" + name + "' must be an integer");
    }
    if (const std::string* s = std::get_if<std::string>(&value)) {
      if (std::find(it->allowed.begin(), it->allowed.end(), *s) == it->allowed.end())
        throw argument_error("hyperparameter '" + name + "' = '" + *s + "' is not an allowed value");
    }
  }
  for (const auto& s : specs)
    if (!hp.count(s.name)) throw argument_error("missing hyperparameter '" + s.name + "' for " + to_string(kind));
}

HParams complete_hparams(AlgorithmKind kind, const HParams& given, Profile profile) {
  HParams hp = default_hparams(kind, profile);
  for (const auto& [k, v] : given) {
    if (!hp.count(k)) throw argument_error("unknown hyperparameter '" + k + "' for " + to_string(kind));
    hp[k] = v;
  }
  validate_hparams(kind, hp, profile);
  return hp;
}

}  // namespace provshift
