#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "provshift/random.hpp"

namespace provshift {

enum class AlgorithmKind {
  kERM,
  kUpSampling,
  kDownSampling,
  kBackDoor,
  kMTL,
  kMixup,
  kLISA,
  kCORAL,
  kMMD,
  kCAD,
  kFish,
  kDANN,
  kCDANN,
  kIRM,
  kGroupDRO,
  kJTT,
  kDFR,
  kLfF,
  kDualFilter,
};

const std::vector<AlgorithmKind>& all_algorithms();
std::string to_string(AlgorithmKind kind);
AlgorithmKind parse_algorithm(const std::string& name);
bool is_two_stage(AlgorithmKind kind);

using HValue = std::variant<double, bool, std::string>;
using HParams = std::map<std::string, HValue>;

double as_real(const HParams& hp, const std::string& name);
long as_int(const HParams& hp, const std::string& name);
bool as_bool(const HParams& hp, const std::string& name);
std::string as_string(const HParams& hp, const std::string& name);
std::string format_hvalue(const HValue& v);
nlohmann::json to_json(const HParams& hp);
HParams hparams_from_json(const nlohmann::json& j);

// Random-search distribution for one hyperparameter.
struct Distribution {
  enum Kind {
    kLog10Uniform,  // 10^Uniform(lo, hi)
    kUniform,       // Uniform(lo, hi)
    kLog2Uniform,   // floor(2^Uniform(lo, hi)), integer valued
    kChoice,        // RandomChoice(choices)
    kLog10Choice,   // 10^RandomChoice(choices)
  } kind = kUniform;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<HValue> choices;

  HValue draw(Rng& rng) const;
  std::string describe() const;
};

struct HParamSpec {
  std::string name;
  HValue default_value;
  Distribution distribution;
  bool integer = false;
  // Validity domain for real values: [min, max].
  double min = -1e300;
  double max = 1e300;
  bool min_exclusive = false;
  bool max_exclusive = false;
  std::vector<std::string> allowed;  // string-valued parameters
};

// "paper": the published table verbatim, tuned for fine-tuning a large
// pretrained encoder. "desk": same table except the learning-rate and
// discriminator-width rows, rescaled for a small network trained from
// scratch on a single core.
enum class Profile { kPaper, kDesk };
Profile parse_profile(const std::string& name);
std::string to_string(Profile p);

std::vector<HParamSpec> registry(AlgorithmKind kind, Profile profile = Profile::kDesk);
HParams default_hparams(AlgorithmKind kind, Profile profile = Profile::kDesk);
HParams sample_hparams(AlgorithmKind kind, Rng& rng, Profile profile = Profile::kDesk);
// Fills missing names with defaults, rejects unknown names and values
// outside the registry domain.
HParams complete_hparams(AlgorithmKind kind, const HParams& given, Profile profile = Profile::kDesk);
void validate_hparams(AlgorithmKind kind, const HParams& hp, Profile profile = Profile::kDesk);

}  // namespace provshift
