#include "provshift/dataset_io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_set>

#include "provshift/error.hpp"

namespace provshift {

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw Error("parse-error", "line " + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

int parse_binary(std::string_view field, std::size_t line, const char* what) {
  if (field == "0") return 0;
  if (field == "1") return 1;
  fail(line, std::string(what) + " must be 0 or 1, got '" + std::string(field) + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw Error("parse-error", "not a real number: '" + std::string(text) + "'");
  }
  return v;
}

Dataset read_dataset(std::istream& in, const std::string& name) {
  Dataset ds;
  ds.name = name;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') fail(lineno, "CRLF line endings are not allowed");
    if (!have_header) {
      constexpr std::string_view kPrefix = "#dim=";
      if (line.rfind(kPrefix, 0) != 0) fail(lineno, "expected header '#dim=<d>'");
      const std::string_view digits = std::string_view(line).substr(kPrefix.size());
      std::size_t dim = 0;
      const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), dim);
      if (res.ec != std::errc() || res.ptr != digits.data() + digits.size() || dim == 0) {
        fail(lineno, "dimension must be a positive integer");
      }
      ds.dim = dim;
      have_header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 5) fail(lineno, "expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    Example ex;
    ex.example_id = std::string(fields[0]);
    ex.subject_id = std::string(fields[1]);
    if (ex.example_id.empty()) fail(lineno, "empty example_id");
    ex.label = parse_binary(fields[2], lineno, "label");
    ex.provenance = parse_binary(fields[3], lineno, "provenance");
    const auto values = split(fields[4], ',');
    if (values.size() != ds.dim) {
      fail(lineno, "dimension mismatch: header declares " + std::to_string(ds.dim) + " features, row has " +
                       std::to_string(values.size()));
    }
    ex.features.reserve(values.size());
    for (auto v : values) {
      try {
        ex.features.push_back(parse_double(v));
      } catch (const Error&) {
        fail(lineno, "malformed feature value '" + std::string(v) + "'");
      }
    }
    if (!ids.insert(ex.example_id).second) fail(lineno, "duplicate example_id '" + ex.example_id + "'");
    ds.examples.push_back(std::move(ex));
  }
  if (!have_header) fail(lineno + 1, "missing '#dim=<d>' header");
  return ds;
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  validate_dataset(dataset);
  out << "#dim=" << dataset.dim << '\n';
  for (const auto& ex : dataset.examples) {
    out << ex.example_id << '\t' << ex.subject_id << '\t' << ex.label << '\t' << ex.provenance << '\t';
    for (std::size_t k = 0; k < ex.features.size(); ++k) {
      if (k) out << ',';
      out << format_double(ex.features[k]);
    }
    out << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io-error", "cannot open '" + path.string() + "'");
  return read_dataset(in, path.stem().string());
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io-error", "cannot write '" + path.string() + "'");
  write_dataset(out, dataset);
}

}  // namespace provshift
