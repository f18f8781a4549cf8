#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "provshift/datamodel.hpp"

namespace provshift {

// Annotated-dataset text format:
//
//   #dim=<d>
//   example_id<TAB>subject_id<TAB>y<TAB>z<TAB>f1,f2,...,fd
//
// Reals are written in shortest round-trip decimal, so load(save(d)) == d.
// Parse failures throw Error("parse-error") with the 1-based line number.
Dataset read_dataset(std::istream& in, const std::string& name = "");
void write_dataset(std::ostream& out, const Dataset& dataset);

Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

// Shortest decimal that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

}  // namespace provshift
