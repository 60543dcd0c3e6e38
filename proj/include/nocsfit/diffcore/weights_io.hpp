#pragma once

#include <filesystem>
#include <iosfwd>

#include "nocsfit/diffcore/tensor.hpp"

// "NFW1" container, little-endian:
//   magic "NFW1"
//   repeated until EOF: u32 id length, id bytes (UTF-8), u32 rows, u32 cols, rows*cols f64 row-major
namespace nf {

void write_weights(std::ostream& out, const ParameterSet& params);
// Every stored record must name an existing parameter of the same shape, and every
// parameter must be present. Throws UnknownParameter, ShapeMismatch or FormatError.
void read_weights(std::istream& in, ParameterSet& params);

void save_weights(const std::filesystem::path& path, const ParameterSet& params);
void load_weights(const std::filesystem::path& path, ParameterSet& params);

}  // namespace nf
