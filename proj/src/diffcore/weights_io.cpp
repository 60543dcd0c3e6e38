#include "nocsfit/diffcore/weights_io.hpp"

#include <fstream>
#include <set>

#include "nocsfit/binary_io.hpp"

namespace nf {

namespace {
constexpr char kMagic[4] = {'N', 'F', 'W', '1'};
}

void write_weights(std::ostream& out, const ParameterSet& params) {
  out.write(kMagic, 4);
  for (const auto& p : params) {
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.id.size()));
    binio::put_bytes(out, p.id);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    for (double v : p.value.values()) binio::put<double>(out, v);
  }
}

void read_weights(std::istream& in, ParameterSet& params) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw Error(ErrorCode::FormatError, "not an NFW1 weight container");
  }
  std::set<std::string> seen;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = binio::get<std::uint32_t>(in, "identifier length");
    const std::string id = binio::get_bytes(in, len, "identifier");
    const auto rows = binio::get<std::uint32_t>(in, "rows");
    const auto cols = binio::get<std::uint32_t>(in, "cols");
    Parameter* p = params.find(id);
    if (p == nullptr) throw Error(ErrorCode::UnknownParameter, "weights contain unknown parameter '" + id + "'");
    if (p->value.rows() != rows || p->value.cols() != cols) {
      throw Error(ErrorCode::ShapeMismatch, "parameter '" + id + "' stored as " + std::to_string(rows) + "x" +
                                                std::to_string(cols) + ", model expects " +
                                                std::to_string(p->value.rows()) + "x" + std::to_string(p->value.cols()));
    }
    Tensor2 value(rows, cols);
    for (auto& v : value.values()) v = binio::get<double>(in, "payload");
    p->value = std::move(value);
    seen.insert(id);
  }
  for (const auto& p : params) {
    if (!seen.contains(p.id)) throw Error(ErrorCode::FormatError, "weights missing parameter '" + p.id + "'");
  }
}

void save_weights(const std::filesystem::path& path, const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_weights(out, params);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void load_weights(const std::filesystem::path& path, ParameterSet& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  read_weights(in, params);
}

}  // namespace nf
