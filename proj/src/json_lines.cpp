#include "mgrasp/json_lines.hpp"

#include <cmath>
#include <cstdio>

namespace mgrasp {

namespace {

void write_number(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string s(buf, static_cast<std::size_t>(n));
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  out += s;
}

void write(std::string& out, const Json& v) {
  switch (v.type()) {
    case Json::value_t::object: {
      out += '{';
      bool first = true;
      for (const auto& [key, item] : v.items()) {
        if (!first) out += ',';
        first = false;
        out += Json(key).dump();
        out += ':';
        write(out, item);
      }
      out += '}';
      break;
    }
    case Json::value_t::array: {
      out += '[';
      bool first = true;
      for (const auto& item : v) {
        if (!first) out += ',';
        first = false;
        write(out, item);
      }
      out += ']';
      break;
    }
    case Json::value_t::number_float:
      write_number(out, v.get<double>());
      break;
    default:
      out += v.dump();
      break;
  }
}

}  // namespace

std::string dump_json(const Json& value) {
  std::string out;
  write(out, value);
  return out;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& value, std::size_t line, const std::string& field) {
  if (!value.is_array()) throw ParseError(line, field, "expected an array of rows");
  const Index rows = static_cast<Index>(value.size());
  Index cols = -1;
  Matrix m;
  for (Index r = 0; r < rows; ++r) {
    const Json& row = value[static_cast<std::size_t>(r)];
    if (!row.is_array()) throw ParseError(line, field, "row " + std::to_string(r) + " is not an array");
    if (cols < 0) {
      cols = static_cast<Index>(row.size());
      m.resize(rows, cols);
    } else if (static_cast<Index>(row.size()) != cols) {
      throw ParseError(line, field, "ragged rows");
    }
    for (Index c = 0; c < cols; ++c) {
      const Json& x = row[static_cast<std::size_t>(c)];
      if (!x.is_number()) throw ParseError(line, field, "non-numeric entry");
      m(r, c) = x.get<double>();
    }
  }
  if (cols < 0) m.resize(0, 0);
  return m;
}

const Json& require_field(const Json& obj, const std::string& field, std::size_t line) {
  if (!obj.is_object()) throw ParseError(line, field, "record is not an object");
  auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(line, field, "missing");
  return *it;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mgrasp
