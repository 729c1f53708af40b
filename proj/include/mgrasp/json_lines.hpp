#pragma once

#include "mgrasp/tensor.hpp"

#include <json.hpp>

#include <cstddef>
#include <string>

namespace mgrasp {

using Json = nlohmann::ordered_json;

/// Compact single-line JSON in which every floating-point number is written
/// with 17 significant digits, so doubles survive a text round trip exactly.
std::string dump_json(const Json& value);

/// Row-major nested array [[...], ...].
Json matrix_to_json(const Matrix& m);

/// Inverse of matrix_to_json. Errors name `line` and `field`.
Matrix matrix_from_json(const Json& value, std::size_t line, const std::string& field);

/// Fetches object member `field`, raising ParseError when it is missing.
const Json& require_field(const Json& obj, const std::string& field, std::size_t line);

template <typename T>
T field_as(const Json& obj, const std::string& field, std::size_t line) {
  const Json& v = require_field(obj, field, line);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line, field, e.what());
  }
}

/// 64-bit FNV-1a, used for short content fingerprints.
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace mgrasp
