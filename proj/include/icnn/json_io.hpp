#pragma once

// JSON conversions shared by checkpoints, reports and the CLI configuration.

#include "json.hpp"

#include "icnn/models.hpp"
#include "icnn/training.hpp"

namespace icnn {

using json = nlohmann::json;

void to_json(json& j, const ModelSpec& s);
void from_json(const json& j, ModelSpec& s);

void to_json(json& j, const MinMaxScaler& s);
void from_json(const json& j, MinMaxScaler& s);

void to_json(json& j, const EpochTelemetry& t);

/// Reads `key` into `out` when present; wraps type errors in ParseError
/// naming the field.
template <typename T>
void read_field(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("field '") + key + "': " + e.what());
  }
}

/// Like read_field, but the key must exist.
template <typename T>
void require_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
  read_field(j, key, out);
}

/// Encodes doubles as base64 of their little-endian IEEE-754 bytes.
std::string encode_doubles(const std::vector<double>& values);
std::vector<double> decode_doubles(const std::string& text);

}  // namespace icnn
