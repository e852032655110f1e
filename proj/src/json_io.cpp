#include "icnn/json_io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>

namespace icnn {

void to_json(json& j, const ModelSpec& s) {
  j = json{{"architecture", to_string(s.architecture)},
           {"input_dim", s.input_dim},
           {"model_dim", s.model_dim},
           {"ff_dim", s.ff_dim},
           {"num_heads", s.num_heads},
           {"num_layers", s.num_layers},
           {"r", s.r},
           {"tau", s.tau},
           {"output_dim", s.output_dim},
           {"sequence_length", s.sequence_length}};
}

void from_json(const json& j, ModelSpec& s) {
  std::string arch;
  require_field(j, "architecture", arch);
  try {
    s.architecture = parse_architecture(arch);
  } catch (const ContractError& e) {
    throw ParseError(std::string("field 'architecture': ") + e.what());
  }
  require_field(j, "input_dim", s.input_dim);
  require_field(j, "model_dim", s.model_dim);
  require_field(j, "ff_dim", s.ff_dim);
  require_field(j, "num_heads", s.num_heads);
  require_field(j, "num_layers", s.num_layers);
  require_field(j, "r", s.r);
  require_field(j, "tau", s.tau);
  require_field(j, "output_dim", s.output_dim);
  require_field(j, "sequence_length", s.sequence_length);
}

void to_json(json& j, const MinMaxScaler& s) { j = json{{"lo", s.lo}, {"hi", s.hi}}; }

void from_json(const json& j, MinMaxScaler& s) {
  require_field(j, "lo", s.lo);
  require_field(j, "hi", s.hi);
  if (s.lo.size() != s.hi.size()) throw ParseError("field 'hi': length differs from 'lo'");
}

namespace {
json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
}  // namespace

void to_json(json& j, const EpochTelemetry& t) {
  j = json{{"epoch", t.epoch},
           {"train_loss", number_or_null(t.train_loss)},
           {"val_loss", number_or_null(t.validation_loss)},
           {"max_grad_norm", number_or_null(t.max_layer_grad_norm)},
           {"wall_time_s", t.wall_time_seconds}};
}

std::string encode_doubles(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<double> decode_doubles(const std::string& text) {
  if (text.size() % 4 != 0) throw ParseError("payload: base64 length is not a multiple of 4");
  std::vector<unsigned char> bytes(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(bytes.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw ParseError("payload: invalid base64");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the zero bytes that stand in for '=' padding.
  for (std::size_t i = text.size(); i-- > 0 && text[i] == '=';) --len;
  if (len % 8 != 0) throw ParseError("payload: byte count is not a multiple of 8");
  std::vector<double> out(len / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[i * 8 + b]} << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace icnn
