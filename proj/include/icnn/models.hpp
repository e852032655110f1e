#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "icnn/autodiff.hpp"

namespace icnn {

enum class Architecture { IcEot, IcLstm, Eot, Lstm, Icfnn, Icrnn };

std::string to_string(Architecture arch);
/// Accepts the canonical names ("IC-EoT", ...) and the lowercase CLI forms
/// ("iceot", "iclstm", "eot", "lstm", "icfnn", "icrnn").
Architecture parse_architecture(std::string_view name);
bool is_input_convex(Architecture arch);

struct ModelSpec {
  Architecture architecture = Architecture::IcEot;
  std::size_t input_dim = 1;
  std::size_t model_dim = 64;  // hidden size for the recurrent and feed-forward models
  std::size_t ff_dim = 128;
  std::size_t num_heads = 1;
  std::size_t num_layers = 1;
  double r = 0.0;
  double tau = 1.0;
  std::size_t output_dim = 1;
  std::size_t sequence_length = 12;

  /// Throws ContractError on inconsistent settings.
  void validate() const;
};

/// Defaults for the given architecture (transformers: 1 layer, d_model 64,
/// d_ff 128, 1 head; LSTMs: 1 layer, hidden 128; ICFNN/ICRNN: 2 layers/1 layer
/// of width 64).
ModelSpec default_spec(Architecture arch, std::size_t input_dim, std::size_t output_dim,
                       std::size_t sequence_length);

/// Sequence model mapping a batch [B, T, d_in] to [B, d_out].
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;

  virtual Var forward(const Var& x) const = 0;

  std::size_t parameter_count() const;
  /// Clamp all non-negative parameters into [0, inf).
  void project();
  /// Throws InvariantError naming the first constrained parameter with a
  /// negative entry.
  void check_invariants() const;

 protected:
  Parameter& add_parameter(std::string name, Shape shape, bool non_negative);
  Var p(std::size_t index) const { return param(params_[index]); }
  void check_input(const Var& x, std::size_t width) const;

  ModelSpec spec_;
  std::vector<Parameter> params_;
};

/// Input-convex sequence models that consume the expanded input [x, -x].
class ExpandedInputModel : public Model {
 public:
  using Model::Model;
  Var forward(const Var& x) const override;
  /// Forward from an already expanded batch [B, T, 2 d_in].
  virtual Var forward_expanded(const Var& x_hat) const = 0;
};

/// Fresh model with deterministic initialisation from `seed`. Non-negative
/// weight matrices start at |U(-2/fan_in, 2/fan_in)| (unit expected column
/// sum), other matrices at U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases at zero.
std::unique_ptr<Model> make_model(const ModelSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Building blocks, exposed for direct testing.

/// Concatenates [x, -x] along the last axis.
Var expand_input(const Var& x);

/// Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...).
Tensor positional_encoding(std::size_t length, std::size_t d_model);

/// exp((z_i - r)/tau) / sum_j exp((z_j - r)/tau) over the last axis, evaluated
/// after subtracting the row maximum.
Var convex_r_softmax(const Var& z, double r, double tau);

struct ConvexAttentionWeights {
  Var w_x;  // [d, d] shared non-negative projection
  Var d_q, d_k, d_v;  // [d] non-negative diagonals
};

/// Shared non-negative projection, diagonal Q/K/V scalings and per-head
/// Convex-r-Softmax attention without masking. x is [B, T, d] or [T, d].
Var convex_multihead_attention(const Var& x, const ConvexAttentionWeights& w,
                               std::size_t num_heads, double r, double tau);

struct ConvexFeedForwardWeights {
  Var w1, b1, w2, b2;
};

/// x1 = x + attention(x); out = x1 + relu(x1 W1 + b1) W2 + b2.
Var iceot_block(const Var& x, const ConvexAttentionWeights& attn,
                const ConvexFeedForwardWeights& ffn, std::size_t num_heads, double r,
                double tau);

struct IcLstmWeights {
  Var w_x, w_h;               // shared, non-negative
  Var d_f, d_i, d_o, d_c;     // non-negative diagonals
  Var b_f, b_i, b_o, b_c;
};

struct LstmState {
  Var h, c;
};

/// One IC-LSTM step with relu gates; x_hat is [B, 2 d_in].
LstmState iclstm_cell(const Var& x_hat, const LstmState& prev, const IcLstmWeights& w);

// ---------------------------------------------------------------------------

class IcEot final : public ExpandedInputModel {
 public:
  IcEot(ModelSpec spec, std::uint64_t seed);
  Var forward_expanded(const Var& x_hat) const override;
};

class IcLstm final : public ExpandedInputModel {
 public:
  IcLstm(ModelSpec spec, std::uint64_t seed);
  Var forward_expanded(const Var& x_hat) const override;
};

class Icrnn final : public ExpandedInputModel {
 public:
  Icrnn(ModelSpec spec, std::uint64_t seed);
  Var forward_expanded(const Var& x_hat) const override;
};

/// Feed-forward ICNN over the flattened window.
class Icfnn final : public Model {
 public:
  Icfnn(ModelSpec spec, std::uint64_t seed);
  Var forward(const Var& x) const override;
};

class Lstm final : public Model {
 public:
  Lstm(ModelSpec spec, std::uint64_t seed);
  Var forward(const Var& x) const override;
};

/// Standard post-norm encoder with scaled softmax attention.
class Eot final : public Model {
 public:
  Eot(ModelSpec spec, std::uint64_t seed);
  Var forward(const Var& x) const override;
};

}  // namespace icnn
