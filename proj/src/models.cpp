#include "icnn/models.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

namespace icnn {

namespace {

void check_nonneg(const Var& v, std::string_view what) {
  for (double x : v->value.vec())
    if (!(x >= 0.0))
      throw InvariantError(fmt::format("{} has a negative entry ({})", what, x));
}

// Row-vector parameters broadcast over [B, n] and [B, T, n].
Var affine(const Var& x, const Var& w, const Var& b) { return add(matmul(x, w), b); }

Var last_token(const Var& h) {
  const auto& s = h->value.shape();
  return reshape(slice(h, 1, s[1] - 1, 1), Shape{s[0], s[2]});
}

Var time_step(const Var& x, std::size_t t) {
  const auto& s = x->value.shape();
  return reshape(slice(x, 1, t, 1), Shape{s[0], s[2]});
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta) {
  const std::size_t axis = x->value.rank() - 1;
  auto centered = sub(x, reduce(ReduceOp::Mean, x, axis, true));
  auto var = reduce(ReduceOp::Mean, mul(centered, centered), axis, true);
  auto normed = div(centered, sqrt(add_scalar(var, 1e-5)));
  return add(mul(normed, gamma), beta);
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  void uniform(Parameter& p, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value.vec()) {
      v = dist(rng_);
      if (p.non_negative) v = std::abs(v);
    }
  }
  void fan_in(Parameter& p) {
    const double n = static_cast<double>(p.value.dim(0));
    uniform(p, p.non_negative ? 2.0 / n : 1.0 / std::sqrt(n));
  }
  void fill(Parameter& p, double v) { std::fill(p.value.vec().begin(), p.value.vec().end(), v); }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::IcEot: return "IC-EoT";
    case Architecture::IcLstm: return "IC-LSTM";
    case Architecture::Eot: return "EoT";
    case Architecture::Lstm: return "LSTM";
    case Architecture::Icfnn: return "ICFNN";
    case Architecture::Icrnn: return "ICRNN";
  }
  return "?";
}

Architecture parse_architecture(std::string_view name) {
  std::string key;
  for (char c : name)
    if (c != '-' && c != '_') key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (key == "iceot") return Architecture::IcEot;
  if (key == "iclstm") return Architecture::IcLstm;
  if (key == "eot") return Architecture::Eot;
  if (key == "lstm") return Architecture::Lstm;
  if (key == "icfnn") return Architecture::Icfnn;
  if (key == "icrnn") return Architecture::Icrnn;
  throw ContractError(fmt::format("unknown architecture '{}'", name));
}

bool is_input_convex(Architecture arch) {
  return arch != Architecture::Eot && arch != Architecture::Lstm;
}

void ModelSpec::validate() const {
  if (input_dim == 0 || output_dim == 0 || model_dim == 0 || sequence_length == 0)
    throw ContractError("model spec: dimensions must be positive");
  if (num_layers == 0) throw ContractError("model spec: num_layers must be >= 1");
  if (num_heads == 0 || model_dim % num_heads != 0)
    throw ContractError(
        fmt::format("model spec: d_model {} not divisible by {} heads", model_dim, num_heads));
  if (!(tau > 0.0)) throw ContractError("model spec: tau must be > 0");
  if (ff_dim == 0) throw ContractError("model spec: ff_dim must be positive");
}

ModelSpec default_spec(Architecture arch, std::size_t input_dim, std::size_t output_dim,
                       std::size_t sequence_length) {
  ModelSpec s;
  s.architecture = arch;
  s.input_dim = input_dim;
  s.output_dim = output_dim;
  s.sequence_length = sequence_length;
  switch (arch) {
    case Architecture::IcEot:
    case Architecture::Eot:
      s.model_dim = 64;
      s.ff_dim = 128;
      s.num_heads = 1;
      s.num_layers = 1;
      break;
    case Architecture::IcLstm:
    case Architecture::Lstm:
      s.model_dim = 128;
      s.num_layers = 1;
      break;
    case Architecture::Icfnn:
      s.model_dim = 64;
      s.num_layers = 2;
      break;
    case Architecture::Icrnn:
      s.model_dim = 64;
      s.num_layers = 1;
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------

Parameter& Model::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ContractError(fmt::format("model has no parameter '{}'", name));
}

const Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::project() {
  for (auto& p : params_) p.project();
}

void Model::check_invariants() const {
  for (const auto& p : params_)
    if (!p.satisfies_constraint())
      throw InvariantError("non-negative parameter '" + p.name + "' has a negative entry");
}

Parameter& Model::add_parameter(std::string name, Shape shape, bool non_negative) {
  params_.push_back(Parameter{std::move(name), Tensor(std::move(shape), 0.0), non_negative});
  return params_.back();
}

void Model::check_input(const Var& x, std::size_t width) const {
  const auto& s = x->value.shape();
  if (s.size() != 3 || s[1] != spec_.sequence_length || s[2] != width)
    throw DimensionError(fmt::format("{}: expected input [B x {} x {}], got {}",
                                     to_string(spec_.architecture), spec_.sequence_length, width,
                                     shape_str(s)));
}

Var ExpandedInputModel::forward(const Var& x) const { return forward_expanded(expand_input(x)); }

std::unique_ptr<Model> make_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  switch (spec.architecture) {
    case Architecture::IcEot: return std::make_unique<IcEot>(spec, seed);
    case Architecture::IcLstm: return std::make_unique<IcLstm>(spec, seed);
    case Architecture::Icrnn: return std::make_unique<Icrnn>(spec, seed);
    case Architecture::Icfnn: return std::make_unique<Icfnn>(spec, seed);
    case Architecture::Lstm: return std::make_unique<Lstm>(spec, seed);
    case Architecture::Eot: return std::make_unique<Eot>(spec, seed);
  }
  throw ContractError("make_model: unknown architecture");
}

// ---------------------------------------------------------------------------

Var expand_input(const Var& x) {
  return concat({x, neg(x)}, x->value.rank() - 1);
}

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (length == 0 || d_model == 0) throw ContractError("positional_encoding: empty table");
  Tensor pe(Shape{length, d_model});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; 2 * i < d_model; ++i) {
      const double angle = static_cast<double>(t) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe.at(t, 2 * i) = std::sin(angle);
      if (2 * i + 1 < d_model) pe.at(t, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Var convex_r_softmax(const Var& z, double r, double tau) {
  if (!(tau > 0.0)) throw ContractError("convex_r_softmax: tau must be > 0");
  if (!z->value.all_finite()) throw NumericError("convex_r_softmax: non-finite scores");
  const std::size_t axis = z->value.rank() - 1;
  auto shifted = scale(add_scalar(z, -r), 1.0 / tau);
  // The row maximum only shifts the exponent; it carries no gradient.
  auto stable = sub(shifted, detach(reduce(ReduceOp::Max, shifted, axis, true)));
  auto e = exp(stable);
  return div(e, reduce(ReduceOp::Sum, e, axis, true));
}

Var convex_multihead_attention(const Var& x, const ConvexAttentionWeights& w,
                               std::size_t num_heads, double r, double tau) {
  check_nonneg(w.w_x, "attention W_x");
  check_nonneg(w.d_q, "attention D_q");
  check_nonneg(w.d_k, "attention D_k");
  check_nonneg(w.d_v, "attention D_v");
  const auto& s = x->value.shape();
  if (s.size() == 2) {
    auto out = convex_multihead_attention(reshape(x, Shape{1, s[0], s[1]}), w, num_heads, r, tau);
    return reshape(out, s);
  }
  if (s.size() != 3) throw DimensionError("attention: expected [B x T x d], got " + shape_str(s));
  const std::size_t d = s[2];
  if (w.w_x->value.shape() != Shape{d, d} || w.d_q->value.shape() != Shape{d} ||
      w.d_k->value.shape() != Shape{d} || w.d_v->value.shape() != Shape{d})
    throw DimensionError("attention: weight shapes do not match d_model " + std::to_string(d));
  if (num_heads == 0 || d % num_heads != 0)
    throw DimensionError(fmt::format("attention: d_model {} not divisible by {} heads", d,
                                     num_heads));

  auto x_proj = matmul(x, w.w_x);
  auto q = mul(x_proj, w.d_q);
  auto k = mul(x_proj, w.d_k);
  auto v = mul(x_proj, w.d_v);
  if (num_heads == 1) return matmul(convex_r_softmax(matmul(q, transpose(k)), r, tau), v);

  const std::size_t dh = d / num_heads;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < num_heads; ++h) {
    auto qh = slice(q, 2, h * dh, dh);
    auto kh = slice(k, 2, h * dh, dh);
    auto vh = slice(v, 2, h * dh, dh);
    heads.push_back(matmul(convex_r_softmax(matmul(qh, transpose(kh)), r, tau), vh));
  }
  return concat(heads, 2);
}

Var iceot_block(const Var& x, const ConvexAttentionWeights& attn,
                const ConvexFeedForwardWeights& ffn, std::size_t num_heads, double r,
                double tau) {
  check_nonneg(ffn.w1, "FFN W1");
  check_nonneg(ffn.w2, "FFN W2");
  auto x1 = add(x, convex_multihead_attention(x, attn, num_heads, r, tau));
  auto f = affine(relu(affine(x1, ffn.w1, ffn.b1)), ffn.w2, ffn.b2);
  return add(x1, f);
}

LstmState iclstm_cell(const Var& x_hat, const LstmState& prev, const IcLstmWeights& w) {
  check_nonneg(w.w_x, "IC-LSTM W_x");
  check_nonneg(w.w_h, "IC-LSTM W_h");
  check_nonneg(w.d_f, "IC-LSTM D_f");
  check_nonneg(w.d_i, "IC-LSTM D_i");
  check_nonneg(w.d_o, "IC-LSTM D_o");
  check_nonneg(w.d_c, "IC-LSTM D_c");
  auto shared = add(matmul(x_hat, w.w_x), matmul(prev.h, w.w_h));
  auto f = relu(add(mul(shared, w.d_f), w.b_f));
  auto i = relu(add(mul(shared, w.d_i), w.b_i));
  auto o = relu(add(mul(shared, w.d_o), w.b_o));
  auto c_tilde = relu(add(mul(shared, w.d_c), w.b_c));
  auto c = add(mul(f, prev.c), mul(i, c_tilde));
  auto h = mul(o, relu(c));
  return {h, c};
}

// ---------------------------------------------------------------------------
// IC-EoT parameter layout: embed.w, embed.b, then per layer
// w_x, d_q, d_k, d_v, ffn.w1, ffn.b1, ffn.w2, ffn.b2, then head.w, head.b.

IcEot::IcEot(ModelSpec spec, std::uint64_t seed) : ExpandedInputModel(std::move(spec)) {
  const std::size_t d = spec_.model_dim, f = spec_.ff_dim;
  Initializer init(seed);
  init.fan_in(add_parameter("embed.w", {2 * spec_.input_dim, d}, true));
  add_parameter("embed.b", {d}, false);
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::string pre = fmt::format("layer{}.", l);
    init.fan_in(add_parameter(pre + "w_x", {d, d}, true));
    for (const char* n : {"d_q", "d_k", "d_v"}) init.uniform(add_parameter(pre + n, {d}, true), 1.0);
    init.fan_in(add_parameter(pre + "ffn.w1", {d, f}, true));
    add_parameter(pre + "ffn.b1", {f}, false);
    init.fan_in(add_parameter(pre + "ffn.w2", {f, d}, true));
    add_parameter(pre + "ffn.b2", {d}, false);
  }
  init.fan_in(add_parameter("head.w", {d, spec_.output_dim}, true));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var IcEot::forward_expanded(const Var& x_hat) const {
  check_input(x_hat, 2 * spec_.input_dim);
  check_invariants();
  const std::size_t T = spec_.sequence_length;
  auto h = affine(x_hat, p(0), p(1));
  h = add(h, constant(positional_encoding(T, spec_.model_dim)));
  std::size_t idx = 2;
  for (std::size_t l = 0; l < spec_.num_layers; ++l, idx += 8) {
    ConvexAttentionWeights attn{p(idx), p(idx + 1), p(idx + 2), p(idx + 3)};
    ConvexFeedForwardWeights ffn{p(idx + 4), p(idx + 5), p(idx + 6), p(idx + 7)};
    h = iceot_block(h, attn, ffn, spec_.num_heads, spec_.r, spec_.tau);
  }
  return affine(last_token(h), p(idx), p(idx + 1));
}

// ---------------------------------------------------------------------------

IcLstm::IcLstm(ModelSpec spec, std::uint64_t seed) : ExpandedInputModel(std::move(spec)) {
  const std::size_t H = spec_.model_dim;
  Initializer init(seed);
  std::size_t in = 2 * spec_.input_dim;
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::string pre = fmt::format("layer{}.", l);
    init.fan_in(add_parameter(pre + "w_x", {in, H}, true));
    init.fan_in(add_parameter(pre + "w_h", {H, H}, true));
    for (const char* n : {"d_f", "d_i", "d_o", "d_c"}) init.uniform(add_parameter(pre + n, {H}, true), 1.0);
    for (const char* n : {"b_f", "b_i", "b_o", "b_c"}) add_parameter(pre + n, {H}, false);
    in = H;
  }
  init.fan_in(add_parameter("head.w", {H, spec_.output_dim}, true));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var IcLstm::forward_expanded(const Var& x_hat) const {
  check_input(x_hat, 2 * spec_.input_dim);
  check_invariants();
  const std::size_t B = x_hat->value.dim(0), H = spec_.model_dim;
  std::vector<Var> inputs;
  for (std::size_t t = 0; t < spec_.sequence_length; ++t) inputs.push_back(time_step(x_hat, t));
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::size_t base = l * 10;
    IcLstmWeights w{p(base), p(base + 1), p(base + 2), p(base + 3), p(base + 4),
                    p(base + 5), p(base + 6), p(base + 7), p(base + 8), p(base + 9)};
    LstmState state{constant(Tensor({B, H}, 0.0)), constant(Tensor({B, H}, 0.0))};
    for (auto& in : inputs) {
      state = iclstm_cell(in, state, w);
      in = state.h;
    }
  }
  const std::size_t head = spec_.num_layers * 10;
  return affine(inputs.back(), p(head), p(head + 1));
}

// ---------------------------------------------------------------------------
// h_t = relu(U u_t + W h_{t-1} + D2 u_{t-1} + b_h)
// y_t = relu(V h_t + D1 h_{t-1} + D3 u_t + b_y)

Icrnn::Icrnn(ModelSpec spec, std::uint64_t seed) : ExpandedInputModel(std::move(spec)) {
  const std::size_t H = spec_.model_dim, in = 2 * spec_.input_dim;
  Initializer init(seed);
  init.fan_in(add_parameter("U", {in, H}, true));
  init.fan_in(add_parameter("W", {H, H}, true));
  init.fan_in(add_parameter("D2", {in, H}, true));
  add_parameter("b_h", {H}, false);
  init.fan_in(add_parameter("V", {H, H}, true));
  init.fan_in(add_parameter("D1", {H, H}, true));
  init.fan_in(add_parameter("D3", {in, H}, true));
  add_parameter("b_y", {H}, false);
  init.fan_in(add_parameter("head.w", {H, spec_.output_dim}, true));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var Icrnn::forward_expanded(const Var& x_hat) const {
  check_input(x_hat, 2 * spec_.input_dim);
  check_invariants();
  const std::size_t B = x_hat->value.dim(0), H = spec_.model_dim;
  auto U = p(0), W = p(1), D2 = p(2), b_h = p(3), V = p(4), D1 = p(5), D3 = p(6), b_y = p(7);
  Var h = constant(Tensor({B, H}, 0.0));
  Var h_prev = h;
  Var u_prev = constant(Tensor({B, 2 * spec_.input_dim}, 0.0));
  Var u;
  for (std::size_t t = 0; t < spec_.sequence_length; ++t) {
    u = time_step(x_hat, t);
    h_prev = h;
    h = relu(add(add(add(matmul(u, U), matmul(h_prev, W)), matmul(u_prev, D2)), b_h));
    u_prev = u;
  }
  auto y = relu(add(add(add(matmul(h, V), matmul(h_prev, D1)), matmul(u, D3)), b_y));
  return affine(y, p(8), p(9));
}

// ---------------------------------------------------------------------------
// z_{i+1} = relu(W_z z_i + W_y y + b_i), z_0 = 0

Icfnn::Icfnn(ModelSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
  const std::size_t H = spec_.model_dim;
  const std::size_t in = spec_.input_dim * spec_.sequence_length;
  Initializer init(seed);
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::string pre = fmt::format("layer{}.", l);
    init.fan_in(add_parameter(pre + "w_y", {in, H}, false));
    if (l > 0) init.fan_in(add_parameter(pre + "w_z", {H, H}, true));
    add_parameter(pre + "b", {H}, false);
  }
  init.fan_in(add_parameter("head.w", {H, spec_.output_dim}, true));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var Icfnn::forward(const Var& x) const {
  check_input(x, spec_.input_dim);
  check_invariants();
  const std::size_t B = x->value.dim(0);
  auto y = reshape(x, Shape{B, spec_.input_dim * spec_.sequence_length});
  Var z;
  std::size_t idx = 0;
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    auto pre = matmul(y, p(idx++));
    if (l > 0) pre = add(pre, matmul(z, p(idx++)));
    z = relu(add(pre, p(idx++)));
  }
  return affine(z, p(idx), p(idx + 1));
}

// ---------------------------------------------------------------------------
// Gate order in the fused weights: input, forget, cell, output.

Lstm::Lstm(ModelSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
  const std::size_t H = spec_.model_dim;
  Initializer init(seed);
  std::size_t in = spec_.input_dim;
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::string pre = fmt::format("layer{}.", l);
    init.fan_in(add_parameter(pre + "w_x", {in, 4 * H}, false));
    init.fan_in(add_parameter(pre + "w_h", {H, 4 * H}, false));
    add_parameter(pre + "b", {4 * H}, false);
    in = H;
  }
  init.fan_in(add_parameter("head.w", {H, spec_.output_dim}, false));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var Lstm::forward(const Var& x) const {
  check_input(x, spec_.input_dim);
  const std::size_t B = x->value.dim(0), H = spec_.model_dim;
  std::vector<Var> inputs;
  for (std::size_t t = 0; t < spec_.sequence_length; ++t) inputs.push_back(time_step(x, t));
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    auto w_x = p(3 * l), w_h = p(3 * l + 1), b = p(3 * l + 2);
    Var h = constant(Tensor({B, H}, 0.0));
    Var c = h;
    for (auto& in : inputs) {
      auto gates = add(add(matmul(in, w_x), matmul(h, w_h)), b);
      auto i = sigmoid(slice(gates, 1, 0, H));
      auto f = sigmoid(slice(gates, 1, H, H));
      auto g = tanh(slice(gates, 1, 2 * H, H));
      auto o = sigmoid(slice(gates, 1, 3 * H, H));
      c = add(mul(f, c), mul(i, g));
      h = mul(o, tanh(c));
      in = h;
    }
  }
  const std::size_t head = 3 * spec_.num_layers;
  return affine(inputs.back(), p(head), p(head + 1));
}

// ---------------------------------------------------------------------------

Eot::Eot(ModelSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
  const std::size_t d = spec_.model_dim, f = spec_.ff_dim;
  Initializer init(seed);
  init.fan_in(add_parameter("embed.w", {spec_.input_dim, d}, false));
  add_parameter("embed.b", {d}, false);
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    const std::string pre = fmt::format("layer{}.", l);
    for (const char* n : {"q", "k", "v", "o"}) {
      init.fan_in(add_parameter(pre + "w_" + n, {d, d}, false));
      add_parameter(pre + "b_" + n, {d}, false);
    }
    init.fill(add_parameter(pre + "ln1.gamma", {d}, false), 1.0);
    add_parameter(pre + "ln1.beta", {d}, false);
    init.fan_in(add_parameter(pre + "ffn.w1", {d, f}, false));
    add_parameter(pre + "ffn.b1", {f}, false);
    init.fan_in(add_parameter(pre + "ffn.w2", {f, d}, false));
    add_parameter(pre + "ffn.b2", {d}, false);
    init.fill(add_parameter(pre + "ln2.gamma", {d}, false), 1.0);
    add_parameter(pre + "ln2.beta", {d}, false);
  }
  init.fan_in(add_parameter("head.w", {d, spec_.output_dim}, false));
  add_parameter("head.b", {spec_.output_dim}, false);
}

Var Eot::forward(const Var& x) const {
  check_input(x, spec_.input_dim);
  const std::size_t T = spec_.sequence_length, d = spec_.model_dim;
  const std::size_t heads = spec_.num_heads, dh = d / heads;
  auto h = add(affine(x, p(0), p(1)), constant(positional_encoding(T, d)));
  std::size_t idx = 2;
  for (std::size_t l = 0; l < spec_.num_layers; ++l, idx += 16) {
    auto q = affine(h, p(idx), p(idx + 1));
    auto k = affine(h, p(idx + 2), p(idx + 3));
    auto v = affine(h, p(idx + 4), p(idx + 5));
    std::vector<Var> outs;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      auto qh = slice(q, 2, hd * dh, dh), kh = slice(k, 2, hd * dh, dh), vh = slice(v, 2, hd * dh, dh);
      auto scores = matmul(qh, transpose(kh));
      outs.push_back(matmul(convex_r_softmax(scores, 0.0, std::sqrt(static_cast<double>(dh))), vh));
    }
    auto attn = affine(heads == 1 ? outs[0] : concat(outs, 2), p(idx + 6), p(idx + 7));
    auto x1 = layer_norm(add(h, attn), p(idx + 8), p(idx + 9));
    auto f = affine(relu(affine(x1, p(idx + 10), p(idx + 11))), p(idx + 12), p(idx + 13));
    h = layer_norm(add(x1, f), p(idx + 14), p(idx + 15));
  }
  return affine(last_token(h), p(idx), p(idx + 1));
}

}  // namespace icnn
