#include <cmath>
#include <random>

#include "doctest.h"
#include "icnn/models.hpp"
#include "scalar_oracle.hpp"

using namespace icnn;
using oracle::Mat;
using oracle::Vec;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = dist(rng);
  return t;
}

void randomize(Model& m, std::uint64_t seed, double scale = 0.6) {
  std::mt19937_64 rng(seed);
  for (auto& p : m.parameters()) {
    p.value = random_tensor(p.value.shape(), rng, p.non_negative ? 0.0 : -scale, scale);
  }
}

void zero(Model& m) {
  for (auto& p : m.parameters()) std::fill(p.value.vec().begin(), p.value.vec().end(), 0.0);
}

Mat seq_of(const Tensor& x, std::size_t b) {
  const std::size_t T = x.dim(1), d = x.dim(2);
  Mat out(T, Vec(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) out[t][j] = x.at(b, t, j);
  return out;
}

const Tensor& val(const Model& m, const char* name) { return m.parameter(name).value; }

Vec add_vec(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// ---- per-architecture scalar-loop oracles ---------------------------------

Vec iceot_oracle(const Model& m, const Mat& x) {
  const auto& s = m.spec();
  const std::size_t T = x.size(), d = s.model_dim;
  Mat h(T);
  for (std::size_t t = 0; t < T; ++t) {
    h[t] = add_vec(oracle::vecmat(oracle::expand(x[t]), oracle::to_mat(val(m, "embed.w"))),
                   val(m, "embed.b").vec());
    for (std::size_t j = 0; j < d; ++j) h[t][j] += oracle::pe(t, j, d);
  }
  Mat a = oracle::attention(h, oracle::to_mat(val(m, "layer0.w_x")), val(m, "layer0.d_q").vec(),
                            val(m, "layer0.d_k").vec(), val(m, "layer0.d_v").vec(), s.num_heads,
                            s.r, s.tau);
  Vec last;
  for (std::size_t t = 0; t < T; ++t) {
    Vec x1 = add_vec(h[t], a[t]);
    Vec hid = add_vec(oracle::vecmat(x1, oracle::to_mat(val(m, "layer0.ffn.w1"))),
                      val(m, "layer0.ffn.b1").vec());
    for (double& v : hid) v = oracle::relu(v);
    Vec f = add_vec(oracle::vecmat(hid, oracle::to_mat(val(m, "layer0.ffn.w2"))),
                    val(m, "layer0.ffn.b2").vec());
    last = add_vec(x1, f);
  }
  return add_vec(oracle::vecmat(last, oracle::to_mat(val(m, "head.w"))), val(m, "head.b").vec());
}

struct CellOut {
  Vec h, c;
};

CellOut iclstm_cell_oracle(const Model& m, const Vec& x_hat, const Vec& h, const Vec& c) {
  Vec s = add_vec(oracle::vecmat(x_hat, oracle::to_mat(val(m, "layer0.w_x"))),
                  oracle::vecmat(h, oracle::to_mat(val(m, "layer0.w_h"))));
  const std::size_t H = s.size();
  auto gate = [&](const char* d, const char* b, std::size_t j) {
    return oracle::relu(val(m, d)[j] * s[j] + val(m, b)[j]);
  };
  CellOut out{Vec(H), Vec(H)};
  for (std::size_t j = 0; j < H; ++j) {
    const double f = gate("layer0.d_f", "layer0.b_f", j);
    const double i = gate("layer0.d_i", "layer0.b_i", j);
    const double o = gate("layer0.d_o", "layer0.b_o", j);
    const double ct = gate("layer0.d_c", "layer0.b_c", j);
    out.c[j] = f * c[j] + i * ct;
    out.h[j] = o * oracle::relu(out.c[j]);
  }
  return out;
}

Vec iclstm_oracle(const Model& m, const Mat& x) {
  const std::size_t H = m.spec().model_dim;
  Vec h(H, 0.0), c(H, 0.0);
  for (const auto& xt : x) {
    auto out = iclstm_cell_oracle(m, oracle::expand(xt), h, c);
    h = out.h;
    c = out.c;
  }
  return add_vec(oracle::vecmat(h, oracle::to_mat(val(m, "head.w"))), val(m, "head.b").vec());
}

Vec icrnn_oracle(const Model& m, const Mat& x) {
  const std::size_t H = m.spec().model_dim;
  auto M = [&](const char* n) { return oracle::to_mat(val(m, n)); };
  Vec h(H, 0.0), h_prev(H, 0.0), u_prev(2 * x[0].size(), 0.0), u;
  for (const auto& xt : x) {
    u = oracle::expand(xt);
    h_prev = h;
    Vec pre = add_vec(add_vec(oracle::vecmat(u, M("U")), oracle::vecmat(h_prev, M("W"))),
                      add_vec(oracle::vecmat(u_prev, M("D2")), val(m, "b_h").vec()));
    for (std::size_t j = 0; j < H; ++j) h[j] = oracle::relu(pre[j]);
    u_prev = u;
  }
  Vec pre = add_vec(add_vec(oracle::vecmat(h, M("V")), oracle::vecmat(h_prev, M("D1"))),
                    add_vec(oracle::vecmat(u, M("D3")), val(m, "b_y").vec()));
  for (double& v : pre) v = oracle::relu(v);
  return add_vec(oracle::vecmat(pre, M("head.w")), val(m, "head.b").vec());
}

Vec icfnn_oracle(const Model& m, const Mat& x) {
  Vec y;
  for (const auto& row : x) y.insert(y.end(), row.begin(), row.end());
  Vec z;
  for (std::size_t l = 0; l < m.spec().num_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    Vec a = oracle::vecmat(y, oracle::to_mat(val(m, (pre + "w_y").c_str())));
    if (l > 0) a = add_vec(a, oracle::vecmat(z, oracle::to_mat(val(m, (pre + "w_z").c_str()))));
    a = add_vec(a, val(m, (pre + "b").c_str()).vec());
    for (double& v : a) v = oracle::relu(v);
    z = a;
  }
  return add_vec(oracle::vecmat(z, oracle::to_mat(val(m, "head.w"))), val(m, "head.b").vec());
}

Vec lstm_oracle(const Model& m, const Mat& x) {
  const std::size_t H = m.spec().model_dim;
  Vec h(H, 0.0), c(H, 0.0);
  for (const auto& xt : x) {
    Vec g = add_vec(add_vec(oracle::vecmat(xt, oracle::to_mat(val(m, "layer0.w_x"))),
                            oracle::vecmat(h, oracle::to_mat(val(m, "layer0.w_h")))),
                    val(m, "layer0.b").vec());
    for (std::size_t j = 0; j < H; ++j) {
      const double i = oracle::sigmoid(g[j]), f = oracle::sigmoid(g[H + j]);
      const double cc = std::tanh(g[2 * H + j]), o = oracle::sigmoid(g[3 * H + j]);
      c[j] = f * c[j] + i * cc;
      h[j] = o * std::tanh(c[j]);
    }
  }
  return add_vec(oracle::vecmat(h, oracle::to_mat(val(m, "head.w"))), val(m, "head.b").vec());
}

Vec layer_norm(const Vec& x, const Vec& g, const Vec& b) {
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return out;
}

Vec eot_oracle(const Model& m, const Mat& x) {
  const std::size_t T = x.size(), d = m.spec().model_dim;
  auto M = [&](const char* n) { return oracle::to_mat(val(m, n)); };
  auto V = [&](const char* n) { return val(m, n).vec(); };
  Mat h(T);
  for (std::size_t t = 0; t < T; ++t) {
    h[t] = add_vec(oracle::vecmat(x[t], M("embed.w")), V("embed.b"));
    for (std::size_t j = 0; j < d; ++j) h[t][j] += oracle::pe(t, j, d);
  }
  Mat q(T), k(T), v(T);
  for (std::size_t t = 0; t < T; ++t) {
    q[t] = add_vec(oracle::vecmat(h[t], M("layer0.w_q")), V("layer0.b_q"));
    k[t] = add_vec(oracle::vecmat(h[t], M("layer0.w_k")), V("layer0.b_k"));
    v[t] = add_vec(oracle::vecmat(h[t], M("layer0.w_v")), V("layer0.b_v"));
  }
  Vec out;
  for (std::size_t t = 0; t < T; ++t) {
    Vec z(T, 0.0);
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t j = 0; j < d; ++j) z[s] += q[t][j] * k[s][j];
    Vec a = oracle::softmax(z, 0.0, std::sqrt(static_cast<double>(d)));
    Vec mix(d, 0.0);
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t j = 0; j < d; ++j) mix[j] += a[s] * v[s][j];
    Vec attn = add_vec(oracle::vecmat(mix, M("layer0.w_o")), V("layer0.b_o"));
    Vec x1 = layer_norm(add_vec(h[t], attn), V("layer0.ln1.gamma"), V("layer0.ln1.beta"));
    Vec hid = add_vec(oracle::vecmat(x1, M("layer0.ffn.w1")), V("layer0.ffn.b1"));
    for (double& e : hid) e = oracle::relu(e);
    Vec f = add_vec(oracle::vecmat(hid, M("layer0.ffn.w2")), V("layer0.ffn.b2"));
    out = layer_norm(add_vec(x1, f), V("layer0.ln2.gamma"), V("layer0.ln2.beta"));
  }
  return add_vec(oracle::vecmat(out, M("head.w")), V("head.b"));
}

ModelSpec small_spec(Architecture arch, std::size_t d_in, std::size_t hidden, std::size_t T) {
  ModelSpec s = default_spec(arch, d_in, 1, T);
  s.model_dim = hidden;
  s.ff_dim = 3;
  s.num_heads = 1;
  return s;
}

}  // namespace

TEST_CASE("expand_input") {
  CHECK(expand_input(constant(Tensor({1, 2}, {1, 2})))->value == Tensor({1, 4}, {1, 2, -1, -2}));
  CHECK(expand_input(constant(Tensor({1, 3}, 0.0)))->value == Tensor({1, 6}, 0.0));
  std::mt19937_64 rng(1);
  auto x = random_tensor({5, 3}, rng);
  auto e = expand_input(constant(x))->value;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(e.at(i, j) == x.at(i, j));
      CHECK(e.at(i, j + 3) == -x.at(i, j));
    }
}

TEST_CASE("positional encoding") {
  auto pe = positional_encoding(4, 8);
  for (std::size_t j = 0; j < 8; ++j) CHECK(pe.at(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe.at(1, 0) == doctest::Approx(0.8414709848).epsilon(1e-9));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(pe.at(t, j) - oracle::pe(t, j, 8)) < 1e-15);
}

TEST_CASE("convex_r_softmax values") {
  auto a = convex_r_softmax(constant(Tensor({2}, {0, 0})), 3.0, 1.0)->value;
  CHECK(a[0] == doctest::Approx(0.5));
  CHECK(a[1] == doctest::Approx(0.5));
  auto b = convex_r_softmax(constant(Tensor({2}, {1, 0})), 0.0, 1.0)->value;
  const double e = std::exp(1.0);
  CHECK(std::abs(b[0] - e / (e + 1)) < 1e-15);
  CHECK(std::abs(b[1] - 1 / (e + 1)) < 1e-15);
  CHECK(b[0] == doctest::Approx(0.73106).epsilon(1e-5));
  // r cancels in the ratio.
  auto ref = oracle::softmax({1, 0}, 7.0, 1.0);
  auto c = convex_r_softmax(constant(Tensor({2}, {1, 0})), 7.0, 1.0)->value;
  CHECK(std::abs(c[0] - ref[0]) < 1e-15);
  CHECK(std::abs(c[0] - b[0]) < 1e-15);
  CHECK_THROWS_AS(convex_r_softmax(constant(Tensor({2}, {1, 0})), 0.0, 0.0), ContractError);
  CHECK_THROWS_AS(convex_r_softmax(constant(Tensor({2}, {NAN, 0})), 0.0, 1.0), NumericError);
}

TEST_CASE("property: softmax rows are positive and sum to one") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor({3, 7, 7}, rng, -30.0, 30.0);
    auto a = convex_r_softmax(constant(z), 0.3, 0.7)->value;
    for (std::size_t row = 0; row < 21; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(a[row * 7 + j] > 0.0);
        s += a[row * 7 + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("convex attention special cases") {
  std::mt19937_64 rng(4);
  auto w_x = random_tensor({4, 4}, rng, 0.0, 1.0);
  auto dq = random_tensor({4}, rng, 0.0, 1.0), dk = random_tensor({4}, rng, 0.0, 1.0),
       dv = random_tensor({4}, rng, 0.0, 1.0);

  SUBCASE("single token returns V") {
    auto x = random_tensor({1, 4}, rng);
    ConvexAttentionWeights w{constant(w_x), constant(dq), constant(dk), constant(dv)};
    auto out = convex_multihead_attention(constant(x), w, 1, 0.0, 1.0)->value;
    auto proj = oracle::vecmat(x.vec(), oracle::to_mat(w_x));
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out[j] - proj[j] * dv[j]) < 1e-14);
  }
  SUBCASE("zero query scaling gives uniform weights") {
    auto x = random_tensor({3, 4}, rng);
    ConvexAttentionWeights w{constant(w_x), constant(Tensor({4}, 0.0)), constant(dk), constant(dv)};
    auto out = convex_multihead_attention(constant(x), w, 1, 0.0, 1.0)->value;
    auto proj = oracle::matmul(oracle::to_mat(x), oracle::to_mat(w_x));
    for (std::size_t j = 0; j < 4; ++j) {
      const double mean = (proj[0][j] + proj[1][j] + proj[2][j]) * dv[j] / 3.0;
      for (std::size_t t = 0; t < 3; ++t) CHECK(std::abs(out.at(t, j) - mean) < 1e-12);
    }
  }
  SUBCASE("negative constrained weight is rejected") {
    auto bad = dq;
    bad[2] = -0.1;
    ConvexAttentionWeights w{constant(w_x), constant(bad), constant(dk), constant(dv)};
    CHECK_THROWS_AS(convex_multihead_attention(constant(random_tensor({3, 4}, rng)), w, 1, 0, 1),
                    InvariantError);
  }
}

TEST_CASE("convex attention matches the scalar-loop oracle") {
  std::mt19937_64 rng(17);
  for (std::size_t heads : {1u, 2u}) {
    CAPTURE(heads);
    auto x = random_tensor({3, 4}, rng);
    auto w_x = random_tensor({4, 4}, rng, 0.0, 1.0);
    auto dq = random_tensor({4}, rng, 0.0, 1.0), dk = random_tensor({4}, rng, 0.0, 1.0),
         dv = random_tensor({4}, rng, 0.0, 1.0);
    ConvexAttentionWeights w{constant(w_x), constant(dq), constant(dk), constant(dv)};
    auto got = convex_multihead_attention(constant(x), w, heads, 0.2, 0.8)->value;
    auto want = oracle::attention(oracle::to_mat(x), oracle::to_mat(w_x), dq.vec(), dk.vec(),
                                  dv.vec(), heads, 0.2, 0.8);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(got.at(t, j) - want[t][j]) < 1e-12);
  }
}

TEST_CASE("property: attention output is non-expansive in the max norm") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 2 + trial % 6, d = 4;
    auto x = random_tensor({T, d}, rng, -2.0, 2.0);
    auto w_x = random_tensor({d, d}, rng, 0.0, 1.0);
    auto dq = random_tensor({d}, rng, 0.0, 1.0), dk = random_tensor({d}, rng, 0.0, 1.0),
         dv = random_tensor({d}, rng, 0.0, 1.0);
    ConvexAttentionWeights w{constant(w_x), constant(dq), constant(dk), constant(dv)};
    auto y = convex_multihead_attention(constant(x), w, 1, 0.0, 1.0)->value;
    auto v = mul(matmul(constant(x), constant(w_x)), constant(dv))->value;
    double v_max = 0.0;
    for (double e : v.vec()) v_max = std::max(v_max, std::abs(e));
    for (std::size_t t = 0; t < T; ++t) {
      double row = 0.0;
      for (std::size_t j = 0; j < d; ++j) row = std::max(row, std::abs(y.at(t, j)));
      CHECK(row <= v_max + 1e-12);
    }
  }
}

TEST_CASE("iceot block") {
  std::mt19937_64 rng(2);
  const std::size_t d = 4, f = 6;
  auto x = random_tensor({3, d}, rng);
  auto zero_attn = ConvexAttentionWeights{constant(Tensor({d, d}, 0.0)), constant(Tensor({d}, 0.0)),
                                          constant(Tensor({d}, 0.0)), constant(Tensor({d}, 0.0))};
  auto zero_ffn = ConvexFeedForwardWeights{constant(Tensor({d, f}, 0.0)), constant(Tensor({f}, 0.0)),
                                           constant(Tensor({f, d}, 0.0)), constant(Tensor({d}, 0.0))};
  CHECK(iceot_block(constant(x), zero_attn, zero_ffn, 1, 0, 1)->value == x);

  ConvexAttentionWeights attn{constant(random_tensor({d, d}, rng, 0, 1)),
                              constant(random_tensor({d}, rng, 0, 1)),
                              constant(random_tensor({d}, rng, 0, 1)),
                              constant(random_tensor({d}, rng, 0, 1))};
  auto w1 = random_tensor({d, f}, rng, 0, 1), w2 = random_tensor({f, d}, rng, 0, 1);
  ConvexFeedForwardWeights ffn{constant(w1), constant(Tensor({f}, 0.0)), constant(w2),
                               constant(Tensor({d}, 0.0))};
  CHECK(iceot_block(constant(Tensor({3, d}, 0.0)), attn, ffn, 1, 0, 1)->value == Tensor({3, d}, 0.0));

  SUBCASE("composition of sub-operations") {
    auto b1 = random_tensor({f}, rng), b2 = random_tensor({d}, rng);
    ConvexFeedForwardWeights ffn_b{constant(w1), constant(b1), constant(w2), constant(b2)};
    auto got = iceot_block(constant(x), attn, ffn_b, 1, 0, 1)->value;
    auto a = convex_multihead_attention(constant(x), attn, 1, 0, 1)->value;
    for (std::size_t t = 0; t < 3; ++t) {
      Vec x1(d);
      for (std::size_t j = 0; j < d; ++j) x1[j] = x.at(t, j) + a.at(t, j);
      Vec hid = add_vec(oracle::vecmat(x1, oracle::to_mat(w1)), b1.vec());
      for (double& e : hid) e = oracle::relu(e);
      Vec out = add_vec(add_vec(oracle::vecmat(hid, oracle::to_mat(w2)), b2.vec()), x1);
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(got.at(t, j) - out[j]) < 1e-12);
    }
  }
}

TEST_CASE("IC-EoT forward") {
  ModelSpec s = default_spec(Architecture::IcEot, 3, 2, 5);
  s.model_dim = 8;
  s.ff_dim = 12;
  auto m = make_model(s, 1);
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 5, 3}, rng);

  SUBCASE("zero parameters give zero output") {
    zero(*m);
    CHECK(m->forward(constant(x))->value == Tensor({2, 2}, 0.0));
  }
  SUBCASE("matches the scalar-loop oracle") {
    randomize(*m, 10);
    auto got = m->forward(constant(x))->value;
    for (std::size_t b = 0; b < 2; ++b) {
      auto want = iceot_oracle(*m, seq_of(x, b));
      for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(got.at(b, j) - want[j]) < 1e-12);
    }
  }
  SUBCASE("two heads") {
    s.num_heads = 2;
    auto m2 = make_model(s, 1);
    randomize(*m2, 10);
    auto got = m2->forward(constant(x))->value;
    auto want = iceot_oracle(*m2, seq_of(x, 1));
    CHECK(std::abs(got.at(1, 0) - want[0]) < 1e-12);
  }
  SUBCASE("wrong window length") {
    CHECK_THROWS_AS(m->forward(constant(Tensor({1, 4, 3}, 0.0))), DimensionError);
  }
  SUBCASE("negative constrained weight") {
    m->parameter("layer0.ffn.w1").value[0] = -1.0;
    CHECK_THROWS_AS(m->forward(constant(x)), InvariantError);
  }
}

TEST_CASE("IC-EoT scaling the positive half never lowers the output") {
  ModelSpec s = default_spec(Architecture::IcEot, 3, 2, 4);
  s.model_dim = 8;
  s.ff_dim = 16;
  auto m = make_model(s, 5);
  auto& eot = dynamic_cast<const ExpandedInputModel&>(*m);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({1, 4, 3}, rng, 0.0, 1.0);
    Tensor x_hat({1, 4, 6}, 0.0), x_hat2({1, 4, 6}, 0.0);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t j = 0; j < 3; ++j) {
        x_hat.at(0, t, j) = x.at(0, t, j);
        x_hat2.at(0, t, j) = 2.0 * x.at(0, t, j);
      }
    auto y1 = eot.forward_expanded(constant(x_hat))->value;
    auto y2 = eot.forward_expanded(constant(x_hat2))->value;
    for (std::size_t j = 0; j < 2; ++j) CHECK(y2[j] >= y1[j] - 1e-10);
  }
}

TEST_CASE("IC-EoT golden value") {
  ModelSpec s = default_spec(Architecture::IcEot, 4, 3, 6);
  auto m = make_model(s, 42);
  std::mt19937_64 rng(42);
  auto x = random_tensor({1, 6, 4}, rng);
  auto y = m->forward(constant(x))->value;
  const double golden[] = {1.2605293252749874, 1.3150782243124288, 1.4523812435902932};
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(y[j] - golden[j]) < 1e-9 * golden[j]);
}

TEST_CASE("IC-EoT input gradient matches finite differences") {
  ModelSpec s = default_spec(Architecture::IcEot, 3, 1, 5);
  s.model_dim = 16;
  s.ff_dim = 32;
  auto m = make_model(s, 8);
  randomize(*m, 9, 0.3);
  std::mt19937_64 rng(31);
  auto f = [&](const Var& x) { return sum_all(m->forward(x)); };
  CHECK(finite_diff_check(f, random_tensor({1, 5, 3}, rng)) < 1e-4);
}

TEST_CASE("IC-LSTM cell") {
  ModelSpec s = small_spec(Architecture::IcLstm, 2, 2, 2);
  auto m = make_model(s, 3);
  auto P = [&](const char* n) { return param(m->parameter(n)); };
  auto weights = [&] {
    return IcLstmWeights{P("layer0.w_x"), P("layer0.w_h"), P("layer0.d_f"), P("layer0.d_i"),
                         P("layer0.d_o"), P("layer0.d_c"), P("layer0.b_f"), P("layer0.b_i"),
                         P("layer0.b_o"), P("layer0.b_c")};
  };
  std::mt19937_64 rng(4);
  auto x_hat = random_tensor({1, 4}, rng);

  SUBCASE("zero weights") {
    zero(*m);
    LstmState prev{constant(random_tensor({1, 2}, rng, 0, 1)), constant(random_tensor({1, 2}, rng))};
    auto next = iclstm_cell(constant(x_hat), prev, weights());
    CHECK(next.h->value == Tensor({1, 2}, 0.0));
    CHECK(next.c->value == Tensor({1, 2}, 0.0));
  }
  SUBCASE("open forget gate and closed input gate pass the cell through") {
    zero(*m);
    m->parameter("layer0.b_f").value = Tensor({2}, {1.0, 1.0});
    auto c_prev = random_tensor({1, 2}, rng);
    LstmState prev{constant(random_tensor({1, 2}, rng, 0, 1)), constant(c_prev)};
    auto next = iclstm_cell(constant(x_hat), prev, weights());
    CHECK(next.c->value == c_prev);
  }
  SUBCASE("random step matches the oracle") {
    randomize(*m, 5);
    auto h = random_tensor({1, 2}, rng, 0, 1), c = random_tensor({1, 2}, rng);
    auto next = iclstm_cell(constant(x_hat), {constant(h), constant(c)}, weights());
    auto want = iclstm_cell_oracle(*m, x_hat.vec(), h.vec(), c.vec());
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(std::abs(next.h->value[j] - want.h[j]) < 1e-12);
      CHECK(std::abs(next.c->value[j] - want.c[j]) < 1e-12);
    }
  }
  SUBCASE("negative constrained weight") {
    m->parameter("layer0.d_c").value[1] = -0.5;
    LstmState prev{constant(Tensor({1, 2}, 0.0)), constant(Tensor({1, 2}, 0.0))};
    CHECK_THROWS_AS(iclstm_cell(constant(x_hat), prev, weights()), InvariantError);
  }
}

TEST_CASE("ICFNN base case: z1 = g(W_y y)") {
  ModelSpec s = small_spec(Architecture::Icfnn, 2, 3, 1);
  s.num_layers = 1;
  auto m = make_model(s, 1);
  randomize(*m, 2);
  for (auto& p : m->parameters())
    if (p.name == "layer0.b") std::fill(p.value.vec().begin(), p.value.vec().end(), 0.0);
  m->parameter("head.w").value = Tensor({3, 1}, {1, 1, 1});
  m->parameter("head.b").value = Tensor({1}, {0.0});
  auto x = Tensor({1, 1, 2}, {0.3, -0.7});
  auto w = m->parameter("layer0.w_y").value;
  double want = 0.0;
  for (std::size_t j = 0; j < 3; ++j) want += oracle::relu(0.3 * w.at(0, j) - 0.7 * w.at(1, j));
  CHECK(std::abs(m->forward(constant(x))->value.item() - want) < 1e-14);
}

TEST_CASE("ICRNN with zero weights outputs g2(0) through the head") {
  ModelSpec s = small_spec(Architecture::Icrnn, 2, 2, 3);
  auto m = make_model(s, 1);
  zero(*m);
  m->parameter("head.w").value = Tensor({2, 1}, {1, 1});
  std::mt19937_64 rng(1);
  CHECK(m->forward(constant(random_tensor({1, 3, 2}, rng)))->value.item() == 0.0);
}

TEST_CASE("every architecture matches its scalar-loop oracle on a 2-step, 2-unit instance") {
  std::mt19937_64 rng(55);
  auto x = random_tensor({2, 2, 2}, rng);
  struct Case {
    Architecture arch;
    Vec (*oracle_fn)(const Model&, const Mat&);
  };
  for (auto c : {Case{Architecture::IcEot, iceot_oracle}, Case{Architecture::IcLstm, iclstm_oracle},
                 Case{Architecture::Icrnn, icrnn_oracle}, Case{Architecture::Icfnn, icfnn_oracle},
                 Case{Architecture::Lstm, lstm_oracle}, Case{Architecture::Eot, eot_oracle}}) {
    CAPTURE(to_string(c.arch));
    auto m = make_model(small_spec(c.arch, 2, 2, 2), 7);
    randomize(*m, 8);
    auto got = m->forward(constant(x))->value;
    for (std::size_t b = 0; b < 2; ++b) {
      auto want = c.oracle_fn(*m, seq_of(x, b));
      CHECK(std::abs(got.at(b, 0) - want[0]) < 1e-12);
    }
  }
}

TEST_CASE("default parameter counts are ordered IC-EoT < EoT < LSTM") {
  auto count = [](Architecture a) { return make_model(default_spec(a, 15, 11, 12), 1)->parameter_count(); };
  const auto iceot = count(Architecture::IcEot), eot = count(Architecture::Eot),
             lstm = count(Architecture::Lstm), iclstm = count(Architecture::IcLstm);
  MESSAGE("IC-EoT " << iceot << ", IC-LSTM " << iclstm << ", EoT " << eot << ", LSTM " << lstm);
  CHECK(iceot < eot);
  CHECK(eot < lstm);
}

TEST_CASE("freshly initialised input-convex models satisfy their constraints") {
  for (auto a : {Architecture::IcEot, Architecture::IcLstm, Architecture::Icrnn, Architecture::Icfnn}) {
    auto m = make_model(default_spec(a, 4, 2, 3), 11);
    CHECK_NOTHROW(m->check_invariants());
  }
  ModelSpec bad = default_spec(Architecture::IcEot, 4, 2, 3);
  bad.num_heads = 3;
  CHECK_THROWS_AS(make_model(bad, 1), ContractError);
  bad.num_heads = 1;
  bad.tau = 0.0;
  CHECK_THROWS_AS(make_model(bad, 1), ContractError);
  CHECK(parse_architecture("iceot") == Architecture::IcEot);
  CHECK(parse_architecture("IC-LSTM") == Architecture::IcLstm);
  CHECK_THROWS_AS(parse_architecture("gru"), ContractError);
}
