#include <cmath>

#include "doctest.h"
#include "memvit/attention/memvit_attention.hpp"
#include "memvit/numerics/grad_check.hpp"
#include "support.hpp"

using namespace memvit;
using memvit::testing::bit_identical;
using memvit::testing::max_abs_diff;
using memvit::testing::random_matrix;
using T = Tensor<double>;
using Tokens = TokenTensor<double>;

namespace {

Tokens random_tokens(Triple e, Index d, std::uint64_t seed, std::int64_t clip = 0, std::int64_t video = 0) {
  return Tokens(T(random_matrix(e.volume(), d, seed)), e, clip, video);
}

AttentionLayerConfig layer_config(Index memory_len, Triple extents = {4, 4, 4}, Index d = 8, Index heads = 2) {
  AttentionLayerConfig c;
  c.d_in = d;
  c.d_out = d;
  c.heads = heads;
  c.input_extents = extents;
  c.pool_kv.kernel = {3, 3, 3};
  c.pool_kv.stride = {1, 2, 2};
  c.pool_kv.padding = {1, 1, 1};
  c.memory_enabled = memory_len > 0;
  c.memory_len = memory_len;
  c.compression_factor = {2, 2, 2};
  return c;
}

Parameter<double>* param(MemoryAttention<double>& layer, const std::string& suffix) {
  std::vector<Parameter<double>*> ps;
  layer.collect_parameters(ps);
  for (auto* p : ps) {
    if (p->name.size() >= suffix.size() && p->name.compare(p->name.size() - suffix.size(), suffix.size(), suffix) == 0)
      return p;
  }
  return nullptr;
}

// Window mean with in-bounds taps only.
Matrix<double> window_mean_oracle(const Matrix<double>& x, Triple in, Triple k, Triple s, Triple p) {
  Triple out;
  for (int a = 0; a < 3; ++a) out[a] = (in[a] + 2 * p[a] - k[a]) / s[a] + 1;
  Matrix<double> y = Matrix<double>::Zero(out.volume(), x.cols());
  for (Index ot = 0; ot < out.t; ++ot)
    for (Index oh = 0; oh < out.h; ++oh)
      for (Index ow = 0; ow < out.w; ++ow) {
        Index n = 0;
        const Index o = (ot * out.h + oh) * out.w + ow;
        for (Index t = ot * s.t - p.t; t < ot * s.t - p.t + k.t; ++t)
          for (Index h = oh * s.h - p.h; h < oh * s.h - p.h + k.h; ++h)
            for (Index w = ow * s.w - p.w; w < ow * s.w - p.w + k.w; ++w) {
              if (t < 0 || h < 0 || w < 0 || t >= in.t || h >= in.h || w >= in.w) continue;
              y.row(o) += x.row((t * in.h + h) * in.w + w);
              ++n;
            }
        y.row(o) /= static_cast<double>(n);
      }
  return y;
}

std::vector<Triple> grid_positions(Triple e, Index t_offset = 0) {
  std::vector<Triple> out;
  for (Index t = 0; t < e.t; ++t)
    for (Index h = 0; h < e.h; ++h)
      for (Index w = 0; w < e.w; ++w) out.push_back({t + t_offset, h, w});
  return out;
}

}  // namespace

TEST_CASE("pooling geometry") {
  PoolSpec id;
  id.learnable = false;
  const Tokens x = random_tokens({2, 3, 3}, 4, 1);
  CHECK(bit_identical(pool(x, id).data.value(), x.data.value()));

  PoolSpec s;
  s.kernel = {3, 3, 3};
  s.stride = {2, 2, 2};
  s.padding = {1, 1, 1};
  s.learnable = false;
  CHECK(s.output_extents({8, 8, 8}) == Triple{4, 4, 4});
  const Tokens big = random_tokens({8, 8, 8}, 2, 2, 5, 9);
  const Tokens y = pool(big, s);
  CHECK(y.extents == Triple{4, 4, 4});
  CHECK(y.clip_index == 5);
  CHECK(y.video_id == 9);

  PoolSpec bad;
  bad.kernel = {5, 1, 1};
  bad.learnable = false;
  CHECK_THROWS_AS(bad.output_extents({2, 4, 4}), ConfigError);
  CHECK_THROWS_AS(pool(random_tokens({2, 4, 4}, 2, 3), bad), ConfigError);
}

TEST_CASE("mean pooling matches a sliding-window oracle") {
  const Triple in{5, 6, 7};
  const Triple k{3, 3, 3}, st{1, 2, 2}, pd{1, 1, 1};
  PoolSpec s{k, st, pd, false, false};
  const Tokens x = random_tokens(in, 3, 4);
  const auto got = pool(x, s).data.value();
  CHECK(max_abs_diff(got, window_mean_oracle(x.data.value(), in, k, st, pd)) <= 1e-12);
}

TEST_CASE("learnable pooling needs exactly one kernel parameter") {
  PoolSpec s;
  s.kernel = {3, 3, 3};
  s.stride = {1, 2, 2};
  s.padding = {1, 1, 1};
  const Tokens x = random_tokens({4, 4, 4}, 2, 5);
  CHECK_THROWS_AS(pool(x, s), ContractError);
  s.learnable = false;
  CHECK_THROWS_AS(pool(x, s, std::optional<T>(T(Matrix<double>::Ones(27, 2)))), ContractError);
}

TEST_CASE("pooled_qkv with identity weights and unit pooling returns the input") {
  AttentionLayerConfig c = layer_config(0);
  c.pool_kv = PoolSpec{};
  Initializer init(1);
  MemoryAttention<double> layer(c, 0, "l", init);
  for (const char* w : {".w_q", ".w_k", ".w_v"}) param(layer, w)->tensor.mutable_value() = Matrix<double>::Identity(8, 8);
  const Tokens x = random_tokens(c.input_extents, 8, 6);
  const auto r = layer.pooled_qkv(x);
  CHECK(bit_identical(r.q.value(), x.data.value()));
  CHECK(bit_identical(r.k.value(), x.data.value()));
  CHECK(bit_identical(r.v.value(), x.data.value()));
}

TEST_CASE("mean pooling commutes with the linear layer") {
  PoolSpec s{{3, 3, 3}, {1, 2, 2}, {1, 1, 1}, false, false};
  const Tokens x = random_tokens({4, 4, 4}, 6, 7);
  const T w(random_matrix(6, 5, 8));
  const auto pool_first = matmul(pool(x, s).data, w).value();
  const auto linear_first = pool(x.with_data(matmul(x.data, w), x.extents), s).data.value();
  CHECK(max_abs_diff(pool_first, linear_first) <= 1e-12);
  PoolSpec unit;
  unit.learnable = false;
  CHECK(bit_identical(matmul(pool(x, unit).data, w).value(), pool(x.with_data(matmul(x.data, w), x.extents), unit).data.value()));
}

TEST_CASE("relative position bias") {
  const Triple e{2, 2, 2};
  const Index dh = 3;
  const Triple max{2, 2, 2};
  const auto qpos = grid_positions(e);
  const auto kpos = grid_positions(e);
  const T q(random_matrix(8, dh, 10));

  SUBCASE("zero tables give zero bias") {
    RelPosTable<double> zero{max, T::zeros(3, dh), T::zeros(3, dh), T::zeros(3, dh)};
    CHECK(rel_pos_bias<double>(q, qpos, kpos, zero).value().isZero());
  }
  SUBCASE("decomposed bias equals a full-table oracle") {
    RelPosTable<double> tab{max, T(random_matrix(3, dh, 11)), T(random_matrix(3, dh, 12)), T(random_matrix(3, dh, 13))};
    const auto bias = rel_pos_bias<double>(q, qpos, kpos, tab).value();
    // Full table over every (dt, dh, dw) offset, built as the axis sum.
    std::vector<Matrix<double>> full(27);
    for (Index a = 0; a < 3; ++a)
      for (Index b = 0; b < 3; ++b)
        for (Index c = 0; c < 3; ++c)
          full[static_cast<std::size_t>((a * 3 + b) * 3 + c)] =
              tab.t.value().row(a) + tab.h.value().row(b) + tab.w.value().row(c);
    for (Index i = 0; i < 8; ++i) {
      for (Index j = 0; j < 8; ++j) {
        const Triple d{qpos[i].t - kpos[j].t + 1, qpos[i].h - kpos[j].h + 1, qpos[i].w - kpos[j].w + 1};
        const double want = q.value().row(i).dot(full[static_cast<std::size_t>((d.t * 3 + d.h) * 3 + d.w)].row(0));
        CHECK(std::abs(bias(i, j) - want) <= 1e-12);
      }
    }
  }
  SUBCASE("joint temporal shift leaves the bias unchanged") {
    const Triple big{6, 2, 2};
    RelPosTable<double> tab{big, T(random_matrix(11, dh, 14)), T(random_matrix(3, dh, 15)), T(random_matrix(3, dh, 16))};
    auto keys = grid_positions(e, -2);
    auto more = grid_positions(e);
    keys.insert(keys.end(), more.begin(), more.end());
    auto shifted_keys = keys;
    for (auto& p : shifted_keys) p.t += 2;
    const auto shifted_q = grid_positions(e, 2);
    CHECK(bit_identical(rel_pos_bias<double>(q, qpos, keys, tab).value(),
                        rel_pos_bias<double>(q, shifted_q, shifted_keys, tab).value()));
  }
  SUBCASE("offsets beyond the table are configuration errors") {
    RelPosTable<double> tab{max, T::zeros(3, dh), T::zeros(3, dh), T::zeros(3, dh)};
    CHECK_THROWS_AS(rel_pos_bias<double>(q, qpos, grid_positions(e, -3), tab), ConfigError);
  }
}

TEST_CASE("attention") {
  SUBCASE("a single key returns its value") {
    const T v(random_matrix(1, 4, 20));
    const auto z = attend<double>(T(random_matrix(5, 4, 21)), T(random_matrix(1, 4, 22)), v, 2).value();
    for (Index i = 0; i < 5; ++i) CHECK(max_abs_diff(z.row(i), v.value()) <= 1e-15);
  }
  SUBCASE("a dominant logit selects its value") {
    Matrix<double> k = Matrix<double>::Identity(3, 3);
    Matrix<double> q(1, 3);
    q << 0, 80, 0;  // logit gap 80 / sqrt(3) > 40
    const T v(random_matrix(3, 3, 23));
    const auto z = attend<double>(T(q), T(k), v, 1).value();
    CHECK(max_abs_diff(z, v.value().row(1)) <= 1e-6);
  }
  SUBCASE("random instance matches a per-element oracle") {
    const Index heads = 2, d = 6, nq = 6, nk = 10;
    const auto q = random_matrix(nq, d, 24), k = random_matrix(nk, d, 25), v = random_matrix(nk, d, 26);
    std::vector<T> bias{T(random_matrix(nq, nk, 27)), T(random_matrix(nq, nk, 28))};
    Matrix<double> mask = Matrix<double>::Zero(nq, nk);
    mask(0, 3) = kMaskedLogit;
    mask(4, 9) = kMaskedLogit;
    const auto z = attend<double>(T(q), T(k), T(v), heads, bias, mask).value();
    const Index dh = d / heads;
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < nq; ++i) {
        std::vector<double> p(nk);
        double mx = -1e300, s = 0;
        for (Index j = 0; j < nk; ++j) {
          double dot = 0;
          for (Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
          p[j] = (dot + bias[h].value()(i, j)) / std::sqrt(double(dh)) + mask(i, j);
          mx = std::max(mx, p[j]);
        }
        for (auto& x : p) s += (x = std::exp(x - mx));
        for (Index c = 0; c < dh; ++c) {
          double want = 0;
          for (Index j = 0; j < nk; ++j) want += p[j] / s * v(j, h * dh + c);
          CHECK(std::abs(z(i, h * dh + c) - want) <= 1e-12);
        }
      }
    }
  }
  SUBCASE("rows sum to one over unmasked keys") {
    Matrix<double> mask = Matrix<double>::Zero(4, 7);
    mask.col(2).setConstant(kMaskedLogit);
    std::vector<Matrix<double>> probs;
    attend<double>(T(random_matrix(4, 4, 29, -5, 5)), T(random_matrix(7, 4, 30, -5, 5)), T(random_matrix(7, 4, 31)), 2,
                   {}, mask, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& p : probs) {
      for (Index i = 0; i < 4; ++i) {
        CHECK(std::abs(p.row(i).sum() - 1.0) <= 1e-6);
        CHECK(p(i, 2) == 0.0);
      }
    }
  }
  SUBCASE("an all-masked row is a contract error") {
    Matrix<double> mask = Matrix<double>::Zero(2, 3);
    mask.row(1).setConstant(kMaskedLogit);
    CHECK_THROWS_AS(attend<double>(T(random_matrix(2, 2, 32)), T(random_matrix(3, 2, 33)), T(random_matrix(3, 2, 34)), 1,
                                   {}, mask),
                    ContractError);
  }
}

TEST_CASE("compression arithmetic") {
  const Tokens x = random_tokens({8, 8, 8}, 3, 40);
  auto compressed_tokens = [&](Triple f) {
    return compress(x, T(Matrix<double>::Constant(f.volume(), 3, 1.0 / double(f.volume()))), f).tokens();
  };
  CHECK(compressed_tokens({1, 1, 1}) == 512);
  CHECK(compressed_tokens({4, 2, 2}) == 32);
  CHECK(compress(x, T(Matrix<double>::Ones(16, 3)), {4, 2, 2}).extents == Triple{2, 4, 4});
  CHECK(512 / compressed_tokens({2, 4, 4}) == 32);
  CHECK(512 / compressed_tokens({4, 4, 4}) == 64);
  CHECK(compress(x, T(Matrix<double>::Ones(16, 3)), {4, 2, 2}).channels() == 3);
  CHECK(compressed_extents({3, 5, 5}, {2, 2, 2}) == Triple{2, 3, 3});
  CHECK_THROWS_AS(compression_plan({4, 4, 4}, {0, 1, 1}), ConfigError);
}

TEST_CASE("M=0 layer equals plain pooled attention bit for bit") {
  AttentionLayerConfig c = layer_config(0);
  c.rel_pos_enabled = false;
  Initializer a(3), b(3);
  MemoryAttention<double> layer(c, 0, "l", a);
  AttentionLayerConfig with_flag = c;
  with_flag.memory_enabled = true;  // M=0 still means no memory
  MemoryAttention<double> flagged(with_flag, 0, "l", b);
  const Tokens x = random_tokens(c.input_extents, 8, 41);
  const auto out = layer.forward(x, nullptr).tokens.data.value();

  const auto qkv = layer.pooled_qkv(x);
  const auto plain = linear(attend<double>(qkv.q, qkv.k, qkv.v, c.heads), param(layer, ".w_o")->tensor,
                            param(layer, ".b_o")->tensor)
                         .value();
  CHECK(bit_identical(out, plain));
  CHECK(bit_identical(out, flagged.forward(x, nullptr).tokens.data.value()));
}

TEST_CASE("memory layer key counts and bank lifecycle") {
  AttentionLayerConfig c = layer_config(2);
  Initializer init(4);
  MemoryAttention<double> layer(c, 3, "l", init);
  MemoryBank<double> bank(3, 2);
  const Index current = c.kv_extents().volume();  // 4*2*2 = 16
  const Index compressed = compressed_extents(c.kv_extents(), c.compression_factor).volume();
  REQUIRE(current == 16);
  REQUIRE(compressed == 2);
  const std::vector<Index> expected_keys{current, current + compressed, current + 2 * compressed,
                                         current + 2 * compressed};
  for (Index t = 0; t < 4; ++t) {
    const auto out = layer.forward(random_tokens(c.input_extents, 8, 50 + t, t), &bank);
    CHECK(out.attended_keys == expected_keys[static_cast<std::size_t>(t)]);
    CHECK(out.compressions == (t == 0 ? 0 : 1));
    bank.validate();
    CHECK(bank.size() == std::min<Index>(t + 1, 2));
    CHECK_FALSE(bank.slots().back().compressed);
    CHECK(bank.slots().back().clip_index == t);
    CHECK(bank.slots().back().key.extents == c.kv_extents());
    if (bank.size() == 2) {
      CHECK(bank.slots().front().compressed);
      CHECK(bank.slots().front().key.extents == compressed_extents(c.kv_extents(), c.compression_factor));
    }
  }
}

TEST_CASE("memory layer contract errors") {
  AttentionLayerConfig c = layer_config(2);
  Initializer init(5);
  MemoryAttention<double> layer(c, 1, "l", init);
  const Tokens x = random_tokens(c.input_extents, 8, 60);
  MemoryBank<double> wrong_layer(2, 2);
  MemoryBank<double> wrong_len(1, 3);
  CHECK_THROWS_AS(layer.forward(x, &wrong_layer), ContractError);
  CHECK_THROWS_AS(layer.forward(x, &wrong_len), ContractError);
  CHECK_THROWS_AS(layer.forward(x, nullptr), ContractError);
  MemoryBank<double> bank(1, 2);
  CHECK_THROWS_AS(layer.forward(random_tokens(c.input_extents, 6, 61), &bank), DimensionError);
  CHECK(bank.empty());
  AttentionLayerConfig odd = c;
  odd.heads = 3;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("rel-pos table covers the memory span") {
  const AttentionLayerConfig c = layer_config(2);
  CHECK(c.rel_pos_max() == Triple{12, 4, 4});
  Initializer init(6);
  MemoryAttention<double> layer(c, 0, "l", init);
  CHECK(param(layer, ".rel_pos_t")->tensor.rows() == 23);
}

TEST_CASE("memory layer gradients over two clips match central differences") {
  AttentionLayerConfig c = layer_config(1, {2, 4, 4}, 4, 2);
  c.compression_factor = {2, 2, 2};
  Initializer init(7);
  MemoryAttention<double> layer(c, 0, "l", init);
  std::vector<Parameter<double>*> params;
  layer.collect_parameters(params);
  for (auto* p : params) {
    // Move off the symmetric init so every path carries signal.
    p->tensor.mutable_value() += random_matrix(p->tensor.rows(), p->tensor.cols(), 70 + p->name.size(), -0.3, 0.3);
  }
  const Tokens x0 = random_tokens(c.input_extents, 4, 71, 0);
  const Tokens x1 = random_tokens(c.input_extents, 4, 72, 1);
  const Matrix<double> proj = random_matrix(32, 4, 73);
  MemoryBank<double> warm(0, 1);
  layer.forward(x0, &warm);
  // The second clip reads the bank written at the current parameters; the
  // cached slot is a constant, so this is the function being differentiated.
  auto f = [&] {
    MemoryBank<double> b0(0, 1);
    MemoryBank<double> b1 = warm;
    const auto y0 = layer.forward(x0, &b0).tokens.data;
    const auto y1 = layer.forward(x1, &b1).tokens.data;
    return add(sum(mul(y0, T(proj))), sum(mul(y1, T(proj))));
  };
  const auto r = grad_check<double>(f, params, 1e-5);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.checked > 100);
  bool f_k_checked = false;
  for (auto* p : layer.compression_parameters()) f_k_checked = f_k_checked || p->tensor.grad().cwiseAbs().maxCoeff() > 0;
  CHECK(f_k_checked);
}
