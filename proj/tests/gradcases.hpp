#pragma once

// Finite-difference cases shared by the unit tests and the acceptance runner.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffuse/gradcheck.hpp"
#include "diffuse/model.hpp"
#include "diffuse/tensor.hpp"

namespace gradcases {

using diffuse::GradFn;
using diffuse::Shape;
using diffuse::Tensor;

struct Case {
  std::string op;
  std::string label;
  GradFn fn;
  std::vector<Tensor> inputs;
};

inline Tensor rnd(Shape s, std::uint64_t seed) { return diffuse::random_tensor(std::move(s), seed); }

// Entries pushed away from zero so kinks stay outside the difference stencil.
inline Tensor away_from_zero(Shape s, std::uint64_t seed) {
  Tensor t = diffuse::random_tensor(std::move(s), seed, 0.1, 1.0);
  Tensor signs = diffuse::random_tensor(t.shape(), seed + 1000);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (signs.data()[i] < 0) d[i] = -d[i];
  return t;
}

inline diffuse::BlockParams random_block(std::size_t D, std::size_t hidden, std::uint64_t seed) {
  diffuse::BlockParams b;
  b.wq = rnd({D, D}, seed + 1);
  b.wk = rnd({D, D}, seed + 2);
  b.wv = rnd({D, D}, seed + 3);
  b.wo = rnd({D, D}, seed + 4);
  b.norm1_gamma = diffuse::random_tensor({D}, seed + 5, 0.5, 1.5);
  b.norm1_beta = rnd({D}, seed + 6);
  b.ffn1_weight = rnd({hidden, D}, seed + 7);
  b.ffn1_bias = rnd({hidden}, seed + 8);
  b.ffn2_weight = rnd({D, hidden}, seed + 9);
  b.ffn2_bias = rnd({D}, seed + 10);
  b.norm2_gamma = diffuse::random_tensor({D}, seed + 11, 0.5, 1.5);
  b.norm2_beta = rnd({D}, seed + 12);
  return b;
}

inline std::vector<Tensor> block_tensors(const diffuse::BlockParams& b) {
  return {b.wq,          b.wk,        b.wv,          b.wo,        b.norm1_gamma, b.norm1_beta,
          b.ffn1_weight, b.ffn1_bias, b.ffn2_weight, b.ffn2_bias, b.norm2_gamma, b.norm2_beta};
}

inline diffuse::BlockParams unpack_block(const std::vector<Tensor>& v, std::size_t at) {
  diffuse::BlockParams b;
  Tensor* slots[] = {&b.wq,          &b.wk,        &b.wv,          &b.wo,        &b.norm1_gamma, &b.norm1_beta,
                     &b.ffn1_weight, &b.ffn1_bias, &b.ffn2_weight, &b.ffn2_bias, &b.norm2_gamma, &b.norm2_beta};
  for (Tensor* s : slots) *s = v[at++];
  return b;
}

inline std::string dims(const Shape& s) { return diffuse::to_string(s); }

// Every differentiable operation on five shapes, plus a full encoder block.
inline std::vector<Case> all_cases() {
  using namespace diffuse;
  std::vector<Case> out;
  std::uint64_t seed = 100;
  auto next = [&] { return seed += 37; };

  const std::vector<Shape> flat = {{1}, {7}, {3, 4}, {2, 3, 5}, {2, 1, 6}};
  for (const Shape& s : flat) {
    out.push_back({"add", dims(s), [](const std::vector<Tensor>& v) { return add(v[0], v[1]); },
                   {rnd(s, next()), rnd(s, next())}});
    out.push_back({"mul", dims(s), [](const std::vector<Tensor>& v) { return mul(v[0], v[1]); },
                   {rnd(s, next()), rnd(s, next())}});
    out.push_back({"sum", dims(s), [](const std::vector<Tensor>& v) { return sum(v[0]); }, {rnd(s, next())}});
    out.push_back({"relu", dims(s), [](const std::vector<Tensor>& v) { return relu(v[0]); },
                   {away_from_zero(s, next())}});
    const std::uint64_t mask = next();
    out.push_back({"dropout", dims(s),
                   [mask](const std::vector<Tensor>& v) { return dropout(v[0], 0.3, true, mask); },
                   {rnd(s, next())}});
    out.push_back({"l1_loss", dims(s), [](const std::vector<Tensor>& v) { return l1_loss(v[0], v[1]); },
                   {away_from_zero(s, next()), Tensor::zeros(s)}});
  }

  // B, Cin, L, Cout
  const std::vector<std::array<std::size_t, 4>> convs = {
      {2, 3, 11, 4}, {1, 1, 5, 1}, {1, 1, 10, 20}, {3, 2, 4, 3}, {2, 20, 6, 5}};
  for (auto [B, Cin, L, Cout] : convs) {
    out.push_back({"conv1d", dims({B, Cin, L}) + "->" + std::to_string(Cout),
                   [](const std::vector<Tensor>& v) { return conv1d(v[0], v[1], v[2], 1); },
                   {rnd({B, Cin, L}, next()), rnd({Cout, Cin, 3}, next()), rnd({Cout}, next())}});
  }

  const std::vector<std::pair<Shape, std::size_t>> lins = {
      {{2}, 1}, {{3, 4}, 5}, {{2, 3, 4}, 2}, {{1, 5, 8}, 8}, {{4, 6}, 1}};
  for (const auto& [s, dout] : lins) {
    const std::size_t din = s.back();
    out.push_back({"linear", dims(s) + "->" + std::to_string(dout),
                   [](const std::vector<Tensor>& v) { return linear(v[0], v[1], v[2]); },
                   {rnd(s, next()), rnd({dout, din}, next()), rnd({dout}, next())}});
  }

  const std::vector<Shape> pools = {{1, 1, 2}, {1, 1, 5}, {2, 3, 8}, {2, 4, 11}, {1, 20, 10}};
  for (const Shape& s : pools)
    out.push_back({"maxpool1d", dims(s), [](const std::vector<Tensor>& v) { return maxpool1d(v[0], 2, 2); },
                   {rnd(s, next())}});

  const std::vector<Shape> cubes = {{1, 1, 1}, {1, 2, 3}, {2, 3, 4}, {3, 5, 2}, {2, 7, 6}};
  for (const Shape& s : cubes) {
    out.push_back({"swap_last_axes", dims(s), [](const std::vector<Tensor>& v) { return swap_last_axes(v[0]); },
                   {rnd(s, next())}});
    out.push_back({"max_over_axis", dims(s), [](const std::vector<Tensor>& v) { return max_over_axis(v[0], 1); },
                   {rnd(s, next())}});
    for (std::size_t axis : {std::size_t{1}, std::size_t{2}})
      out.push_back({"softmax", dims(s) + " axis " + std::to_string(axis),
                     [axis](const std::vector<Tensor>& v) { return softmax(v[0], axis); }, {rnd(s, next())}});
  }

  const std::vector<Shape> norms = {{2}, {3, 4}, {2, 3, 5}, {1, 2, 8}, {4, 16}};
  for (const Shape& s : norms) {
    const std::size_t D = s.back();
    out.push_back({"layer_norm", dims(s),
                   [](const std::vector<Tensor>& v) { return layer_norm(v[0], v[1], v[2]); },
                   {rnd(s, next()), random_tensor({D}, next(), 0.5, 1.5), rnd({D}, next())}});
  }

  // B, S, D, heads
  const std::vector<std::array<std::size_t, 4>> attn = {
      {2, 5, 8, 2}, {1, 1, 4, 1}, {1, 4, 8, 4}, {3, 3, 6, 3}, {1, 6, 16, 16}};
  for (auto [B, S, D, H] : attn)
    out.push_back({"multi_head_attention", dims({B, S, D}) + " heads " + std::to_string(H),
                   [H](const std::vector<Tensor>& v) { return multi_head_attention(v[0], v[1], v[2], v[3], v[4], H); },
                   {rnd({B, S, D}, next()), rnd({D, D}, next()), rnd({D, D}, next()), rnd({D, D}, next()),
                    rnd({D, D}, next())}});

  const std::vector<std::pair<std::size_t, std::size_t>> logits = {{1, 5}, {4, 5}, {3, 2}, {8, 5}, {2, 7}};
  for (auto [B, C] : logits) {
    std::vector<int> labels;
    for (std::size_t b = 0; b < B; ++b) labels.push_back(static_cast<int>((b * 3 + 1) % C));
    out.push_back({"cross_entropy", dims({B, C}),
                   [labels](const std::vector<Tensor>& v) { return cross_entropy(v[0], labels); },
                   {rnd({B, C}, next())}});
  }

  // B, S, D, heads, hidden, dropout
  struct BlockShape {
    std::size_t B, S, D, H, hidden;
    double drop;
  };
  const std::vector<BlockShape> blocks = {
      {1, 3, 4, 2, 8, 0.0}, {2, 5, 8, 2, 16, 0.0}, {1, 4, 8, 4, 8, 0.2}, {2, 2, 6, 3, 12, 0.0}, {1, 5, 16, 16, 32, 0.1}};
  for (const auto& bs : blocks) {
    ModelConfig cfg;
    cfg.conv2_out = bs.D;
    cfg.heads = bs.H;
    cfg.ffn_hidden = bs.hidden;
    cfg.trans_dropout = bs.drop;
    std::vector<Tensor> inputs{rnd({bs.B, bs.S, bs.D}, next())};
    for (const Tensor& t : block_tensors(random_block(bs.D, bs.hidden, next()))) inputs.push_back(t);
    const std::uint64_t drop_seed = next();
    out.push_back({"encoder_block",
                   dims({bs.B, bs.S, bs.D}) + " heads " + std::to_string(bs.H) + (bs.drop > 0 ? " dropout" : ""),
                   [cfg, drop_seed](const std::vector<Tensor>& v) {
                     return encoder_block(v[0], unpack_block(v, 1), cfg, cfg.trans_dropout > 0, drop_seed);
                   },
                   inputs});
  }
  return out;
}

}  // namespace gradcases
