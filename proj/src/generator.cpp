#include "a3net/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "a3net/ops.hpp"
#include "a3net/vision.hpp"

namespace a3net {

CaptionGenerator::CaptionGenerator(const ModelConfig& config, Tensor token_embedding, ParameterSet& params, Rng& rng)
    : config_(config), token_embedding_(std::move(token_embedding)) {
  const std::size_t d = config.d_model;
  const std::size_t hidden = config.ffn_mult * d;
  const double sd = config.init_std;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.self_attention = MultiHeadAttention::create(params, p + ".self", d, config.heads, rng, sd);
    layer.norm_attention = LayerNormParams::create(params, p + ".norm1", d);
    layer.feed_forward = FeedForward::create(params, p + ".ffn", d, hidden, rng, sd);
    layer.norm_output = LayerNormParams::create(params, p + ".norm2", d);
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.self_attention = MultiHeadAttention::create(params, p + ".self", d, config.heads, rng, sd);
    layer.norm_self = LayerNormParams::create(params, p + ".norm1", d);
    layer.cross_attention = MultiHeadAttention::create(params, p + ".cross", d, config.heads, rng, sd);
    layer.norm_cross = LayerNormParams::create(params, p + ".norm2", d);
    layer.feed_forward = FeedForward::create(params, p + ".ffn", d, hidden, rng, sd);
    layer.norm_output = LayerNormParams::create(params, p + ".norm3", d);
    decoder_.push_back(std::move(layer));
  }
  if (!config.tie_embeddings) {
    out_weight_ = params.normal("decoder.out.weight", {d, vocab_size()}, ParamGroup::Rest, rng, sd);
  }
  out_bias_ = params.constant("decoder.out.bias", {vocab_size()}, ParamGroup::Rest, 0.0);
}

Tensor CaptionGenerator::encode(const Tensor& hyper) const {
  Tensor x = hyper;
  for (const auto& layer : encoder_) {
    x = layer.norm_attention(add(x, multi_head_attention(x, x, x, layer.self_attention, false, "encoder")));
    x = layer.norm_output(add(x, layer.feed_forward(x)));
  }
  return x;
}

Tensor CaptionGenerator::embed_tokens(const TokenBatch& tokens) const {
  if (tokens.ids.size() != tokens.batch * tokens.length) {
    throw DimensionError("embed_tokens: " + std::to_string(tokens.ids.size()) + " ids for a " +
                         std::to_string(tokens.batch) + "x" + std::to_string(tokens.length) + " batch");
  }
  const std::size_t d = config_.d_model;
  const Tensor emb = scale(embedding_lookup(token_embedding_, tokens.ids, {tokens.batch, tokens.length}),
                           std::sqrt(static_cast<double>(d)));
  return add(emb, sinusoid_table(tokens.length, d));
}

Tensor CaptionGenerator::decode(const Tensor& memory, const TokenBatch& inputs) const {
  if (inputs.length == 0) throw ContractError("decode: empty prefix");
  if (inputs.length > max_prefix()) {
    throw ContractError("decode: prefix of " + std::to_string(inputs.length) + " tokens exceeds the maximum of " +
                        std::to_string(max_prefix()));
  }
  if (memory.rank() != 3 || memory.dim(0) != inputs.batch) {
    throw DimensionError("decode: memory " + shape_str(memory.shape()) + " does not match a batch of " +
                         std::to_string(inputs.batch));
  }
  Tensor x = embed_tokens(inputs);
  for (const auto& layer : decoder_) {
    x = layer.norm_self(add(x, multi_head_attention(x, x, x, layer.self_attention, true, "decoder_self")));
    x = layer.norm_cross(add(x, multi_head_attention(x, memory, memory, layer.cross_attention, false, "decoder_cross")));
    x = layer.norm_output(add(x, layer.feed_forward(x)));
  }
  const Tensor w = out_weight_.defined() ? out_weight_ : transpose_last_two(token_embedding_);
  return add(matmul(x, w), out_bias_);
}

Tensor CaptionGenerator::decode_step(const Tensor& memory, const TokenBatch& prefixes) const {
  const Tensor logits = decode(memory, prefixes);
  return reshape(slice(logits, 1, prefixes.length - 1, 1), {prefixes.batch, vocab_size()});
}

namespace {

bool is_banned(std::span<const std::size_t> banned, std::size_t token) {
  return std::find(banned.begin(), banned.end(), token) != banned.end();
}

TokenIds with_bos(const TokenIds& tokens) {
  TokenIds p;
  p.reserve(tokens.size() + 1);
  p.push_back(kBosId);
  p.insert(p.end(), tokens.begin(), tokens.end());
  return p;
}

}  // namespace

DecodeState greedy_decode(const NextTokenScorer& scorer, std::size_t max_len, std::span<const std::size_t> banned) {
  DecodeState state;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto rows = scorer({with_bos(state.tokens)});
    const auto& row = rows.at(0);
    std::size_t best = row.size();
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (is_banned(banned, t) || !std::isfinite(row[t])) continue;
      if (best == row.size() || row[t] > row[best]) best = t;
    }
    if (best == row.size()) break;
    state.tokens.push_back(best);
    state.step_log_probs.push_back(row[best]);
    if (best == kEosId) {
      state.finished = true;
      break;
    }
  }
  return state;
}

std::vector<Hypothesis> beam_search(const NextTokenScorer& scorer, const BeamOptions& options) {
  if (options.beam == 0) throw ContractError("beam_search: beam must be at least 1");
  struct Candidate {
    double log_prob;
    std::size_t parent;
    std::size_t token;
  };
  auto normalized = [&](const Hypothesis& h) {
    const double len = static_cast<double>(std::max<std::size_t>(h.tokens.size(), 1));
    return options.alpha == 0.0 ? h.log_prob : h.log_prob / std::pow(len, options.alpha);
  };

  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> pool;
  for (std::size_t step = 0; step < options.max_len && !live.empty(); ++step) {
    std::vector<TokenIds> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) prefixes.push_back(with_bos(h.tokens));
    const auto rows = scorer(prefixes);

    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t t = 0; t < rows[i].size(); ++t) {
        if (is_banned(options.banned, t) || !std::isfinite(rows[i][t])) continue;
        cands.push_back({live[i].log_prob + rows[i][t], i, t});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    const std::size_t keep = std::min(options.beam, cands.size());
    if (options.observer) {
      BeamStep info;
      info.step = step;
      for (std::size_t i = 0; i < cands.size(); ++i) (i < keep ? info.kept : info.pruned).push_back(cands[i].log_prob);
      options.observer(info);
    }

    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h;
      h.tokens = live[cands[i].parent].tokens;
      h.tokens.push_back(cands[i].token);
      h.log_prob = cands[i].log_prob;
      if (cands[i].token == kEosId) {
        h.finished = true;
        h.score = normalized(h);
        pool.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) {
    h.score = normalized(h);
    pool.push_back(std::move(h));
  }
  std::stable_sort(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.log_prob > b.log_prob;
  });
  return pool;
}

}  // namespace a3net
