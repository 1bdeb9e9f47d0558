#include "a3net/alignment.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "a3net/ops.hpp"

namespace a3net {

AnatomicalDictionary::AnatomicalDictionary(std::vector<std::string> entities) {
  if (entities.empty()) throw ConfigError("anatomical dictionary needs at least one entity");
  std::set<std::string> seen;
  for (const auto& e : entities) {
    const auto toks = tokenize(e);
    if (toks.empty()) throw ConfigError("anatomical dictionary entry '" + e + "' has no tokens");
    const std::string normalized = join_tokens(toks);
    if (!seen.insert(normalized).second) throw ConfigError("duplicate dictionary entity '" + normalized + "'");
    entities_.push_back(normalized);
  }
}

AnatomicalDictionary AnatomicalDictionary::defaults() {
  return AnatomicalDictionary({"pneumothorax", "pleural", "spine", "heart", "hernia"});
}

AnatomicalDictionary AnatomicalDictionary::parse(std::string_view text) {
  std::vector<std::string> entities;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (tokenize(line).empty()) continue;
    entities.push_back(line);
  }
  return AnatomicalDictionary(std::move(entities));
}

AnatomicalDictionary AnatomicalDictionary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dictionary file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

TokenSequence AnatomicalDictionary::tokens() const {
  TokenSequence out;
  for (const auto& e : entities_) {
    for (auto& t : tokenize(e)) out.push_back(std::move(t));
  }
  return out;
}

TokenIds dictionary_token_ids(const AnatomicalDictionary& dict, const Vocabulary& vocab) {
  TokenIds ids;
  for (const auto& t : dict.tokens()) {
    auto id = vocab.find(t);
    if (!id) throw ConfigError("dictionary token '" + t + "' is missing from the vocabulary");
    ids.push_back(*id);
  }
  return ids;
}

LayerNormParams LayerNormParams::create(ParameterSet& params, const std::string& prefix, std::size_t d) {
  return {params.constant(prefix + ".gamma", {d}, ParamGroup::Rest, 1.0),
          params.constant(prefix + ".beta", {d}, ParamGroup::Rest, 0.0)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-5); }

FeedForward FeedForward::create(ParameterSet& params, const std::string& prefix, std::size_t d, std::size_t hidden,
                                Rng& rng, double stddev) {
  FeedForward f;
  f.w1 = params.normal(prefix + ".w1", {d, hidden}, ParamGroup::Rest, rng, stddev);
  f.b1 = params.constant(prefix + ".b1", {hidden}, ParamGroup::Rest, 0.0);
  f.w2 = params.normal(prefix + ".w2", {hidden, d}, ParamGroup::Rest, rng, stddev);
  f.b2 = params.constant(prefix + ".b2", {d}, ParamGroup::Rest, 0.0);
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

MultiHeadAttention MultiHeadAttention::create(ParameterSet& params, const std::string& prefix, std::size_t d,
                                              std::size_t heads, Rng& rng, double stddev) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError(prefix + ": model dim " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  MultiHeadAttention m;
  m.heads = heads;
  m.wq = params.normal(prefix + ".wq", {d, d}, ParamGroup::Rest, rng, stddev);
  m.wk = params.normal(prefix + ".wk", {d, d}, ParamGroup::Rest, rng, stddev);
  m.wv = params.normal(prefix + ".wv", {d, d}, ParamGroup::Rest, rng, stddev);
  m.wo = params.normal(prefix + ".wo", {d, d}, ParamGroup::Rest, rng, stddev);
  return m;
}

namespace {

thread_local AttentionRecorder* g_recorder = nullptr;

// [B,S,d] -> [B,h,S,d_k]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  return transpose(reshape(x, {b, s, heads, d / heads}), 1, 2);
}

}  // namespace

AttentionRecorder::AttentionRecorder() : previous_(g_recorder) { g_recorder = this; }
AttentionRecorder::~AttentionRecorder() { g_recorder = previous_; }
AttentionRecorder* AttentionRecorder::active() { return g_recorder; }

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MultiHeadAttention& block,
                            bool causal, const char* site) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("multi_head_attention: expected rank-3 Q, K, V, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t d = block.wq.dim(0);
  if (q.dim(2) != d || k.dim(2) != d || v.dim(2) != d || k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("multi_head_attention: incompatible Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()) + ", V " + shape_str(v.shape()) + " for model dim " + std::to_string(d));
  }
  if (k.dim(1) == 0) throw DimensionError("multi_head_attention: no keys");
  const std::size_t h = block.heads;
  const std::size_t dk = d / h;
  const Tensor qh = split_heads(matmul(q, block.wq), h);
  const Tensor kh = split_heads(matmul(k, block.wk), h);
  const Tensor vh = split_heads(matmul(v, block.wv), h);
  Tensor scores = scale(matmul(qh, transpose_last_two(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (causal) scores = causal_mask(scores);
  const Tensor weights = softmax_rows(scores);
  if (g_recorder) g_recorder->record(site, weights);
  const Tensor context = transpose(matmul(weights, vh), 1, 2);  // [B,Sq,h,dk]
  return matmul(reshape(context, {q.dim(0), q.dim(1), d}), block.wo);
}

AlignmentBlock AlignmentBlock::create(ParameterSet& params, const std::string& prefix, std::size_t d,
                                      std::size_t heads, std::size_t ffn_hidden, Rng& rng, double stddev) {
  AlignmentBlock b;
  b.attention = MultiHeadAttention::create(params, prefix + ".attn", d, heads, rng, stddev);
  b.norm_attention = LayerNormParams::create(params, prefix + ".norm1", d);
  b.feed_forward = FeedForward::create(params, prefix + ".ffn", d, ffn_hidden, rng, stddev);
  b.norm_output = LayerNormParams::create(params, prefix + ".norm2", d);
  return b;
}

Tensor embed_dictionary(std::span<const std::size_t> token_ids, const Tensor& embed_table, const Tensor& projection,
                        std::size_t batch) {
  if (token_ids.empty()) throw ContractError("embed_dictionary: dictionary has no tokens");
  const std::size_t n = token_ids.size();
  const Tensor rows = embedding_lookup(embed_table, token_ids, {n});
  const Tensor projected = projection.defined() ? matmul(rows, projection) : rows;
  return broadcast_to(reshape(projected, {1, n, projected.dim(1)}), {batch, n, projected.dim(1)});
}

Tensor align(const Tensor& patches, const Tensor& semantic, const AlignmentBlock& block) {
  const Tensor q = block.norm_attention(
      add(patches, multi_head_attention(patches, semantic, semantic, block.attention, false, "alignment")));
  return block.norm_output(add(q, block.feed_forward(q)));
}

Tensor fuse(const Tensor& patches, const Tensor& semantic_out, FusionMode mode, const Tensor& projection) {
  if (patches.shape() != semantic_out.shape()) {
    throw DimensionError("fuse: patch features " + shape_str(patches.shape()) + " and semantic features " +
                         shape_str(semantic_out.shape()) + " differ");
  }
  if (mode == FusionMode::Add) return add(patches, semantic_out);
  if (!projection.defined()) throw ContractError("fuse: concat-project needs a projection");
  return matmul(concat_last_axis(patches, semantic_out), projection);
}

BranchSelection ablate(Ablation mode) {
  switch (mode) {
    case Ablation::Full: return {true, true};
    case Ablation::NoVisual: return {true, false};
    case Ablation::NoSem: return {false, true};
  }
  return {true, true};
}

}  // namespace a3net
