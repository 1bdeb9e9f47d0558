#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "a3net/config.hpp"
#include "a3net/parameters.hpp"
#include "a3net/tensor.hpp"
#include "a3net/text.hpp"

namespace a3net {

/// Ordered list of anatomical entity strings (lowercased, unique, non-empty).
class AnatomicalDictionary {
 public:
  explicit AnatomicalDictionary(std::vector<std::string> entities);

  /// pneumothorax, pleural, spine, heart, hernia.
  static AnatomicalDictionary defaults();
  /// One entity per line; '#' starts a comment; blank lines are ignored.
  static AnatomicalDictionary parse(std::string_view text);
  static AnatomicalDictionary load(const std::string& path);

  const std::vector<std::string>& entities() const { return entities_; }
  std::size_t size() const { return entities_.size(); }
  /// Tokens of every entity concatenated: dictionary order, then token order.
  TokenSequence tokens() const;

 private:
  std::vector<std::string> entities_;
};

/// Token ids of the dictionary rows. Every token must be in the vocabulary.
TokenIds dictionary_token_ids(const AnatomicalDictionary& dict, const Vocabulary& vocab);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(ParameterSet& params, const std::string& prefix, std::size_t d);
  Tensor operator()(const Tensor& x) const;
};

/// Position-wise ReLU network: relu(x W1 + b1) W2 + b2.
struct FeedForward {
  Tensor w1, b1, w2, b2;

  static FeedForward create(ParameterSet& params, const std::string& prefix, std::size_t d, std::size_t hidden,
                            Rng& rng, double stddev);
  Tensor operator()(const Tensor& x) const;
};

/// Per-head projections packed column-wise: head i owns columns [i*d_k, (i+1)*d_k)
/// of wq, wk and wv. No biases.
struct MultiHeadAttention {
  std::size_t heads = 1;
  Tensor wq, wk, wv, wo;  // [d, d]

  static MultiHeadAttention create(ParameterSet& params, const std::string& prefix, std::size_t d,
                                   std::size_t heads, Rng& rng, double stddev);
};

/// Concat_i(softmax(Q Wq_i (K Wk_i)^T / sqrt(d_k)) V Wv_i) Wo for Q [B,Sq,d], K,V [B,Sk,d].
/// With `causal`, query t only sees keys <= t. `site` labels the call for AttentionRecorder.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MultiHeadAttention& block,
                            bool causal = false, const char* site = "");

/// Captures the post-softmax weights [B,h,Sq,Sk] of every attention call on this thread.
class AttentionRecorder {
 public:
  struct Entry {
    std::string site;
    Tensor weights;
  };

  AttentionRecorder();
  ~AttentionRecorder();
  AttentionRecorder(const AttentionRecorder&) = delete;
  AttentionRecorder& operator=(const AttentionRecorder&) = delete;

  const std::vector<Entry>& entries() const { return entries_; }
  static AttentionRecorder* active();
  void record(const char* site, const Tensor& weights) { entries_.push_back({site, weights}); }

 private:
  std::vector<Entry> entries_;
  AttentionRecorder* previous_;
};

/// One cross-attention update with patch queries and entity keys/values:
///   Q  <- LayerNorm(Q + MHA(Q, K, V))
///   F_sem <- LayerNorm(Q + FeedForward(Q))
struct AlignmentBlock {
  MultiHeadAttention attention;
  LayerNormParams norm_attention;
  FeedForward feed_forward;
  LayerNormParams norm_output;

  static AlignmentBlock create(ParameterSet& params, const std::string& prefix, std::size_t d, std::size_t heads,
                               std::size_t ffn_hidden, Rng& rng, double stddev);
};

/// Semantic features of the dictionary: embed each token row, project with
/// `projection` [d_embed, d], and broadcast to [batch, N, d].
Tensor embed_dictionary(std::span<const std::size_t> token_ids, const Tensor& embed_table, const Tensor& projection,
                        std::size_t batch);

/// Applies `block` to patch queries [B,S,d] against semantic rows [B,N,d]; returns [B,S,d].
Tensor align(const Tensor& patches, const Tensor& semantic, const AlignmentBlock& block);

/// add: patches + semantic. concat-project: [patches | semantic] @ projection ([2d, d]).
Tensor fuse(const Tensor& patches, const Tensor& semantic_out, FusionMode mode, const Tensor& projection = {});

struct BranchSelection {
  bool use_alignment;  // compute F_sem
  bool keep_visual;    // include raw patches in the fused output
};

BranchSelection ablate(Ablation mode);

}  // namespace a3net
