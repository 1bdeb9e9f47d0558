#pragma once

#include <functional>
#include <span>
#include <vector>

#include "a3net/alignment.hpp"
#include "a3net/config.hpp"
#include "a3net/parameters.hpp"
#include "a3net/tensor.hpp"
#include "a3net/text.hpp"

namespace a3net {

/// Row-major [batch, length] token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> ids;
};

struct EncoderLayer {
  MultiHeadAttention self_attention;
  LayerNormParams norm_attention;
  FeedForward feed_forward;
  LayerNormParams norm_output;
};

struct DecoderLayer {
  MultiHeadAttention self_attention;
  LayerNormParams norm_self;
  MultiHeadAttention cross_attention;
  LayerNormParams norm_cross;
  FeedForward feed_forward;
  LayerNormParams norm_output;
};

/// Post-norm Transformer encoder-decoder over hyper-visual features.
class CaptionGenerator {
 public:
  /// `token_embedding` [V, d] is owned by the caller's ParameterSet (it may be
  /// shared with the dictionary branch).
  CaptionGenerator(const ModelConfig& config, Tensor token_embedding, ParameterSet& params, Rng& rng);

  /// [B,S,d] -> [B,S,d]; identity when the config has zero layers.
  Tensor encode(const Tensor& hyper) const;
  /// Teacher-forced logits [B,T,V] for input prefixes `inputs` (causal).
  Tensor decode(const Tensor& memory, const TokenBatch& inputs) const;
  /// Logits [B,V] for the token following each prefix (all prefixes share a length).
  Tensor decode_step(const Tensor& memory, const TokenBatch& prefixes) const;

  /// Scaled token embeddings plus sinusoid positions, [B,T,d].
  Tensor embed_tokens(const TokenBatch& tokens) const;

  std::size_t vocab_size() const { return token_embedding_.dim(0); }
  std::size_t max_prefix() const { return config_.max_len + 1; }

 private:
  ModelConfig config_;
  Tensor token_embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor out_weight_;  // [d, V]; undefined when tied
  Tensor out_bias_;
};

/// Log-probabilities of the next token for each prefix (each starts with BOS).
using NextTokenScorer = std::function<std::vector<std::vector<double>>(const std::vector<TokenIds>& prefixes)>;

/// Generated tokens (EOS included when emitted) and their per-step log-probabilities.
struct DecodeState {
  TokenIds tokens;
  std::vector<double> step_log_probs;
  bool finished = false;  // ended with EOS
};

struct Hypothesis {
  TokenIds tokens;  // EOS included when finished
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / length^alpha
  bool finished = false;
};

/// Per-step view of the beam for instrumentation: cumulative log-probs of the
/// candidates that were kept and of those that were pruned.
struct BeamStep {
  std::size_t step = 0;
  std::vector<double> kept;
  std::vector<double> pruned;
};

struct BeamOptions {
  std::size_t beam = 3;
  std::size_t max_len = 60;
  double alpha = 0.0;
  /// Never generated (PAD and BOS for a trained model).
  std::vector<std::size_t> banned;
  std::function<void(const BeamStep&)> observer;
};

/// Argmax decoding until EOS or `max_len` tokens; ties go to the lowest id.
DecodeState greedy_decode(const NextTokenScorer& scorer, std::size_t max_len,
                          std::span<const std::size_t> banned = {});

/// Beam search over cumulative log-probabilities. Candidates are ranked by
/// cumulative log-prob, then token id, then parent order; hypotheses ending
/// in EOS (or reaching max_len) retire to a pool ranked by normalized score.
std::vector<Hypothesis> beam_search(const NextTokenScorer& scorer, const BeamOptions& options);

}  // namespace a3net
