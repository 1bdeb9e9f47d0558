#pragma once

#include <memory>
#include <span>
#include <vector>

#include "a3net/alignment.hpp"
#include "a3net/config.hpp"
#include "a3net/generator.hpp"
#include "a3net/parameters.hpp"
#include "a3net/text.hpp"
#include "a3net/vision.hpp"

namespace a3net {

/// Decoder inputs [BOS, y...] and targets [y..., EOS], right-padded with PAD.
struct TeacherForcing {
  TokenBatch inputs;
  std::vector<std::size_t> targets;  // same layout as inputs.ids
};

TeacherForcing teacher_forcing(std::span<const TokenIds> reports);

/// Visual extractor, anatomical alignment and caption generator wired together:
/// reports are generated from encode(fuse(patches, align(patches, dictionary))).
class A3NetModel {
 public:
  A3NetModel(const ModelConfig& config, Vocabulary vocab, AnatomicalDictionary dictionary);

  A3NetModel(const A3NetModel&) = delete;
  A3NetModel& operator=(const A3NetModel&) = delete;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const AnatomicalDictionary& dictionary() const { return dictionary_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const VisualExtractor& visual() const { return visual_; }
  const CaptionGenerator& generator() const { return *generator_; }
  const std::vector<AlignmentBlock>& alignment_blocks() const { return align_blocks_; }

  /// Patch features in model space, [B,S,d].
  Tensor patch_features(std::span<const ImageSet> images) const;
  /// Dictionary rows broadcast to the batch, [B,N,d].
  Tensor semantic_features(std::size_t batch) const;
  /// Output of the alignment stack for the given patch features.
  Tensor aligned(const Tensor& patches) const;
  /// Hyper-visual features, honoring the ablation mode.
  Tensor hyper_visual(std::span<const ImageSet> images) const;
  Tensor encode(std::span<const ImageSet> images) const;

  /// Teacher-forced logits [B,T,V].
  Tensor logits(std::span<const ImageSet> images, const TeacherForcing& tf) const;
  /// Mean token NLL of the reports given the images.
  Tensor loss(std::span<const ImageSet> images, std::span<const TokenIds> reports, double label_smoothing = 0.0) const;

  /// Next-token log-probabilities conditioned on one encoded sample ([1,S,d]).
  NextTokenScorer scorer(const Tensor& memory) const;

  DecodeState greedy(const ImageSet& image, std::size_t max_len) const;
  /// Greedy decode of a whole batch in lockstep; equal to per-sample greedy.
  std::vector<DecodeState> greedy_batch(std::span<const ImageSet> images, std::size_t max_len) const;
  std::vector<Hypothesis> beam(const ImageSet& image, BeamOptions options) const;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  AnatomicalDictionary dictionary_;
  TokenIds dictionary_ids_;
  BranchSelection branches_;
  ParameterSet params_;
  Rng rng_;
  VisualExtractor visual_;
  Tensor token_embedding_;
  Tensor dictionary_embedding_;
  Tensor semantic_projection_;
  std::vector<AlignmentBlock> align_blocks_;
  Tensor fusion_projection_;
  std::unique_ptr<CaptionGenerator> generator_;
};

}  // namespace a3net
