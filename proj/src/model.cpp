#include "a3net/model.hpp"

#include <algorithm>
#include <cmath>

#include "a3net/ops.hpp"
#include "a3net/training.hpp"

namespace a3net {

TeacherForcing teacher_forcing(std::span<const TokenIds> reports) {
  TeacherForcing tf;
  std::size_t longest = 0;
  for (const auto& r : reports) longest = std::max(longest, r.size());
  tf.inputs.batch = reports.size();
  tf.inputs.length = longest + 1;
  tf.inputs.ids.assign(tf.inputs.batch * tf.inputs.length, kPadId);
  tf.targets.assign(tf.inputs.ids.size(), kPadId);
  for (std::size_t b = 0; b < reports.size(); ++b) {
    const auto& r = reports[b];
    std::size_t* in = tf.inputs.ids.data() + b * tf.inputs.length;
    std::size_t* out = tf.targets.data() + b * tf.inputs.length;
    in[0] = kBosId;
    for (std::size_t t = 0; t < r.size(); ++t) {
      in[t + 1] = r[t];
      out[t] = r[t];
    }
    out[r.size()] = kEosId;
  }
  return tf;
}

A3NetModel::A3NetModel(const ModelConfig& config, Vocabulary vocab, AnatomicalDictionary dictionary)
    : config_(config),
      vocab_(std::move(vocab)),
      dictionary_(std::move(dictionary)),
      dictionary_ids_(dictionary_token_ids(dictionary_, vocab_)),
      branches_(ablate(config.ablation)),
      rng_(config.init_seed),
      visual_(config, params_, rng_) {
  const std::size_t d = config.d_model;
  const std::size_t v = vocab_.size();
  token_embedding_ = params_.normal("embedding.tokens", {v, d}, ParamGroup::Rest, rng_, config.init_std);
  if (branches_.use_alignment) {
    dictionary_embedding_ = config.separate_dict_embedding
                                ? params_.normal("embedding.dictionary", {v, d}, ParamGroup::Rest, rng_, config.init_std)
                                : token_embedding_;
    semantic_projection_ = params_.normal("alignment.semantic_projection", {d, d}, ParamGroup::Rest, rng_,
                                          1.0 / std::sqrt(static_cast<double>(d)));
    for (std::size_t b = 0; b < std::max<std::size_t>(config.align_blocks, 1); ++b) {
      align_blocks_.push_back(AlignmentBlock::create(params_, "alignment.block" + std::to_string(b), d, config.heads,
                                                     config.ffn_mult * d, rng_, config.init_std));
    }
    if (branches_.keep_visual && config.fusion == FusionMode::ConcatProject) {
      fusion_projection_ = params_.normal("alignment.fusion_projection", {2 * d, d}, ParamGroup::Rest, rng_,
                                          1.0 / std::sqrt(static_cast<double>(2 * d)));
    }
  }
  generator_ = std::make_unique<CaptionGenerator>(config, token_embedding_, params_, rng_);
}

Tensor A3NetModel::patch_features(std::span<const ImageSet> images) const { return visual_.forward(images); }

Tensor A3NetModel::semantic_features(std::size_t batch) const {
  if (!branches_.use_alignment) throw ContractError("semantic_features: the semantic branch is ablated");
  return scale(embed_dictionary(dictionary_ids_, dictionary_embedding_, semantic_projection_, batch),
               std::sqrt(static_cast<double>(config_.d_model)));
}

Tensor A3NetModel::aligned(const Tensor& patches) const {
  const Tensor sem = semantic_features(patches.dim(0));
  Tensor q = patches;
  for (const auto& block : align_blocks_) q = align(q, sem, block);
  return q;
}

Tensor A3NetModel::hyper_visual(std::span<const ImageSet> images) const {
  const Tensor patches = patch_features(images);
  if (!branches_.use_alignment) return patches;
  const Tensor sem_out = aligned(patches);
  if (!branches_.keep_visual) return sem_out;
  return fuse(patches, sem_out, config_.fusion, fusion_projection_);
}

Tensor A3NetModel::encode(std::span<const ImageSet> images) const { return generator_->encode(hyper_visual(images)); }

Tensor A3NetModel::logits(std::span<const ImageSet> images, const TeacherForcing& tf) const {
  if (images.size() != tf.inputs.batch) {
    throw DimensionError("logits: " + std::to_string(images.size()) + " image sets for " +
                         std::to_string(tf.inputs.batch) + " reports");
  }
  return generator_->decode(encode(images), tf.inputs);
}

Tensor A3NetModel::loss(std::span<const ImageSet> images, std::span<const TokenIds> reports,
                        double label_smoothing) const {
  const TeacherForcing tf = teacher_forcing(reports);
  return nll_loss(logits(images, tf), tf.targets, kPadId, label_smoothing);
}

NextTokenScorer A3NetModel::scorer(const Tensor& memory) const {
  return [this, memory](const std::vector<TokenIds>& prefixes) {
    NoGradGuard no_grad;
    std::vector<std::vector<double>> rows(prefixes.size());
    // Prefixes of equal length are scored together.
    std::vector<std::size_t> order(prefixes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return prefixes[a].size() < prefixes[b].size(); });
    for (std::size_t start = 0; start < order.size();) {
      std::size_t end = start;
      const std::size_t len = prefixes[order[start]].size();
      while (end < order.size() && prefixes[order[end]].size() == len) ++end;
      TokenBatch batch{end - start, len, {}};
      for (std::size_t i = start; i < end; ++i) {
        batch.ids.insert(batch.ids.end(), prefixes[order[i]].begin(), prefixes[order[i]].end());
      }
      const Tensor mem = broadcast_to(memory, {batch.batch, memory.dim(1), memory.dim(2)});
      const Tensor logp = log_softmax_rows(generator_->decode_step(mem, batch));
      const std::size_t v = logp.dim(1);
      for (std::size_t i = start; i < end; ++i) {
        const auto* row = logp.data().data() + (i - start) * v;
        rows[order[i]].assign(row, row + v);
      }
      start = end;
    }
    return rows;
  };
}

DecodeState A3NetModel::greedy(const ImageSet& image, std::size_t max_len) const {
  NoGradGuard no_grad;
  const ImageSet one[] = {image};
  const std::size_t banned[] = {kPadId, kBosId};
  return greedy_decode(scorer(encode(one)), max_len, banned);
}

std::vector<DecodeState> A3NetModel::greedy_batch(std::span<const ImageSet> images, std::size_t max_len) const {
  NoGradGuard no_grad;
  const std::size_t n = images.size();
  std::vector<DecodeState> states(n);
  if (n == 0) return states;
  const Tensor memory = encode(images);
  std::vector<TokenIds> prefixes(n, TokenIds{kBosId});
  for (std::size_t step = 0; step < max_len; ++step) {
    TokenBatch batch{n, step + 1, {}};
    for (const auto& p : prefixes) batch.ids.insert(batch.ids.end(), p.begin(), p.end());
    const Tensor logp = log_softmax_rows(generator_->decode_step(memory, batch));
    const std::size_t v = logp.dim(1);
    bool all_done = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (states[i].finished) {
        prefixes[i].push_back(kPadId);
        continue;
      }
      const double* row = logp.data().data() + i * v;
      std::size_t best = v;
      for (std::size_t t = 0; t < v; ++t) {
        if (t == kPadId || t == kBosId) continue;
        if (best == v || row[t] > row[best]) best = t;
      }
      states[i].tokens.push_back(best);
      states[i].step_log_probs.push_back(row[best]);
      prefixes[i].push_back(best);
      if (best == kEosId) {
        states[i].finished = true;
      } else {
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return states;
}

std::vector<Hypothesis> A3NetModel::beam(const ImageSet& image, BeamOptions options) const {
  NoGradGuard no_grad;
  const ImageSet one[] = {image};
  if (options.banned.empty()) options.banned = {kPadId, kBosId};
  return beam_search(scorer(encode(one)), options);
}

}  // namespace a3net
