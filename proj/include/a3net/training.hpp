#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "a3net/config.hpp"
#include "a3net/corpus.hpp"
#include "a3net/metrics.hpp"
#include "a3net/model.hpp"
#include "a3net/parameters.hpp"

namespace a3net {

/// Non-finite loss or gradient during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean over non-PAD positions of -log softmax(logits)[target].
/// logits is [B,T,V] (or [N,V]); targets has B*T entries.
/// With label smoothing e the per-token loss is (1-e)*nll + e*mean_v(-log p_v).
Tensor nll_loss(const Tensor& logits, std::span<const std::size_t> targets, std::size_t pad_id,
                double label_smoothing = 0.0);

/// lr0 * decay^epoch.
double decayed_lr(double lr0, double decay, std::size_t epoch);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

/// Adam with bias correction and one learning rate per parameter group.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterSet& params, const TrainConfig& config);

  /// Sets both group rates to lr0 * decay^epoch.
  void set_epoch(std::size_t epoch);
  void set_lr(ParamGroup group, double lr);
  double lr(ParamGroup group) const { return group == ParamGroup::Visual ? lr_visual_ : lr_rest_; }

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are treated as having a zero gradient. Throws TrainingError on a
  /// non-finite gradient before touching any parameter.
  void step();

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  const ParameterSet* params_;
  TrainConfig config_;
  double lr_visual_, lr_rest_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One tensor-like record of a checkpoint file.
struct CheckpointRecord {
  enum class DType : std::uint8_t { F64 = 0, U64 = 1, Utf8 = 2 };

  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<std::uint64_t> u64;
  std::string text;
};

/// File layout: "A3CK", u32 version, u64 config digest, u32 record count, then per
/// record u32 name length, name bytes, u8 dtype, u32 rank, u64 dims, raw LE values.
struct CheckpointFile {
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t digest = 0;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
  const CheckpointRecord& at(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

/// Model plus everything needed to continue training from where it stopped.
struct TrainingSnapshot {
  Config config;
  std::unique_ptr<A3NetModel> model;
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t rng_state = 0;
  std::uint64_t adam_steps = 0;
  std::vector<std::vector<double>> adam_m, adam_v;
  double best_val_loss = 0.0;
  bool has_best = false;
};

void save_snapshot(const std::filesystem::path& path, const Config& config, const A3NetModel& model,
                   const AdamOptimizer* optimizer, std::size_t epoch, std::uint64_t rng_state,
                   std::optional<double> best_val_loss = std::nullopt);
/// Restores a checkpoint. When `expected` is given, its model digest must match
/// the checkpoint's or a CheckpointError explains the mismatch.
TrainingSnapshot load_snapshot(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<MetricReport> val_metrics;
  double lr_visual = 0.0;
  double lr_rest = 0.0;
  std::size_t steps = 0;
  bool best = false;

  /// One JSON object, no newline.
  std::string to_json(std::uint64_t config_digest) const;
};

struct TrainerOptions {
  /// When set, receives last.ckpt, best.ckpt and history.jsonl.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Teacher-forced maximum-likelihood training over a corpus's train split.
class Trainer {
 public:
  /// Fresh run: vocabulary from the train split, parameters from init_seed.
  Trainer(const Config& config, const Corpus& corpus, TrainerOptions options = {});
  /// Resumes from a snapshot; the corpus must be the one the snapshot was trained on.
  Trainer(TrainingSnapshot snapshot, const Corpus& corpus, TrainerOptions options = {});

  /// Runs epochs until `config.train.epochs` have completed.
  std::vector<EpochRecord> run();
  EpochRecord run_epoch();

  std::size_t epoch() const { return epoch_; }
  /// Changes the total epoch budget, e.g. to extend a resumed run.
  void set_epochs(std::size_t total) { config_.train.epochs = total; }
  const Config& config() const { return config_; }
  A3NetModel& model() { return *model_; }
  const A3NetModel& model() const { return *model_; }
  AdamOptimizer& optimizer() { return *optimizer_; }
  std::uint64_t rng_state() const { return rng_.state(); }

  void save(const std::filesystem::path& path) const;

  /// Token-weighted mean NLL over samples, evaluated without gradients.
  double evaluate_loss(std::span<const Sample* const> samples) const;

 private:
  void prepare(const Corpus& corpus);
  TokenIds target_ids(const std::string& report) const;

  Config config_;
  TrainerOptions options_;
  std::unique_ptr<A3NetModel> model_;
  std::unique_ptr<AdamOptimizer> optimizer_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::optional<double> best_val_;
  std::vector<const Sample*> train_, val_;
  std::vector<TokenIds> train_ids_, val_ids_;
};

/// Vocabulary from the train split at min_freq, always including dictionary tokens.
Vocabulary build_vocabulary(const Corpus& corpus, std::size_t min_freq, const AnatomicalDictionary& dictionary);
AnatomicalDictionary resolve_dictionary(const ModelConfig& config);

}  // namespace a3net
