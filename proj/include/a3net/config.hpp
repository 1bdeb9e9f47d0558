#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace a3net {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FusionMode { Add, ConcatProject };
enum class Ablation { Full, NoVisual, NoSem };

std::string to_string(FusionMode m);
std::string to_string(Ablation a);
FusionMode parse_fusion(std::string_view s);
Ablation parse_ablation(std::string_view s);
/// Row label used in ablation tables: "Ours", "w/o Φ_visual", "w/o Φ_sem".
std::string ablation_label(Ablation a);

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t image_channels = 1;
  std::size_t views = 1;
  std::vector<std::size_t> conv_channels{8, 16, 32};
  std::size_t d_vis = 64;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t align_blocks = 1;
  FusionMode fusion = FusionMode::Add;
  Ablation ablation = Ablation::Full;
  bool patch_positions = true;
  bool tie_embeddings = false;
  bool separate_dict_embedding = false;
  std::size_t max_len = 60;
  double init_std = 0.02;
  std::uint64_t init_seed = 1;
  /// Anatomical dictionary file; empty selects the built-in entity list.
  std::string dictionary_file;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double lr_visual = 1e-4;
  double lr_rest = 5e-4;
  double lr_decay = 0.8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;
  std::size_t warmup_steps = 0;
  double weight_decay = 0.0;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  std::size_t min_freq = 3;
  /// Greedy-decode the validation split each epoch and record NLG metrics.
  bool val_metrics = true;
};

struct DecodeConfig {
  std::size_t beam_size = 3;
  double length_alpha = 0.0;
  std::size_t max_len = 60;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;

  /// Desk-scale defaults.
  static Config desk() { return {}; }
  /// Full-size dimensions and optimizer settings.
  static Config full_scale();
};

/// Parses "key = value" lines grouped under [model], [train] and [decode].
/// '#' starts a comment. Unknown sections or keys are errors that carry the line number.
/// Keys absent from the text keep the values of `base`.
Config parse_config(std::string_view text, const Config& base = Config::desk());
Config load_config(const std::string& path, const Config& base = Config::desk());

/// Every key with its resolved value, in the same format parse_config reads.
std::string to_text(const Config& config);

/// Digest over the keys that determine parameter shapes and forward semantics.
std::uint64_t model_digest(const ModelConfig& model);
std::string digest_hex(std::uint64_t digest);

}  // namespace a3net
