#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "a3net/alignment.hpp"
#include "a3net/text.hpp"
#include "a3net/vision.hpp"

namespace a3net {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split parse_split(std::string_view s);

struct Sample {
  std::string id;
  ImageSet images;
  std::string report;
  Split split = Split::Train;

  bool operator==(const Sample&) const = default;
};

struct Corpus {
  std::vector<Sample> samples;

  std::vector<const Sample*> split(Split s) const;
  bool operator==(const Corpus&) const = default;
};

struct SplitStats {
  std::size_t images = 0;
  std::size_t reports = 0;
  std::size_t patients = 0;
  std::optional<double> avg_len;  // mean report length in tokens; empty for an empty split
};

struct CorpusStats {
  SplitStats train, val, test;
};

/// Counts per split; every sample is its own patient.
CorpusStats compute_stats(const Corpus& corpus);
/// Aligned table with rows Image / Report / Patient / Avg. Len. and columns Train / Val / Test.
std::string format_stats_table(const CorpusStats& stats);
std::string stats_json(const CorpusStats& stats);

/// Raw image container: "A3IM", then H, W, F as uint32 LE, then H*W*F float32 LE.
void write_image(const std::filesystem::path& path, const ImageView& image);
ImageView read_image(const std::filesystem::path& path);

/// Writes `dir/manifest.jsonl` ({id, split, report, image_files}) plus `dir/images/*.img`.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Accepts the corpus directory or the manifest path itself.
Corpus load_corpus(const std::filesystem::path& path);

/// Encodes a report into ids (UNK for unknown tokens; never fails).
TokenIds encode_report(const Vocabulary& vocab, std::string_view report);

struct SyntheticConfig {
  /// Entity names in report order; each gets a fixed canvas region.
  std::vector<std::string> entities{"pneumothorax", "pleural", "spine", "heart", "hernia"};
  double p_present = 0.5;
  double p_abnormal = 0.4;
  std::size_t image_size = 32;
  std::size_t views = 1;
  double noise = 0.05;
};

struct SyntheticFinding {
  std::size_t entity = 0;
  bool abnormal = false;
};

struct SyntheticCorpus {
  Corpus corpus;
  /// Ground-truth findings per sample, in entity order.
  std::vector<std::vector<SyntheticFinding>> findings;
};

/// Deterministic corpus whose reports are a function of the rendered glyphs.
/// Each entity is present with p_present and, if present, abnormal with
/// p_abnormal; presence draws a glyph in the entity's region (shape set by
/// state) and adds the entity's sentence to the report.
SyntheticCorpus generate_synthetic(std::uint64_t seed, std::size_t n_samples, const SyntheticConfig& config = {});

/// Sentence the generator writes for an entity in a given state.
std::string finding_sentence(const std::string& entity, bool abnormal);

}  // namespace a3net
