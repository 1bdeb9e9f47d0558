#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "a3net/text.hpp"

namespace a3net {

/// Corpus BLEU-n: clipped n-gram precisions for orders 1..n combined by a
/// uniform geometric mean, times the brevity penalty exp(1 - r/c) when c < r.
/// No smoothing: a zero precision at any order yields 0.
double bleu(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references, int n);

/// Length of the longest common subsequence.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Mean over pairs of the LCS F-measure (1+b^2)PR / (R + b^2 P); beta = 1 gives F1.
double rouge_l(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references,
               double beta = 1.0);

/// Exact-match unigram alignment between candidate and reference.
struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Maximizes matches, then minimizes chunks. The chunk search is exact up to
/// `node_budget` search nodes and keeps the best alignment found beyond that.
MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_budget = 200000);

/// Sentence METEOR: Fmean = 10PR/(R+9P), penalty = 0.5 (chunks/m)^3.
double meteor_sentence(std::span<const std::string> candidate, std::span<const std::string> reference);
/// Mean sentence METEOR over the corpus.
double meteor(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references);

/// Six-metric report in the column order BL-1, BL-2, BL-3, BL-4, MTR, RG-L.
struct MetricReport {
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge_l = 0.0;

  static constexpr std::array<std::string_view, 6> kFields = {"BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L"};
  std::array<double, 6> values() const { return {bleu[0], bleu[1], bleu[2], bleu[3], meteor, rouge_l}; }
  static MetricReport from_values(const std::array<double, 6>& v);

  /// {"BL-1":..,"BL-2":..,"BL-3":..,"BL-4":..,"MTR":..,"RG-L":..} on one line.
  std::string to_json() const;
  static MetricReport from_json(std::string_view text);
  /// Header row plus one row labelled `label`, columns aligned.
  std::string to_table(std::string_view label) const;
};

MetricReport evaluate_suite(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references,
                            double rouge_beta = 1.0);

/// Aligned table of several labelled rows under the six-metric header.
std::string format_metric_table(std::span<const std::pair<std::string, MetricReport>> rows);

}  // namespace a3net
