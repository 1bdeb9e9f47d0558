#include "a3net/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include "a3net/tensor.hpp"

namespace a3net {

namespace {

void check_corpus(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references) {
  if (candidates.empty()) throw ContractError("metric over an empty corpus");
  if (candidates.size() != references.size()) {
    throw ContractError("metric needs one reference per candidate (" + std::to_string(candidates.size()) + " vs " +
                        std::to_string(references.size()) + ")");
  }
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const TokenSequence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<std::string>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

double bleu(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references, int n) {
  check_corpus(candidates, references);
  if (n < 1 || n > 4) throw ContractError("bleu: order must be in 1..4");
  std::size_t cand_len = 0, ref_len = 0;
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    std::size_t clipped = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto c = ngram_counts(candidates[i], static_cast<std::size_t>(order));
      const auto r = ngram_counts(references[i], static_cast<std::size_t>(order));
      for (const auto& [gram, count] : c) {
        total += count;
        if (auto it = r.find(gram); it != r.end()) clipped += std::min(count, it->second);
      }
    }
    if (clipped == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += candidates[i].size();
    ref_len += references[i].size();
  }
  const double bp =
      cand_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_sum / n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references, double beta) {
  check_corpus(candidates, references);
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto lcs = static_cast<double>(lcs_length(candidates[i], references[i]));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidates[i].size());
    const double r = lcs / static_cast<double>(references[i].size());
    const double b2 = beta * beta;
    total += (1.0 + b2) * p * r / (r + b2 * p);
  }
  return total / static_cast<double>(candidates.size());
}

namespace {

class ChunkSearch {
 public:
  ChunkSearch(std::span<const std::string> cand, std::span<const std::string> ref, std::size_t budget)
      : cand_(cand), ref_(ref), budget_(budget), used_(ref.size(), false), map_(cand.size(), kNone) {
    std::unordered_map<std::string, std::size_t> cc, rc;
    for (const auto& w : cand) ++cc[w];
    for (const auto& w : ref) ++rc[w];
    for (const auto& [w, n] : cc) {
      const std::size_t need = std::min(n, rc[w]);
      need_[w] = need;
      matches_ += need;
    }
    // Occurrences of each word in cand at positions >= i.
    remaining_.resize(cand.size() + 1);
    std::unordered_map<std::string, std::size_t> tail;
    for (std::size_t i = cand.size(); i-- > 0;) {
      remaining_[i] = ++tail[cand[i]];
    }
  }

  MeteorAlignment run() {
    if (matches_ == 0) return {0, 0};
    search(0, 0);
    return {matches_, best_};
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  void search(std::size_t i, std::size_t chunks) {
    if (chunks >= best_) return;
    if (nodes_ >= budget_ && best_ != kNone) return;
    ++nodes_;
    if (i == cand_.size()) {
      best_ = chunks;
      return;
    }
    const std::string& w = cand_[i];
    auto need_it = need_.find(w);
    const std::size_t need = need_it->second;
    std::size_t& got = got_[w];
    const std::size_t prev = i > 0 ? map_[i - 1] : kNone;

    auto try_match = [&](std::size_t j) {
      used_[j] = true;
      map_[i] = j;
      ++got;
      const bool continues = prev != kNone && j == prev + 1;
      search(i + 1, chunks + (continues ? 0 : 1));
      --got;
      map_[i] = kNone;
      used_[j] = false;
    };

    if (got < need) {
      if (prev != kNone && prev + 1 < ref_.size() && !used_[prev + 1] && ref_[prev + 1] == w) try_match(prev + 1);
      for (std::size_t j = 0; j < ref_.size(); ++j) {
        if (used_[j] || ref_[j] != w || (prev != kNone && j == prev + 1)) continue;
        try_match(j);
      }
    }
    // Skipping is allowed while later occurrences can still meet the quota.
    if (need - got <= remaining_[i] - 1) search(i + 1, chunks);
  }

  std::span<const std::string> cand_, ref_;
  std::size_t budget_;
  std::size_t nodes_ = 0;
  std::size_t matches_ = 0;
  std::size_t best_ = kNone;
  std::vector<bool> used_;
  std::vector<std::size_t> map_;
  std::vector<std::size_t> remaining_;
  std::unordered_map<std::string, std::size_t> need_, got_;
};

}  // namespace

MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_budget) {
  return ChunkSearch(candidate, reference, node_budget).run();
}

double meteor_sentence(std::span<const std::string> candidate, std::span<const std::string> reference) {
  const auto a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const auto m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(a.chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

double meteor(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references) {
  check_corpus(candidates, references);
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += meteor_sentence(candidates[i], references[i]);
  return total / static_cast<double>(candidates.size());
}

MetricReport MetricReport::from_values(const std::array<double, 6>& v) {
  MetricReport r;
  r.bleu = {v[0], v[1], v[2], v[3]};
  r.meteor = v[4];
  r.rouge_l = v[5];
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  const auto v = values();
  for (std::size_t i = 0; i < kFields.size(); ++i) j[std::string(kFields[i])] = v[i];
  return j.dump();
}

MetricReport MetricReport::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_object() || j.size() != kFields.size()) {
    throw std::invalid_argument("metric report must have exactly the fields BL-1..BL-4, MTR, RG-L");
  }
  std::array<double, 6> v{};
  for (std::size_t i = 0; i < kFields.size(); ++i) v[i] = j.at(std::string(kFields[i])).get<double>();
  return from_values(v);
}

std::string format_metric_table(std::span<const std::pair<std::string, MetricReport>> rows) {
  std::size_t label_w = 5;  // "Model"
  for (const auto& [label, _] : rows) {
    // Count code points so labels with Greek letters still align.
    std::size_t cps = 0;
    for (unsigned char ch : label) cps += (ch & 0xC0) != 0x80;
    label_w = std::max(label_w, cps);
  }
  auto pad = [](const std::string& s, std::size_t w) {
    std::size_t cps = 0;
    for (unsigned char ch : s) cps += (ch & 0xC0) != 0x80;
    return s + std::string(w > cps ? w - cps : 0, ' ');
  };
  std::string out = pad("Model", label_w);
  for (auto f : MetricReport::kFields) {
    std::string col(f);
    out += "  " + std::string(col.size() < 6 ? 6 - col.size() : 0, ' ') + col;
  }
  out += '\n';
  for (const auto& [label, report] : rows) {
    out += pad(label, label_w);
    for (double v : report.values()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "  %6.3f", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string MetricReport::to_table(std::string_view label) const {
  const std::pair<std::string, MetricReport> row{std::string(label), *this};
  return format_metric_table(std::span(&row, 1));
}

MetricReport evaluate_suite(std::span<const TokenSequence> candidates, std::span<const TokenSequence> references,
                            double rouge_beta) {
  MetricReport r;
  for (int n = 1; n <= 4; ++n) r.bleu[static_cast<std::size_t>(n - 1)] = bleu(candidates, references, n);
  r.meteor = meteor(candidates, references);
  r.rouge_l = rouge_l(candidates, references, rouge_beta);
  return r;
}

}  // namespace a3net
