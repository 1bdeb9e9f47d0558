#include "a3net/text.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace a3net {

namespace {
const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

TokenSequence tokenize(std::string_view text) {
  TokenSequence out;
  std::string current;
  for (char raw : text) {
    char c = raw;
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-';
    if (keep) {
      current.push_back(c);
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_(kReserved) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

Vocabulary Vocabulary::build(std::span<const TokenSequence> corpus, std::size_t min_freq,
                             std::span<const std::string> forced) {
  std::map<std::string, std::size_t> counts;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  for (const auto& f : forced) {
    if (counts.contains(f) && counts[f] >= min_freq) continue;
    if (std::none_of(kept.begin(), kept.end(), [&](const auto& p) { return p.first == f; })) {
      kept.emplace_back(f, counts.contains(f) ? counts[f] : 0);
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = kReserved;
  for (auto& [tok, _] : kept) {
    if (std::find(kReserved.begin(), kReserved.end(), tok) == kReserved.end()) tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kReservedTokens || !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary must start with <pad> <bos> <eos> <unk>");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], i).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

std::optional<std::size_t> Vocabulary::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::id(const std::string& token) const { return find(token).value_or(kUnkId); }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) return tokens_[kUnkId];
  return tokens_[id];
}

TokenIds Vocabulary::encode(std::span<const std::string> tokens) const {
  TokenIds ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

TokenSequence Vocabulary::decode(std::span<const std::size_t> ids) const {
  TokenSequence out;
  for (auto id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    out.push_back(token(id));
  }
  return out;
}

}  // namespace a3net
