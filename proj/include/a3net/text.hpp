#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace a3net {

using TokenSequence = std::vector<std::string>;
using TokenIds = std::vector<std::size_t>;

/// Lowercase, map every character outside [a-z0-9-] to a space, split on whitespace.
TokenSequence tokenize(std::string_view text);

std::string join_tokens(std::span<const std::string> tokens);

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kReservedTokens = 4;

/// Token <-> id bijection with PAD=0, BOS=1, EOS=2, UNK=3.
class Vocabulary {
 public:
  Vocabulary();

  /// Keeps tokens seen at least `min_freq` times plus every forced token.
  /// Ids follow descending frequency, ties broken lexicographically.
  static Vocabulary build(std::span<const TokenSequence> corpus, std::size_t min_freq,
                          std::span<const std::string> forced = {});
  /// Restores a vocabulary from its id-ordered token list (reserved tokens first).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::size_t> find(const std::string& token) const;
  /// UNK for out-of-vocabulary tokens.
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenIds encode(std::span<const std::string> tokens) const;
  /// Drops PAD/BOS and stops at EOS.
  TokenSequence decode(std::span<const std::size_t> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace a3net
