#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "a3net/metrics.hpp"
#include "a3net/rng.hpp"

using namespace a3net;

namespace {

std::vector<TokenSequence> one(const std::string& s) { return {tokenize(s)}; }

// Exponential-time LCS by recursion with memo keyed on (i, j), written without the DP table.
std::size_t lcs_oracle(const TokenSequence& a, const TokenSequence& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t r = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[key] = r;
    return r;
  };
  return go(0, 0);
}

// Brute force over all maximal matchings for tiny inputs: fewest chunks.
std::size_t min_chunks_oracle(const TokenSequence& c, const TokenSequence& r) {
  std::size_t best_m = 0, best_ch = 0;
  std::vector<int> map(c.size(), -1);
  std::vector<bool> used(r.size(), false);
  std::function<void(std::size_t)> go = [&](std::size_t i) {
    if (i == c.size()) {
      std::size_t m = 0, ch = 0;
      for (std::size_t k = 0; k < c.size(); ++k) {
        if (map[k] < 0) continue;
        ++m;
        if (k == 0 || map[k - 1] < 0 || map[k - 1] + 1 != map[k]) ++ch;
      }
      if (m > best_m || (m == best_m && ch < best_ch)) {
        best_m = m;
        best_ch = ch;
      }
      return;
    }
    go(i + 1);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (used[j] || r[j] != c[i]) continue;
      used[j] = true;
      map[i] = static_cast<int>(j);
      go(i + 1);
      map[i] = -1;
      used[j] = false;
    }
  };
  go(0);
  return best_ch;
}

TokenSequence random_sentence(Rng& rng, std::size_t max_len, std::size_t vocab) {
  TokenSequence s(rng.below(max_len + 1));
  for (auto& t : s) t = "w" + std::to_string(rng.below(vocab));
  return s;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("BLEU examples") {
    const auto c = one("the the the the"), r = one("the cat sat down");
    CHECK(bleu(c, r, 1) == doctest::Approx(0.25).epsilon(1e-15));
    const auto same = one("the heart is normal");
    for (int n = 1; n <= 4; ++n) CHECK(bleu(same, same, n) == 1.0);
    CHECK(bleu(one("a b c"), one("d e f"), 1) == 0.0);
  }

  TEST_CASE("BLEU brevity penalty") {
    // c=2, r=4, unigram precision 1.
    CHECK(bleu(one("the cat"), one("the cat sat down"), 1) == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-14));
  }

  TEST_CASE("BLEU aggregates counts over the corpus") {
    const std::vector<TokenSequence> c{tokenize("a b"), tokenize("c d")};
    const std::vector<TokenSequence> r{tokenize("a b"), tokenize("c x")};
    // 3 of 4 unigrams; 1 of 2 bigrams.
    CHECK(bleu(c, r, 2) == doctest::Approx(std::sqrt(0.75 * 0.5)).epsilon(1e-14));
  }

  TEST_CASE("ROUGE-L examples") {
    CHECK(rouge_l(one("a c d"), one("a b c d")) == doctest::Approx(6.0 / 7.0).epsilon(1e-15));
    CHECK(rouge_l(one("x y"), one("x y")) == 1.0);
    CHECK(rouge_l(one("x y"), one("p q")) == 0.0);
  }

  TEST_CASE("LCS matches a recursive oracle on random pairs") {
    Rng rng(2024);
    for (int i = 0; i < 200; ++i) {
      const auto a = random_sentence(rng, 30, 6), b = random_sentence(rng, 30, 6);
      CHECK(lcs_length(a, b) == lcs_oracle(a, b));
    }
  }

  TEST_CASE("METEOR examples") {
    CHECK(meteor(one("x y"), one("p q")) == 0.0);
    CHECK(meteor(one("the heart"), one("the heart")) == doctest::Approx(0.9375).epsilon(1e-15));
    for (std::size_t m = 1; m <= 12; ++m) {
      TokenSequence s;
      for (std::size_t i = 0; i < m; ++i) s.push_back("t" + std::to_string(i));
      const double expect = 1.0 - 0.5 / static_cast<double>(m * m * m);
      CHECK(std::abs(meteor_sentence(s, s) - expect) < 1e-12);
    }
  }

  TEST_CASE("METEOR alignment minimizes chunks") {
    // Greedy left-to-right matching would use 3 chunks here; the best uses 2.
    const auto c = tokenize("a b a c"), r = tokenize("a c x a b");
    CHECK(meteor_align(c, r).matches == 4);
    CHECK(meteor_align(c, r).chunks == min_chunks_oracle(c, r));
    Rng rng(7);
    for (int i = 0; i < 300; ++i) {
      const auto a = random_sentence(rng, 7, 3), b = random_sentence(rng, 7, 3);
      const auto al = meteor_align(a, b);
      CHECK(al.chunks == min_chunks_oracle(a, b));
    }
  }

  TEST_CASE("self-evaluation") {
    const std::vector<TokenSequence> refs{tokenize("the heart is normal"), tokenize("no pleural effusion")};
    const auto r = evaluate_suite(refs, refs);
    for (double b : r.bleu) CHECK(b == 1.0);
    CHECK(r.rouge_l == 1.0);
    CHECK(std::abs(r.meteor - (1.0 - 0.5 / 64.0 + 1.0 - 0.5 / 27.0) / 2.0) < 1e-12);
  }

  TEST_CASE("report schema") {
    MetricReport sample = MetricReport::from_values({0.492, 0.318, 0.230, 0.175, 0.199, 0.381});
    const auto text = sample.to_json();
    CHECK(text == R"({"BL-1":0.492,"BL-2":0.318,"BL-3":0.23,"BL-4":0.175,"MTR":0.199,"RG-L":0.381})");
    const auto back = MetricReport::from_json(text);
    CHECK(back.values() == sample.values());
    CHECK(MetricReport::kFields.size() == 6);
    CHECK_THROWS(MetricReport::from_json(R"({"BL-1":1})"));
    const auto table = sample.to_table("Ours");
    CHECK(table.find("BL-1") != std::string::npos);
    CHECK(table.find("0.492") != std::string::npos);
  }

  TEST_CASE("corpus-level contracts") {
    const std::vector<TokenSequence> none;
    CHECK_THROWS(bleu(none, none, 1));
    const std::vector<TokenSequence> a{tokenize("a")}, b{tokenize("a"), tokenize("b")};
    CHECK_THROWS(rouge_l(a, b));
  }
}
