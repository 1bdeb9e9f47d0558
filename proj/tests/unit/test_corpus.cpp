#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "a3net/corpus.hpp"

using namespace a3net;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("a3net_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("tokenizer rules") {
    CHECK(tokenize("The heart is normal.") == TokenSequence{"the", "heart", "is", "normal"});
    CHECK(tokenize("Pleural effusion.") == TokenSequence{"pleural", "effusion"});
    CHECK(tokenize("").empty());
    const auto t = tokenize("Mild  T-spine   changes; x2!");
    CHECK(tokenize(join_tokens(t)) == t);
  }

  TEST_CASE("vocabulary construction") {
    const std::vector<TokenSequence> corpus{{"a", "b", "c"}};
    const auto v = Vocabulary::build(corpus, 1);
    CHECK(v.size() == 3 + 4);
    CHECK(v.token(kPadId) == "<pad>");
    const std::vector<TokenSequence> counted{{"b", "a", "b", "c", "c", "c"}};
    const auto w = Vocabulary::build(counted, 2);
    CHECK(w.tokens() == std::vector<std::string>{w.token(0), w.token(1), w.token(2), w.token(3), "c", "b"});
    const std::vector<std::string> forced{"hernia"};
    const auto f = Vocabulary::build(counted, 2, forced);
    CHECK(f.find("hernia").has_value());
    CHECK_FALSE(f.find("a").has_value());
    CHECK(f.id("a") == kUnkId);
    CHECK(Vocabulary::build(counted, 2, forced) == f);
    const TokenIds ids{kBosId, *f.find("c"), kEosId, *f.find("b")};
    CHECK(f.decode(ids) == TokenSequence{"c"});
    CHECK(Vocabulary::from_tokens(f.tokens()) == f);
  }

  TEST_CASE("synthetic corpus is deterministic and self-consistent") {
    const auto a = generate_synthetic(11, 60), b = generate_synthetic(11, 60);
    CHECK(a.corpus == b.corpus);
    CHECK_FALSE(generate_synthetic(12, 60).corpus == a.corpus);
    const SyntheticConfig cfg;
    for (std::size_t i = 0; i < a.corpus.samples.size(); ++i) {
      const auto tokens = tokenize(a.corpus.samples[i].report);
      const std::set<std::string> words(tokens.begin(), tokens.end());
      std::set<std::size_t> present;
      for (const auto& f : a.findings[i]) present.insert(f.entity);
      for (std::size_t e = 0; e < cfg.entities.size(); ++e) CHECK(words.count(cfg.entities[e]) == present.count(e));
      std::string expected;
      for (const auto& f : a.findings[i]) expected += finding_sentence(cfg.entities[f.entity], f.abnormal) + ". ";
      if (expected.empty()) expected = "No acute findings. ";
      expected.pop_back();
      CHECK(a.corpus.samples[i].report == expected);
    }
    CHECK_THROWS(generate_synthetic(1, 3));
  }

  TEST_CASE("entity-state marginals within 3 sigma") {
    const std::size_t n = 2000;
    const SyntheticConfig cfg;
    const auto s = generate_synthetic(99, n, cfg);
    for (std::size_t e = 0; e < cfg.entities.size(); ++e) {
      std::size_t present = 0, abnormal = 0;
      for (const auto& fs : s.findings)
        for (const auto& f : fs)
          if (f.entity == e) {
            ++present;
            abnormal += f.abnormal;
          }
      const double np = static_cast<double>(n);
      CHECK(std::abs(present - np * cfg.p_present) <= 3 * std::sqrt(np * cfg.p_present * (1 - cfg.p_present)));
      const double pp = static_cast<double>(present);
      CHECK(std::abs(abnormal - pp * cfg.p_abnormal) <= 3 * std::sqrt(pp * cfg.p_abnormal * (1 - cfg.p_abnormal)));
    }
  }

  TEST_CASE("splits are disjoint, stable and roughly 70/10/20") {
    const auto s = generate_synthetic(3, 1000).corpus;
    const auto st = compute_stats(s);
    CHECK(st.train.reports + st.val.reports + st.test.reports == 1000);
    CHECK(st.train.reports > 620);
    CHECK(st.train.reports < 780);
    // A sample keeps its split when the corpus grows.
    const auto bigger = generate_synthetic(3, 1200).corpus;
    for (std::size_t i = 0; i < 1000; ++i) CHECK(bigger.samples[i].split == s.samples[i].split);
  }

  TEST_CASE("stats table") {
    Corpus c;
    for (int i = 0; i < 10; ++i) c.samples.push_back({"p" + std::to_string(i), {ImageView{}}, "the heart", Split::Train});
    const auto st = compute_stats(c);
    CHECK(st.train.images == 10);
    CHECK(st.train.reports == 10);
    CHECK_FALSE(st.val.avg_len.has_value());
    const auto table = format_stats_table(st);
    CHECK(table.find("Avg. Len.") != std::string::npos);
    CHECK(table.find("2.00") != std::string::npos);
    CHECK(table.find(" -") != std::string::npos);

    CorpusStats iu;
    iu.train = {5226, 2770, 2770, 37.56};
    iu.val = {748, 395, 395, 36.78};
    iu.test = {1496, 790, 790, 33.62};
    const auto t = format_stats_table(iu);
    CHECK(t.find("5,226") != std::string::npos);
    CHECK(t.find("2,770") != std::string::npos);
    CHECK(t.find("37.56") != std::string::npos);
    CHECK(stats_json(iu).find("\"image\":5226") != std::string::npos);
  }

  TEST_CASE("save and load round trip, including two views") {
    const auto dir = temp_dir("roundtrip");
    SyntheticConfig cfg;
    cfg.views = 2;
    const auto s = generate_synthetic(4, 12, cfg).corpus;
    save_corpus(s, dir);
    const auto back = load_corpus(dir);
    CHECK(back == s);
    CHECK(back.samples[0].images.size() == 2);
    CHECK(load_corpus(dir / "manifest.jsonl") == s);
  }

  TEST_CASE("bad manifests are rejected with line numbers") {
    const auto dir = temp_dir("bad");
    const auto s = generate_synthetic(4, 6).corpus;
    save_corpus(s, dir);
    std::string text;
    {
      std::ifstream in(dir / "manifest.jsonl");
      std::stringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    auto pos = text.find("\"split\":\"", text.find('\n') + 1);
    auto end = text.find('"', pos + 9);
    text.replace(pos + 9, end - pos - 9, "holdout");
    { std::ofstream(dir / "manifest.jsonl") << text; }
    CHECK_THROWS_WITH_AS(load_corpus(dir), doctest::Contains(":2"), CorpusError);
    CHECK_THROWS_AS(load_corpus(dir / "missing"), CorpusError);
  }

  TEST_CASE("image container") {
    const auto dir = temp_dir("image");
    ImageView img{2, 3, 1, {0, 0.25, 0.5, 0.75, 1.0, 0.125}};
    write_image(dir / "a.img", img);
    CHECK(read_image(dir / "a.img") == img);
    CHECK(fs::file_size(dir / "a.img") == 4 + 12 + 6 * 4);
    { std::ofstream(dir / "b.img") << "JUNKJUNK"; }
    CHECK_THROWS_AS(read_image(dir / "b.img"), CorpusError);
  }

  TEST_CASE("report encoding never fails") {
    const std::vector<TokenSequence> corpus{{"heart"}};
    const auto v = Vocabulary::build(corpus, 1);
    const auto ids = encode_report(v, "The heart is enlarged.");
    CHECK(ids == TokenIds{kUnkId, *v.find("heart"), kUnkId, kUnkId});
  }
}
