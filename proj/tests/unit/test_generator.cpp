#include <doctest.h>

#include <cmath>
#include <limits>

#include "a3net/generator.hpp"
#include "a3net/model.hpp"
#include "a3net/ops.hpp"

using namespace a3net;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 4;
  c.layers = 2;
  c.max_len = 12;
  return c;
}

struct GeneratorFixture {
  ModelConfig config = small_config();
  ParameterSet params;
  Rng rng{3};
  Tensor table = params.normal("tokens", {9, 16}, ParamGroup::Rest, rng, 0.5);
  CaptionGenerator gen{config, table, params, rng};
};

std::vector<double> log_softmax(std::vector<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  for (double& v : logits) v = v - mx - std::log(z);
  return logits;
}

// Next-token distribution that depends on the whole prefix.
NextTokenScorer rigged_scorer(std::size_t vocab, std::uint64_t seed) {
  return [vocab, seed](const std::vector<TokenIds>& prefixes) {
    std::vector<std::vector<double>> rows;
    for (const auto& p : prefixes) {
      Rng r(mix64(seed, fnv1a(p.data(), p.size() * sizeof(std::size_t))));
      std::vector<double> logits(vocab);
      for (auto& v : logits) v = 2.0 * r.normal();
      rows.push_back(log_softmax(logits));
    }
    return rows;
  };
}

double sequence_log_prob(const NextTokenScorer& scorer, const TokenIds& seq) {
  double lp = 0.0;
  TokenIds prefix{kBosId};
  for (std::size_t t : seq) {
    lp += scorer({prefix})[0][t];
    prefix.push_back(t);
  }
  return lp;
}

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("encoder keeps shape; zero layers is the identity") {
    GeneratorFixture f;
    const auto h = random_tensor({2, 5, 16}, 1);
    CHECK(f.gen.encode(h).shape() == h.shape());

    auto cfg = small_config();
    cfg.layers = 0;
    ParameterSet params;
    Rng rng(1);
    const auto table = params.normal("tokens", {9, 16}, ParamGroup::Rest, rng, 0.5);
    CaptionGenerator empty(cfg, table, params, rng);
    const auto out = empty.encode(h);
    for (std::size_t i = 0; i < h.numel(); ++i) CHECK(out.data()[i] == h.data()[i]);
  }

  TEST_CASE("encoder is permutation equivariant over patches") {
    GeneratorFixture f;
    const auto h = random_tensor({1, 3, 16}, 2);
    const std::size_t perm[] = {2, 0, 1};
    std::vector<double> permuted(h.numel());
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t j = 0; j < 16; ++j) permuted[s * 16 + j] = h.at({0, perm[s], j});
    const auto a = f.gen.encode(h);
    const auto b = f.gen.encode(Tensor::from({1, 3, 16}, permuted));
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t j = 0; j < 16; ++j) CHECK(b.at({0, s, j}) == doctest::Approx(a.at({0, perm[s], j})).epsilon(1e-12));
  }

  TEST_CASE("causal decoding: later tokens do not change earlier logits") {
    GeneratorFixture f;
    const auto mem = f.gen.encode(random_tensor({1, 4, 16}, 3));
    TokenBatch a{1, 5, {1, 4, 5, 6, 7}};
    TokenBatch b = a;
    b.ids[3] = 8;
    const auto la = f.gen.decode(mem, a), lb = f.gen.decode(mem, b);
    const std::size_t v = 9;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < v; ++j) CHECK(la.at({0, t, j}) == lb.at({0, t, j}));
    bool changed = false;
    for (std::size_t j = 0; j < v; ++j) changed |= la.at({0, 3, j}) != lb.at({0, 3, j});
    CHECK(changed);
    const auto p = softmax_rows(la);
    for (std::size_t t = 0; t < 5; ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += p.at({0, t, j});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("teacher-forced log-likelihood equals the sum of step log-probs") {
    GeneratorFixture f;
    const auto mem = f.gen.encode(random_tensor({1, 4, 16}, 4));
    const TokenIds y{5, 6, 4, kEosId};
    TokenBatch in{1, 4, {kBosId, 5, 6, 4}};
    const auto lp = log_softmax_rows(f.gen.decode(mem, in));
    double teacher = 0.0;
    for (std::size_t t = 0; t < 4; ++t) teacher += lp.at({0, t, y[t]});
    double stepwise = 0.0;
    for (std::size_t t = 0; t < 4; ++t) {
      TokenBatch prefix{1, t + 1, TokenIds(in.ids.begin(), in.ids.begin() + t + 1)};
      stepwise += log_softmax_rows(f.gen.decode_step(mem, prefix)).at({0, y[t]});
    }
    CHECK(teacher == doctest::Approx(stepwise).epsilon(1e-12));
  }

  TEST_CASE("prefix longer than max_len + 1 is a contract error") {
    GeneratorFixture f;
    const auto mem = f.gen.encode(random_tensor({1, 4, 16}, 5));
    TokenBatch in{1, 14, TokenIds(14, 4)};
    CHECK_THROWS_AS(f.gen.decode(mem, in), ContractError);
  }

  TEST_CASE("greedy stops at the first EOS") {
    auto scorer = [](const std::vector<TokenIds>& prefixes) {
      std::vector<std::vector<double>> rows;
      for (const auto& p : prefixes) {
        std::vector<double> l(5, -10.0);
        l[p.size() < 3 ? 4 : kEosId] = 0.0;
        rows.push_back(log_softmax(l));
      }
      return rows;
    };
    const auto s = greedy_decode(scorer, 10);
    CHECK(s.tokens == TokenIds{4, 4, kEosId});
    CHECK(s.finished);
    CHECK(s.step_log_probs.size() == 3);
  }

  TEST_CASE("position-constant decoder repeats its argmax until max_len") {
    auto scorer = [](const std::vector<TokenIds>& prefixes) {
      return std::vector<std::vector<double>>(prefixes.size(), log_softmax({0.1, 0.2, 0.3, 0.9, 0.4}));
    };
    const auto s = greedy_decode(scorer, 6);
    CHECK(s.tokens == TokenIds(6, 3));
    CHECK_FALSE(s.finished);
  }

  TEST_CASE("greedy ties go to the lowest id; banned ids are skipped") {
    auto scorer = [](const std::vector<TokenIds>& prefixes) {
      return std::vector<std::vector<double>>(prefixes.size(), log_softmax({0.0, 1.0, 0.0, 1.0, 1.0}));
    };
    CHECK(greedy_decode(scorer, 2).tokens == TokenIds{1, 1});
    const std::size_t banned[] = {1};
    CHECK(greedy_decode(scorer, 2, banned).tokens == TokenIds{3, 3});
  }

  TEST_CASE("exhaustive beam finds the argmax sequence") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto scorer = rigged_scorer(5, seed);
      // Every sequence of length 4, cut after the first EOS.
      double best = -std::numeric_limits<double>::infinity();
      TokenIds best_seq;
      for (std::size_t code = 0; code < 625; ++code) {
        TokenIds seq;
        std::size_t c = code;
        for (int t = 0; t < 4; ++t, c /= 5) {
          seq.push_back(c % 5);
          if (seq.back() == kEosId) break;
        }
        const double lp = sequence_log_prob(scorer, seq);
        if (lp > best) {
          best = lp;
          best_seq = seq;
        }
      }
      BeamOptions opts;
      opts.beam = 625;
      opts.max_len = 4;
      const auto hyps = beam_search(scorer, opts);
      REQUIRE_FALSE(hyps.empty());
      CHECK(hyps.front().tokens == best_seq);
      CHECK(hyps.front().log_prob == doctest::Approx(best).epsilon(1e-12));
    }
  }

  TEST_CASE("beam 1 equals greedy") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto scorer = rigged_scorer(7, 100 + seed);
      BeamOptions opts;
      opts.beam = 1;
      opts.max_len = 8;
      const auto g = greedy_decode(scorer, 8);
      const auto b = beam_search(scorer, opts);
      CHECK(b.front().tokens == g.tokens);
    }
  }

  TEST_CASE("beam keeps the top-k cumulative scores at each step") {
    const auto scorer = rigged_scorer(6, 77);
    BeamOptions opts;
    opts.beam = 3;
    opts.max_len = 5;
    std::size_t steps = 0;
    opts.observer = [&](const BeamStep& s) {
      ++steps;
      CHECK(s.kept.size() <= 3);
      for (double k : s.kept)
        for (double p : s.pruned) CHECK(k >= p);
    };
    const auto hyps = beam_search(scorer, opts);
    CHECK(steps >= 1);
    for (std::size_t i = 1; i < hyps.size(); ++i) CHECK(hyps[i - 1].score >= hyps[i].score);
  }

  TEST_CASE("default beam size is 3") { CHECK(BeamOptions{}.beam == 3); }

  TEST_CASE("model greedy decode agrees with batched greedy") {
    ModelConfig cfg = small_config();
    cfg.d_vis = 8;
    const std::vector<TokenSequence> corpus{{"pneumothorax", "pleural", "spine", "heart", "hernia", "normal"}};
    A3NetModel model(cfg, Vocabulary::build(corpus, 1), AnatomicalDictionary::defaults());
    Rng rng(9);
    std::vector<ImageSet> images(3, ImageSet{ImageView{32, 32, 1, std::vector<double>(1024)}});
    for (auto& set : images)
      for (auto& p : set[0].pixels) p = rng.uniform();
    const auto batch = model.greedy_batch(images, 10);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto one = model.greedy(images[i], 10);
      CHECK(one.tokens == batch[i].tokens);
      for (std::size_t t = 0; t < one.step_log_probs.size(); ++t)
        CHECK(one.step_log_probs[t] == doctest::Approx(batch[i].step_log_probs[t]).epsilon(1e-12));
    }
    BeamOptions opts;
    opts.beam = 1;
    opts.max_len = 10;
    CHECK(model.beam(images[0], opts).front().tokens == model.greedy(images[0], 10).tokens);
  }
}
