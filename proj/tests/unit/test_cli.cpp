#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "a3net/cli.hpp"
#include "a3net/config.hpp"
#include "a3net/corpus.hpp"
#include "a3net/metrics.hpp"
#include "a3net/rng.hpp"

using namespace a3net;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("a3net_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t tree_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, dir).string();
    const auto body = slurp(f);
    h = fnv1a(rel.data(), rel.size(), h);
    h = fnv1a(body.data(), body.size(), h);
  }
  return h;
}

const char* kTinyConfig = R"(# small model for command tests
[model]
d_model = 16
heads = 2
layers = 1
d_vis = 16
conv_channels = 4,8,8
max_len = 20
[train]
epochs = 1
batch_size = 8
min_freq = 1
val_metrics = false
[decode]
max_len = 20
)";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config snapshot at full scale") {
    const auto c = Config::full_scale();
    CHECK(c.model.d_model == 512);
    CHECK(c.model.layers == 3);
    CHECK(c.model.heads == 8);
    CHECK(c.model.d_vis == 2048);
    CHECK(c.model.views == 2);
    CHECK(c.train.batch_size == 16);
    CHECK(c.decode.beam_size == 3);
    CHECK(c.train.lr_visual == 1e-4);
    CHECK(c.train.lr_rest == 5e-4);
    CHECK(c.train.lr_decay == 0.8);
    const auto text = to_text(c);
    CHECK(parse_config(text).model.d_model == 512);
    CHECK(to_text(parse_config(text)) == text);
  }

  TEST_CASE("desk defaults share the optimizer and decoding settings of the full configuration") {
    const auto c = Config::desk();
    CHECK(c.decode.beam_size == 3);
    CHECK(c.train.batch_size == 16);
    CHECK(c.train.lr_visual == 1e-4);
    CHECK(c.train.lr_rest == 5e-4);
    CHECK(c.train.lr_decay == 0.8);
    CHECK(c.train.warmup_steps == 0);
    CHECK(c.train.weight_decay == 0.0);
    CHECK(c.train.label_smoothing == 0.0);
    CHECK(c.train.min_freq == 3);
  }

  TEST_CASE("config errors carry line numbers") {
    CHECK_THROWS_WITH_AS(parse_config("[model]\nd_model = 64\nd_modle = 32\n"), doctest::Contains("line 3"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[optim]\n"), doctest::Contains("line 1"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("[train]\nbatch_size = many\n"), doctest::Contains("line 2"), ConfigError);
    CHECK_THROWS_AS(parse_config("[model]\nd_model = 30\nheads = 4\n"), ConfigError);
    const auto c = parse_config("[decode]\nbeam_size = 5  # wider\n");
    CHECK(c.decode.beam_size == 5);
    CHECK(c.model.d_model == 64);
  }

  TEST_CASE("model digest ignores init-only keys") {
    auto a = Config::desk().model, b = a;
    b.init_seed = 123;
    CHECK(model_digest(a) == model_digest(b));
    b.layers = 3;
    CHECK(model_digest(a) != model_digest(b));
  }

  TEST_CASE("gen-data is reproducible and validates its arguments") {
    const auto dir = temp_dir("gen");
    const auto r1 = cli({"gen-data", "--seed", "7", "--samples", "512", "--out", (dir / "a").string()});
    const auto r2 = cli({"gen-data", "--seed", "7", "--samples", "512", "--out", (dir / "b").string()});
    REQUIRE(r1.code == 0);
    REQUIRE(r2.code == 0);
    CHECK(tree_digest(dir / "a") == tree_digest(dir / "b"));
    CHECK(r1.out.find("Avg. Len.") != std::string::npos);

    const auto small = cli({"gen-data", "--samples", "3", "--out", (dir / "c").string()});
    CHECK(small.code != 0);
    CHECK(small.err.find("at least 4") != std::string::npos);
    CHECK(cli({"gen-data", "--samples", "8", "--out", "/proc/nope/corpus"}).code != 0);
  }

  TEST_CASE("train, generate, evaluate, stats") {
    const auto dir = temp_dir("pipeline");
    { std::ofstream(dir / "tiny.cfg") << kTinyConfig; }
    REQUIRE(cli({"gen-data", "--seed", "3", "--samples", "40", "--out", (dir / "corpus").string()}).code == 0);
    const auto tr = cli({"train", "--config", (dir / "tiny.cfg").string(), "--corpus", (dir / "corpus").string(),
                         "--out", (dir / "run").string()});
    REQUIRE_MESSAGE(tr.code == 0, tr.err);
    CHECK(tr.out.find("beam_size = 3") != std::string::npos);
    CHECK(tr.out.find("lr_decay = 0.8") != std::string::npos);
    CHECK(fs::exists(dir / "run" / "best.ckpt"));
    CHECK(fs::exists(dir / "run" / "history.jsonl"));

    const auto gen = cli({"generate", "--checkpoint", (dir / "run" / "best.ckpt").string(), "--corpus",
                          (dir / "corpus").string(), "--split", "test", "--out", (dir / "cands.jsonl").string()});
    REQUIRE_MESSAGE(gen.code == 0, gen.err);
    const auto corpus = load_corpus(dir / "corpus");
    std::ifstream in(dir / "cands.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    CHECK(lines == corpus.split(Split::Test).size());

    const auto ev = cli({"evaluate", "--candidates", (dir / "cands.jsonl").string(), "--references",
                         (dir / "corpus").string()});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    const auto report = MetricReport::from_json(ev.out.substr(0, ev.out.find('\n')));
    for (double v : report.values()) CHECK(v >= 0.0);

    const auto self = cli({"evaluate", "--candidates", (dir / "corpus").string(), "--references",
                           (dir / "corpus" / "manifest.jsonl").string()});
    REQUIRE(self.code == 0);
    const auto perfect = MetricReport::from_json(self.out.substr(0, self.out.find('\n')));
    for (double b : perfect.bleu) CHECK(b == 1.0);

    const auto st = cli({"stats", "--corpus", (dir / "corpus").string(), "--json"});
    CHECK(st.code == 0);
    CHECK(st.out.find("\"train\"") != std::string::npos);
  }

  TEST_CASE("digest mismatch and missing inputs fail loudly") {
    const auto dir = temp_dir("mismatch");
    { std::ofstream(dir / "tiny.cfg") << kTinyConfig; }
    { std::ofstream(dir / "other.cfg") << std::string(kTinyConfig) + "[model]\nlayers = 2\n"; }
    REQUIRE(cli({"gen-data", "--seed", "3", "--samples", "20", "--out", (dir / "corpus").string()}).code == 0);
    REQUIRE(cli({"train", "--config", (dir / "tiny.cfg").string(), "--corpus", (dir / "corpus").string(), "--out",
                 (dir / "run").string()})
                .code == 0);
    const auto bad = cli({"generate", "--checkpoint", (dir / "run" / "last.ckpt").string(), "--corpus",
                          (dir / "corpus").string(), "--out", (dir / "c.jsonl").string(), "--config",
                          (dir / "other.cfg").string()});
    CHECK(bad.code != 0);
    CHECK(bad.err.find("mismatch") != std::string::npos);

    CHECK(cli({"train", "--corpus", (dir / "nope").string(), "--out", (dir / "x").string()}).code != 0);
    CHECK(cli({"train", "--out", (dir / "x").string()}).code != 0);
    const auto typo = cli({"train", "--config", (dir / "typo.cfg").string(), "--corpus", (dir / "corpus").string(),
                           "--out", (dir / "y").string()});
    CHECK(typo.code != 0);
    { std::ofstream(dir / "typo.cfg") << "[train]\nepochz = 3\n"; }
    const auto typo2 = cli({"train", "--config", (dir / "typo.cfg").string(), "--corpus", (dir / "corpus").string(),
                            "--out", (dir / "y").string()});
    CHECK(typo2.code != 0);
    CHECK(typo2.err.find("line 2") != std::string::npos);
    CHECK(cli({"frobnicate"}).code != 0);
  }

  TEST_CASE("ablate writes rows with the table labels") {
    const auto dir = temp_dir("ablate");
    { std::ofstream(dir / "tiny.cfg") << kTinyConfig; }
    REQUIRE(cli({"gen-data", "--seed", "5", "--samples", "30", "--out", (dir / "corpus").string()}).code == 0);
    for (const char* mode : {"full", "no_visual", "no_sem"}) {
      const auto r = cli({"ablate", "--config", (dir / "tiny.cfg").string(), "--mode", mode, "--corpus",
                          (dir / "corpus").string(), "--out", (dir / "runs" / mode).string(), "--table",
                          (dir / "table.txt").string()});
      REQUIRE_MESSAGE(r.code == 0, r.err);
    }
    std::ifstream in(dir / "table.txt");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    REQUIRE(lines.size() == 4);
    CHECK(lines[0].rfind("Model", 0) == 0);
    CHECK(lines[1].rfind("Ours ", 0) == 0);
    CHECK(lines[2].rfind("w/o Φ_visual ", 0) == 0);
    CHECK(lines[3].rfind("w/o Φ_sem ", 0) == 0);
    CHECK(cli({"ablate", "--mode", "no_text", "--corpus", (dir / "corpus").string(), "--out",
               (dir / "z").string()})
              .code != 0);
  }
}
