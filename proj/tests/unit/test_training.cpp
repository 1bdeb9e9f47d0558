#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "a3net/gradcheck.hpp"
#include "a3net/ops.hpp"
#include "a3net/training.hpp"

using namespace a3net;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("a3net_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Config tiny_config() {
  Config c;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.layers = 1;
  c.model.d_vis = 16;
  c.model.conv_channels = {4, 8, 8};
  c.model.max_len = 20;
  c.train.batch_size = 4;
  c.train.epochs = 3;
  c.train.min_freq = 1;
  c.decode.max_len = 20;
  return c;
}

Corpus tiny_corpus(std::size_t n = 24) { return generate_synthetic(5, n).corpus; }

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("nll examples") {
    const std::size_t v = 7;
    const auto uniform = Tensor::zeros({1, 2, v});
    const std::size_t targets[] = {3, 5};
    CHECK(nll_loss(uniform, targets, kPadId).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));

    std::vector<double> peaked(2 * v, -1e3);
    peaked[3] = 1e3;
    peaked[v + 5] = 1e3;
    CHECK(nll_loss(Tensor::from({1, 2, v}, peaked), targets, kPadId).item() < 1e-12);

    // Both rows: -log(e / (e + 2)).
    const auto hand = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    const std::size_t t2[] = {0, 1};
    CHECK(nll_loss(hand, t2, 99).item() == doctest::Approx(std::log(std::exp(1.0) + 2.0) - 1.0).epsilon(1e-14));
  }

  TEST_CASE("pad positions are excluded from sum and count") {
    const auto logits = random_tensor({1, 3, 4}, 1);
    const std::size_t with_pad[] = {2, kPadId, 3};
    const auto a = nll_loss(logits, with_pad, kPadId).item();
    const auto lp = log_softmax_rows(logits);
    CHECK(a == doctest::Approx(-(lp.at({0, 0, 2}) + lp.at({0, 2, 3})) / 2.0).epsilon(1e-14));
    const std::size_t all_pad[] = {kPadId, kPadId, kPadId};
    CHECK_THROWS_AS(nll_loss(logits, all_pad, kPadId), ContractError);
  }

  TEST_CASE("nll gradients, with and without smoothing") {
    const auto logits = random_tensor({2, 3, 5}, 2, true);
    const std::size_t targets[] = {1, 4, kPadId, 2, 2, 3};
    for (double eps : {0.0, 0.1}) {
      const auto r = check_gradients([&] { return nll_loss(logits, targets, kPadId, eps); }, {{"logits", logits}});
      CHECK_MESSAGE(r.passed, r.worst);
    }
  }

  TEST_CASE("decayed learning rates") {
    CHECK(decayed_lr(5e-4, 0.8, 0) == 5e-4);
    CHECK(decayed_lr(5e-4, 0.8, 2) == doctest::Approx(3.2e-4).epsilon(1e-12));
    CHECK(decayed_lr(1e-4, 0.8, 2) == doctest::Approx(6.4e-5).epsilon(1e-12));
  }

  TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParameterSet params;
    Rng rng(1);
    const auto w = params.normal("w", {3}, ParamGroup::Rest, rng, 1.0);
    const std::vector<double> before(w.data().begin(), w.data().end());
    AdamOptimizer opt(params, TrainConfig{});
    params.zero_grads();
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.data()[i] == before[i]);
  }

  TEST_CASE("adam: first step moves against the gradient by about lr") {
    ParameterSet params;
    const auto w = params.constant("w", {1}, ParamGroup::Rest, 1.0);
    const auto v = params.constant("v", {1}, ParamGroup::Visual, 1.0);
    TrainConfig cfg;
    AdamOptimizer opt(params, cfg);
    CHECK(opt.lr(ParamGroup::Visual) == 1e-4);
    CHECK(opt.lr(ParamGroup::Rest) == 5e-4);
    Tensor(w).mutable_grad()[0] = 0.5;
    Tensor(v).mutable_grad()[0] = -2.0;
    opt.step();
    // m_hat = g, v_hat = g^2: the update is lr * g / (|g| + eps).
    CHECK(w.data()[0] == doctest::Approx(1.0 - 5e-4 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
    CHECK(v.data()[0] == doctest::Approx(1.0 + 1e-4 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
  }

  TEST_CASE("adam aborts on a non-finite gradient without touching weights") {
    ParameterSet params;
    const auto w = params.constant("w", {2}, ParamGroup::Rest, 1.0);
    AdamOptimizer opt(params, TrainConfig{});
    Tensor(w).mutable_grad()[1] = std::nan("");
    CHECK_THROWS_AS(opt.step(), TrainingError);
    CHECK(w.data()[0] == 1.0);
    CHECK(opt.steps() == 0);
  }

  TEST_CASE("global norm clipping") {
    ParameterSet params;
    const auto a = params.constant("a", {2}, ParamGroup::Rest, 0.0);
    const auto b = params.constant("b", {1}, ParamGroup::Visual, 0.0);
    Tensor(a).mutable_grad()[0] = 3.0;
    Tensor(b).mutable_grad()[0] = 4.0;
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));
  }

  TEST_CASE("parameter groups partition the model") {
    const auto corpus = tiny_corpus();
    Trainer trainer(tiny_config(), corpus);
    std::set<std::string> names;
    for (const auto& p : trainer.model().parameters().all()) {
      CHECK(names.insert(p.name).second);
      CHECK((p.group == ParamGroup::Visual) == (p.name.rfind("visual.", 0) == 0));
    }
  }

  TEST_CASE("one small step on a frozen batch lowers its loss") {
    auto cfg = tiny_config();
    cfg.train.lr_visual = 1e-5;
    cfg.train.lr_rest = 1e-5;
    const auto corpus = tiny_corpus();
    Trainer trainer(cfg, corpus);
    auto& model = trainer.model();
    std::vector<ImageSet> images;
    std::vector<TokenIds> reports;
    for (std::size_t i = 0; i < 4; ++i) {
      images.push_back(corpus.samples[i].images);
      reports.push_back(encode_report(model.vocab(), corpus.samples[i].report));
    }
    model.parameters().zero_grads();
    const auto before = model.loss(images, reports);
    before.backward();
    trainer.optimizer().step();
    const double after = model.loss(images, reports).item();
    CHECK(after < before.item());
  }

  TEST_CASE("seeded runs repeat their loss trajectories") {
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config();
    cfg.train.val_metrics = false;
    Trainer a(cfg, corpus), b(cfg, corpus);
    const auto ha = a.run(), hb = b.run();
    REQUIRE(ha.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(ha[i].train_loss == hb[i].train_loss);
      CHECK(ha[i].val_loss == hb[i].val_loss);
    }
  }

  TEST_CASE("checkpoint round trip gives bit-identical logits") {
    const auto dir = temp_dir("ckpt");
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config();
    cfg.train.epochs = 1;
    Trainer trainer(cfg, corpus);
    trainer.run();
    trainer.save(dir / "m.ckpt");
    auto snap = load_snapshot(dir / "m.ckpt");
    CHECK(snap.epoch == 1);
    CHECK(snap.model->vocab() == trainer.model().vocab());
    std::vector<ImageSet> images{corpus.samples[0].images, corpus.samples[1].images};
    std::vector<TokenIds> reports{encode_report(snap.model->vocab(), corpus.samples[0].report),
                                  encode_report(snap.model->vocab(), corpus.samples[1].report)};
    const auto tf = teacher_forcing(reports);
    NoGradGuard ng;
    const auto a = trainer.model().logits(images, tf), b = snap.model->logits(images, tf);
    REQUIRE(a.numel() == b.numel());
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }

  TEST_CASE("a checkpoint refuses a config with a different model digest") {
    const auto dir = temp_dir("digest");
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config();
    cfg.train.epochs = 1;
    Trainer trainer(cfg, corpus);
    trainer.save(dir / "m.ckpt");
    auto other = cfg.model;
    other.layers = 2;
    CHECK_THROWS_WITH_AS(load_snapshot(dir / "m.ckpt", &other), doctest::Contains("mismatch"), CheckpointError);
    auto same = cfg.model;
    same.init_seed = 99;  // init seed does not change the architecture
    CHECK_NOTHROW(load_snapshot(dir / "m.ckpt", &same));
  }

  TEST_CASE("malformed checkpoints are rejected") {
    const auto dir = temp_dir("bad");
    { std::ofstream(dir / "x.ckpt") << "NOPE"; }
    CHECK_THROWS_AS(read_checkpoint(dir / "x.ckpt"), CheckpointError);
    CheckpointFile f;
    f.digest = 42;
    CheckpointRecord r;
    r.name = "w";
    r.dims = {2};
    r.f64 = {1.5, -2.5};
    f.records.push_back(r);
    write_checkpoint(dir / "ok.ckpt", f);
    const auto back = read_checkpoint(dir / "ok.ckpt");
    CHECK(back.digest == 42);
    CHECK(back.at("w").f64 == std::vector<double>{1.5, -2.5});
    const auto size = fs::file_size(dir / "ok.ckpt");
    fs::resize_file(dir / "ok.ckpt", size - 3);
    CHECK_THROWS_WITH_AS(read_checkpoint(dir / "ok.ckpt"), doctest::Contains("truncated"), CheckpointError);
  }

  TEST_CASE("resuming reproduces the unbroken run") {
    const auto dir = temp_dir("resume");
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config();
    cfg.train.val_metrics = false;
    Trainer unbroken(cfg, corpus);
    const auto full = unbroken.run();

    cfg.train.epochs = 2;
    Trainer first(cfg, corpus);
    first.run();
    first.save(dir / "k.ckpt");
    Trainer resumed(load_snapshot(dir / "k.ckpt"), corpus);
    resumed.set_epochs(3);
    const auto rest = resumed.run();
    REQUIRE(rest.size() == 1);
    CHECK(std::abs(rest[0].train_loss - full[2].train_loss) < 1e-9);
    CHECK(std::abs(*rest[0].val_loss - *full[2].val_loss) < 1e-9);
  }

  TEST_CASE("history lines carry the config digest") {
    const auto dir = temp_dir("history");
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config();
    cfg.train.epochs = 2;
    TrainerOptions opts;
    opts.out_dir = dir;
    Trainer trainer(cfg, corpus, opts);
    trainer.run();
    std::ifstream in(dir / "history.jsonl");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      CHECK(line.find("\"config_digest\":\"" + digest_hex(model_digest(cfg.model)) + "\"") != std::string::npos);
      CHECK(line.find("\"BL-1\"") != std::string::npos);
    }
    CHECK(n == 2);
    CHECK(fs::exists(dir / "best.ckpt"));
    CHECK(fs::exists(dir / "last.ckpt"));
  }

  TEST_CASE("a non-finite loss halts with the batch id") {
    const auto corpus = tiny_corpus();
    Trainer trainer(tiny_config(), corpus);
    // Past the ReLU stack, so the NaN cannot be masked.
    Tensor w = trainer.model().parameters().find("visual.to_model.bias")->value;
    w.mutable_data()[0] = std::nan("");
    CHECK_THROWS_WITH_AS(trainer.run_epoch(), doctest::Contains("batch 0"), TrainingError);
  }
}
