#include "a3net/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "a3net/config.hpp"
#include "a3net/corpus.hpp"
#include "a3net/metrics.hpp"
#include "a3net/training.hpp"

namespace a3net {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Width of the label column in ablation tables; fits "w/o Φ_visual".
constexpr std::size_t kTableLabelWidth = 14;

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

Config resolve_config(const std::string& path) { return path.empty() ? Config::desk() : load_config(path); }

struct TextRow {
  std::string id;
  std::string text;
};

// Reads candidates or references: a corpus (directory or manifest) or any JSONL
// whose objects carry "candidate", "report" or "text".
std::vector<TextRow> read_texts(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<TextRow> rows;
    for (const auto& s : load_corpus(path).samples) rows.push_back({s.id, s.report});
    return rows;
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<TextRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")");
    }
    TextRow row;
    if (j.contains("id")) row.id = j["id"].get<std::string>();
    bool found = false;
    for (const char* key : {"candidate", "report", "text"}) {
      if (j.contains(key)) {
        row.text = j[key].get<std::string>();
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected a \"candidate\", \"report\" or \"text\" field");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Pairs every candidate with its reference, by id when both sides have ids.
MetricReport evaluate_files(const fs::path& candidates, const fs::path& references) {
  const auto cands = read_texts(candidates);
  const auto refs = read_texts(references);
  if (cands.empty()) throw std::runtime_error("no candidates in '" + candidates.string() + "'");
  const bool by_id = std::all_of(cands.begin(), cands.end(), [](const TextRow& r) { return !r.id.empty(); }) &&
                     std::all_of(refs.begin(), refs.end(), [](const TextRow& r) { return !r.id.empty(); });
  std::vector<TokenSequence> c, r;
  if (by_id) {
    std::map<std::string, const TextRow*> index;
    for (const auto& row : refs) index[row.id] = &row;
    for (const auto& row : cands) {
      auto it = index.find(row.id);
      if (it == index.end()) throw std::runtime_error("no reference for candidate id '" + row.id + "'");
      c.push_back(tokenize(row.text));
      r.push_back(tokenize(it->second->text));
    }
  } else {
    if (cands.size() != refs.size()) {
      throw std::runtime_error("without ids the files must have equal line counts (" + std::to_string(cands.size()) +
                               " vs " + std::to_string(refs.size()) + ")");
    }
    for (std::size_t i = 0; i < cands.size(); ++i) {
      c.push_back(tokenize(cands[i].text));
      r.push_back(tokenize(refs[i].text));
    }
  }
  return evaluate_suite(c, r);
}

void write_candidates(const A3NetModel& model, const Config& config, const Corpus& corpus, Split split,
                      const fs::path& out_path) {
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + out_path.string() + "'");
  const std::string digest = digest_hex(model_digest(config.model));
  BeamOptions opts;
  opts.beam = config.decode.beam_size;
  opts.max_len = config.decode.max_len;
  opts.alpha = config.decode.length_alpha;
  for (const Sample* s : corpus.split(split)) {
    const auto hyps = model.beam(s->images, opts);
    const std::string text = hyps.empty() ? std::string() : join_tokens(model.vocab().decode(hyps.front().tokens));
    json j;
    j["id"] = s->id;
    j["candidate"] = text;
    j["config_digest"] = digest;
    out << j.dump() << '\n';
  }
}

std::string pad_label(const std::string& label) {
  std::size_t cps = 0;
  for (unsigned char ch : label) cps += (ch & 0xC0) != 0x80;
  return label + std::string(kTableLabelWidth > cps ? kTableLabelWidth - cps : 0, ' ');
}

std::string table_header() {
  std::string h = pad_label("Model");
  for (auto f : MetricReport::kFields) h += "  " + std::string(6 - f.size(), ' ') + std::string(f);
  return h;
}

std::string table_row(const std::string& label, const MetricReport& r) {
  std::string line = pad_label(label);
  for (double v : r.values()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "  %6.3f", v);
    line += buf;
  }
  return line;
}

void append_table_row(const fs::path& table, const std::string& label, const MetricReport& r) {
  const bool fresh = !fs::exists(table) || fs::file_size(table) == 0;
  if (table.has_parent_path()) fs::create_directories(table.parent_path());
  std::ofstream out(table, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to '" + table.string() + "'");
  if (fresh) out << table_header() << '\n';
  out << table_row(label, r) << '\n';
}

std::vector<EpochRecord> train_into(const Config& config, const Corpus& corpus, const fs::path& out_dir,
                                    std::ostream& err, const std::string& resume = {}) {
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.resolved");
    cfg << to_text(config);
  }
  TrainerOptions opts;
  opts.out_dir = out_dir;
  opts.on_epoch = [&err](const EpochRecord& r) {
    err << "epoch " << r.epoch << " train_loss " << r.train_loss;
    if (r.val_loss) err << " val_loss " << *r.val_loss;
    if (r.val_metrics) err << " val_BL-1 " << r.val_metrics->bleu[0];
    err << (r.best ? " *" : "") << '\n';
  };
  if (!resume.empty()) {
    auto snap = load_snapshot(resume, &config.model);
    Trainer trainer(std::move(snap), corpus, opts);
    trainer.set_epochs(config.train.epochs);
    return trainer.run();
  }
  Trainer trainer(config, corpus, opts);
  return trainer.run();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Chest X-ray report generation with anatomical alignment", "a3net"};
  app.require_subcommand(1);

  std::uint64_t seed = 7;
  std::size_t samples = 512;
  std::string out_path, entities, corpus_path, config_path, checkpoint, split_name = "test", candidates, references,
                                                                          mode = "full", table, resume;
  std::size_t views = 1, image_size = 32;
  bool as_json = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus and print its statistics");
  gen->add_option("--seed", seed, "Generator seed")->capture_default_str();
  gen->add_option("--samples", samples, "Number of samples (at least 4)")->capture_default_str();
  gen->add_option("--out", out_path, "Output corpus directory")->required();
  gen->add_option("--entities", entities, "Comma-separated entity names");
  gen->add_option("--views", views, "Views per sample (1 or 2)")->capture_default_str();
  gen->add_option("--image-size", image_size, "Image side in pixels")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints plus history");
  train->add_option("--config", config_path, "Config file (defaults when omitted)");
  train->add_option("--corpus", corpus_path, "Corpus directory or manifest")->required();
  train->add_option("--out", out_path, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* generate = app.add_subcommand("generate", "Beam-search decode a split to JSONL");
  generate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  generate->add_option("--corpus", corpus_path, "Corpus directory or manifest")->required();
  generate->add_option("--split", split_name, "train, val or test")->capture_default_str();
  generate->add_option("--out", out_path, "Output JSONL")->required();
  generate->add_option("--config", config_path, "Config to check against the checkpoint; decode keys apply");

  auto* evaluate = app.add_subcommand("evaluate", "Score candidates against references");
  evaluate->add_option("--candidates", candidates, "Candidate JSONL or corpus")->required();
  evaluate->add_option("--references", references, "Reference JSONL or corpus")->required();

  auto* ablate = app.add_subcommand("ablate", "Train, generate and evaluate one ablation mode");
  ablate->add_option("--config", config_path, "Config file (defaults when omitted)");
  ablate->add_option("--mode", mode, "full, no_visual or no_sem")->capture_default_str();
  ablate->add_option("--corpus", corpus_path, "Corpus directory or manifest")->required();
  ablate->add_option("--out", out_path, "Working directory for this mode")->required();
  ablate->add_option("--table", table, "Comparison table to append to (default <out>/../ablation.txt)");

  auto* stats = app.add_subcommand("stats", "Print corpus statistics");
  stats->add_option("--corpus", corpus_path, "Corpus directory or manifest")->required();
  stats->add_flag("--json", as_json, "Print JSON instead of a table");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (gen->parsed()) {
      SyntheticConfig sc;
      if (!entities.empty()) sc.entities = split_commas(entities);
      sc.views = views;
      sc.image_size = image_size;
      const auto synth = generate_synthetic(seed, samples, sc);
      save_corpus(synth.corpus, out_path);
      out << format_stats_table(compute_stats(synth.corpus));
      return 0;
    }
    if (train->parsed()) {
      const Config config = resolve_config(config_path);
      const Corpus corpus = load_corpus(corpus_path);
      out << to_text(config);
      out.flush();
      train_into(config, corpus, out_path, err, resume);
      return 0;
    }
    if (generate->parsed()) {
      const Corpus corpus = load_corpus(corpus_path);
      std::optional<Config> supplied;
      if (!config_path.empty()) supplied = load_config(config_path);
      auto snap = load_snapshot(checkpoint, supplied ? &supplied->model : nullptr);
      Config config = snap.config;
      if (supplied) config.decode = supplied->decode;
      write_candidates(*snap.model, config, corpus, parse_split(split_name), out_path);
      return 0;
    }
    if (evaluate->parsed()) {
      const auto report = evaluate_files(candidates, references);
      out << report.to_json() << '\n' << report.to_table("Model");
      return 0;
    }
    if (ablate->parsed()) {
      Config config = resolve_config(config_path);
      config.model.ablation = parse_ablation(mode);
      const Corpus corpus = load_corpus(corpus_path);
      const fs::path dir(out_path);
      train_into(config, corpus, dir, err);
      const fs::path best = fs::exists(dir / "best.ckpt") ? dir / "best.ckpt" : dir / "last.ckpt";
      auto snap = load_snapshot(best, &config.model);
      write_candidates(*snap.model, config, corpus, Split::Test, dir / "candidates.jsonl");
      std::vector<TokenSequence> c, r;
      std::map<std::string, std::string> ref_by_id;
      for (const Sample* s : corpus.split(Split::Test)) ref_by_id[s->id] = s->report;
      for (const auto& row : read_texts(dir / "candidates.jsonl")) {
        c.push_back(tokenize(row.text));
        r.push_back(tokenize(ref_by_id.at(row.id)));
      }
      const auto report = evaluate_suite(c, r);
      const fs::path table_path = table.empty() ? dir.parent_path() / "ablation.txt" : fs::path(table);
      append_table_row(table_path, ablation_label(config.model.ablation), report);
      out << report.to_json() << '\n' << table_row(ablation_label(config.model.ablation), report) << '\n';
      return 0;
    }
    if (stats->parsed()) {
      const auto s = compute_stats(load_corpus(corpus_path));
      out << (as_json ? stats_json(s) + "\n" : format_stats_table(s));
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace a3net
