#include "a3net/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "a3net/rng.hpp"

namespace a3net {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw CorpusError("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

std::vector<const Sample*> Corpus::split(Split s) const {
  std::vector<const Sample*> out;
  for (const auto& sample : samples) {
    if (sample.split == s) out.push_back(&sample);
  }
  return out;
}

CorpusStats compute_stats(const Corpus& corpus) {
  CorpusStats stats;
  std::array<std::size_t, 3> tokens{};
  auto slot = [&](Split s) -> SplitStats& {
    return s == Split::Train ? stats.train : s == Split::Val ? stats.val : stats.test;
  };
  for (const auto& s : corpus.samples) {
    auto& st = slot(s.split);
    st.images += s.images.size();
    st.reports += 1;
    st.patients += 1;
    tokens[static_cast<std::size_t>(s.split)] += tokenize(s.report).size();
  }
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    auto& st = slot(s);
    if (st.reports) st.avg_len = static_cast<double>(tokens[static_cast<std::size_t>(s)]) / static_cast<double>(st.reports);
  }
  return stats;
}

namespace {

std::string with_commas(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string pad_left(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }
std::string pad_right(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string format_stats_table(const CorpusStats& stats) {
  const std::array<const SplitStats*, 3> cols{&stats.train, &stats.val, &stats.test};
  std::vector<std::vector<std::string>> rows = {{"", "Train", "Val", "Test"}};
  auto count_row = [&](const std::string& label, auto field) {
    std::vector<std::string> r{label};
    for (auto* c : cols) r.push_back(with_commas(field(*c)));
    rows.push_back(r);
  };
  count_row("Image", [](const SplitStats& s) { return s.images; });
  count_row("Report", [](const SplitStats& s) { return s.reports; });
  count_row("Patient", [](const SplitStats& s) { return s.patients; });
  std::vector<std::string> avg{"Avg. Len."};
  for (auto* c : cols) avg.push_back(c->avg_len ? fixed2(*c->avg_len) : "-");
  rows.push_back(avg);

  std::array<std::size_t, 4> width{};
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::string out;
  for (const auto& r : rows) {
    out += pad_right(r[0], width[0]);
    for (std::size_t i = 1; i < r.size(); ++i) out += "  " + pad_left(r[i], width[i]);
    out += '\n';
  }
  return out;
}

std::string stats_json(const CorpusStats& stats) {
  auto one = [](const SplitStats& s) {
    json j{{"image", s.images}, {"report", s.reports}, {"patient", s.patients}};
    j["avg_len"] = s.avg_len ? json(*s.avg_len) : json(nullptr);
    return j;
  };
  return json{{"train", one(stats.train)}, {"val", one(stats.val)}, {"test", one(stats.test)}}.dump();
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CorpusError("truncated image header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_image(const fs::path& path, const ImageView& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CorpusError("cannot write image '" + path.string() + "'");
  os.write("A3IM", 4);
  put_u32(os, static_cast<std::uint32_t>(image.height));
  put_u32(os, static_cast<std::uint32_t>(image.width));
  put_u32(os, static_cast<std::uint32_t>(image.channels));
  for (double v : image.pixels) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw CorpusError("failed writing image '" + path.string() + "'");
}

ImageView read_image(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorpusError("cannot open image '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "A3IM", 4) != 0) {
    throw CorpusError("'" + path.string() + "' is not an A3IM image");
  }
  ImageView img;
  img.height = get_u32(is);
  img.width = get_u32(is);
  img.channels = get_u32(is);
  img.pixels.resize(img.height * img.width * img.channels);
  for (auto& p : img.pixels) p = static_cast<double>(std::bit_cast<float>(get_u32(is)));
  return img;
}

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw CorpusError("cannot create corpus directory '" + dir.string() + "': " + ec.message());
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw CorpusError("cannot write manifest in '" + dir.string() + "'");
  for (const auto& s : corpus.samples) {
    json files = json::array();
    for (std::size_t v = 0; v < s.images.size(); ++v) {
      const std::string rel = "images/" + s.id + "_v" + std::to_string(v) + ".img";
      write_image(dir / rel, s.images[v]);
      files.push_back(rel);
    }
    manifest << json{{"id", s.id}, {"split", to_string(s.split)}, {"report", s.report}, {"image_files", files}}.dump()
             << '\n';
  }
  if (!manifest) throw CorpusError("failed writing manifest in '" + dir.string() + "'");
}

Corpus load_corpus(const fs::path& path) {
  const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.jsonl" : path;
  const fs::path root = manifest_path.parent_path();
  std::ifstream in(manifest_path);
  if (!in) throw CorpusError("cannot open corpus manifest '" + manifest_path.string() + "'");
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no) + ": ";
    Sample s;
    std::vector<std::string> files;
    try {
      const json j = json::parse(line);
      s.id = j.at("id").get<std::string>();
      s.report = j.at("report").get<std::string>();
      files = j.at("image_files").get<std::vector<std::string>>();
      s.split = parse_split(j.at("split").get<std::string>());
    } catch (const json::exception& e) {
      throw CorpusError(where + "malformed manifest line (" + e.what() + ")");
    } catch (const CorpusError& e) {
      throw CorpusError(where + e.what());
    }
    if (tokenize(s.report).empty()) throw CorpusError(where + "sample '" + s.id + "' has an empty report");
    if (files.empty() || files.size() > 2) throw CorpusError(where + "sample '" + s.id + "' needs 1 or 2 image files");
    for (const auto& f : files) {
      const fs::path p = root / f;
      if (!fs::exists(p)) throw CorpusError("sample '" + s.id + "': missing image file '" + p.string() + "'");
      s.images.push_back(read_image(p));
    }
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

TokenIds encode_report(const Vocabulary& vocab, std::string_view report) { return vocab.encode(tokenize(report)); }

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Templates {
  const char* normal;
  const char* abnormal;
};

const std::map<std::string, Templates>& known_templates() {
  static const std::map<std::string, Templates> t = {
      {"pneumothorax", {"There is no pneumothorax", "A small pneumothorax is present"}},
      {"pleural", {"No pleural effusion is seen", "There is a pleural effusion"}},
      {"spine", {"The spine is intact", "Degenerative changes of the spine"}},
      {"heart", {"The heart size is normal", "The heart is enlarged"}},
      {"hernia", {"No hiatal hernia", "A hiatal hernia is present"}},
      {"lungs", {"The lungs are clear", "Patchy opacity in the lungs"}},
      {"diaphragm", {"The diaphragm is normal", "The diaphragm is elevated"}},
      {"mediastinum", {"The mediastinum is normal", "The mediastinum is widened"}},
      {"ribs", {"The ribs are intact", "A rib fracture is noted"}},
  };
  return t;
}

void draw_glyph(ImageView& img, std::size_t cy, std::size_t cx, std::size_t cell, bool abnormal) {
  const auto set = [&](std::ptrdiff_t y, std::ptrdiff_t x, double v) {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(img.height) || x >= static_cast<std::ptrdiff_t>(img.width)) return;
    double& p = img.pixels[(static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * img.channels];
    p = std::max(p, v);
  };
  const auto r = static_cast<std::ptrdiff_t>(std::max<std::size_t>(cell / 4, 1));
  const auto y0 = static_cast<std::ptrdiff_t>(cy), x0 = static_cast<std::ptrdiff_t>(cx);
  if (abnormal) {
    // Bright plus sign.
    for (std::ptrdiff_t k = -r - 1; k <= r + 1; ++k) {
      set(y0 + k, x0, 1.0);
      set(y0, x0 + k, 1.0);
    }
  } else {
    // Dim filled square.
    for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
      for (std::ptrdiff_t dx = -r; dx <= r; ++dx) set(y0 + dy, x0 + dx, 0.5);
  }
}

ImageView transposed(const ImageView& img) {
  ImageView t{img.width, img.height, img.channels, std::vector<double>(img.pixels.size())};
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        t.pixels[(x * t.width + y) * img.channels + c] = img.pixels[(y * img.width + x) * img.channels + c];
  return t;
}

}  // namespace

std::string finding_sentence(const std::string& entity, bool abnormal) {
  const auto& t = known_templates();
  if (auto it = t.find(entity); it != t.end()) return abnormal ? it->second.abnormal : it->second.normal;
  return abnormal ? "The " + entity + " is abnormal" : "The " + entity + " is unremarkable";
}

SyntheticCorpus generate_synthetic(std::uint64_t seed, std::size_t n_samples, const SyntheticConfig& config) {
  if (config.entities.empty()) throw ConfigError("synthetic corpus needs at least one entity");
  if (n_samples < 4) throw ConfigError("synthetic corpus needs at least 4 samples, got " + std::to_string(n_samples));
  if (config.views < 1 || config.views > 2) throw ConfigError("synthetic corpus supports 1 or 2 views");
  const std::size_t c = config.entities.size();
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(c))));
  const std::size_t cell = config.image_size / grid;
  if (cell < 4) throw ConfigError("image_size too small for " + std::to_string(c) + " entity regions");

  SyntheticCorpus out;
  Rng rng(seed);
  for (std::size_t i = 0; i < n_samples; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i);
    Sample s;
    s.id = id;
    const std::uint64_t h = mix64(seed, fnv1a(s.id.data(), s.id.size()));
    const auto bucket = h % 10;
    s.split = bucket < 7 ? Split::Train : bucket < 8 ? Split::Val : Split::Test;

    std::vector<SyntheticFinding> findings;
    for (std::size_t e = 0; e < c; ++e) {
      const bool present = rng.uniform() < config.p_present;
      const bool abnormal = rng.uniform() < config.p_abnormal;
      if (present) findings.push_back({e, abnormal});
    }

    ImageView img{config.image_size, config.image_size, 1, std::vector<double>(config.image_size * config.image_size)};
    for (auto& p : img.pixels) p = config.noise * rng.uniform();
    for (const auto& f : findings) {
      const std::size_t row = f.entity / grid, col = f.entity % grid;
      // One pixel of jitter around the cell centre.
      const std::size_t jy = rng.below(3), jx = rng.below(3);
      draw_glyph(img, row * cell + cell / 2 + jy - 1, col * cell + cell / 2 + jx - 1, cell, f.abnormal);
    }
    s.images.push_back(img);
    if (config.views == 2) {
      ImageView lateral = transposed(img);
      for (auto& p : lateral.pixels) p = std::min(1.0, p + config.noise * rng.uniform());
      s.images.push_back(std::move(lateral));
    }

    std::string report;
    for (const auto& f : findings) report += finding_sentence(config.entities[f.entity], f.abnormal) + ". ";
    if (findings.empty()) report = "No acute findings. ";
    report.pop_back();
    s.report = std::move(report);
    // The image container stores float32; keep samples exactly representable.
    for (auto& v : s.images)
      for (auto& p : v.pixels) p = static_cast<double>(static_cast<float>(p));

    out.corpus.samples.push_back(std::move(s));
    out.findings.push_back(std::move(findings));
  }
  return out;
}

}  // namespace a3net
