#include "a3net/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "a3net/rng.hpp"

namespace a3net {

std::string to_string(FusionMode m) { return m == FusionMode::Add ? "add" : "concat-project"; }

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoVisual: return "no_visual";
    case Ablation::NoSem: return "no_sem";
  }
  return "full";
}

FusionMode parse_fusion(std::string_view s) {
  if (s == "add") return FusionMode::Add;
  if (s == "concat-project") return FusionMode::ConcatProject;
  throw ConfigError("unknown fusion mode '" + std::string(s) + "' (expected add or concat-project)");
}

Ablation parse_ablation(std::string_view s) {
  if (s == "full") return Ablation::Full;
  if (s == "no_visual") return Ablation::NoVisual;
  if (s == "no_sem") return Ablation::NoSem;
  throw ConfigError("unknown ablation mode '" + std::string(s) + "' (expected full, no_visual or no_sem)");
}

std::string ablation_label(Ablation a) {
  switch (a) {
    case Ablation::Full: return "Ours";
    case Ablation::NoVisual: return "w/o Φ_visual";
    case Ablation::NoSem: return "w/o Φ_sem";
  }
  return "Ours";
}

Config Config::full_scale() {
  Config c;
  c.model.image_size = 224;
  c.model.image_channels = 1;
  c.model.views = 2;
  c.model.conv_channels = {64, 128, 256, 512, 1024};
  c.model.d_vis = 2048;
  c.model.d_model = 512;
  c.model.layers = 3;
  c.model.heads = 8;
  c.train.batch_size = 16;
  c.train.epochs = 100;
  c.train.lr_visual = 1e-4;
  c.train.lr_rest = 5e-4;
  c.train.lr_decay = 0.8;
  c.decode.beam_size = 3;
  return c;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest representation that round-trips.
  for (int p = 1; p <= 17; ++p) {
    char shorter[64];
    std::snprintf(shorter, sizeof shorter, "%.*g", p, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list, got '" + v + "'");
  return out;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Key {
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

#define A3_SIZE(sec, field) \
  {#field, {[](Config& c, const std::string& v) { c.sec.field = parse_size(v); }, [](const Config& c) { return std::to_string(c.sec.field); }}}
#define A3_U64(sec, field) \
  {#field, {[](Config& c, const std::string& v) { c.sec.field = parse_u64(v); }, [](const Config& c) { return std::to_string(c.sec.field); }}}
#define A3_REAL(sec, field) \
  {#field, {[](Config& c, const std::string& v) { c.sec.field = parse_double(v); }, [](const Config& c) { return fmt_double(c.sec.field); }}}
#define A3_BOOL(sec, field)                                                            \
  {#field, {[](Config& c, const std::string& v) { c.sec.field = parse_bool(v); }, \
            [](const Config& c) { return std::string(c.sec.field ? "true" : "false"); }}}

using Section = std::vector<std::pair<std::string, Key>>;

const std::vector<std::pair<std::string, Section>>& schema() {
  static const std::vector<std::pair<std::string, Section>> s = {
      {"model",
       {A3_SIZE(model, image_size),
        A3_SIZE(model, image_channels),
        A3_SIZE(model, views),
        {"conv_channels",
         {[](Config& c, const std::string& v) { c.model.conv_channels = parse_list(v); },
          [](const Config& c) { return fmt_list(c.model.conv_channels); }}},
        A3_SIZE(model, d_vis),
        A3_SIZE(model, d_model),
        A3_SIZE(model, layers),
        A3_SIZE(model, heads),
        A3_SIZE(model, ffn_mult),
        A3_SIZE(model, align_blocks),
        {"fusion",
         {[](Config& c, const std::string& v) { c.model.fusion = parse_fusion(v); },
          [](const Config& c) { return to_string(c.model.fusion); }}},
        {"ablation",
         {[](Config& c, const std::string& v) { c.model.ablation = parse_ablation(v); },
          [](const Config& c) { return to_string(c.model.ablation); }}},
        A3_BOOL(model, patch_positions),
        A3_BOOL(model, tie_embeddings),
        A3_BOOL(model, separate_dict_embedding),
        A3_SIZE(model, max_len),
        A3_REAL(model, init_std),
        A3_U64(model, init_seed),
        {"dictionary_file",
         {[](Config& c, const std::string& v) { c.model.dictionary_file = v; },
          [](const Config& c) { return c.model.dictionary_file; }}}}},
      {"train",
       {A3_SIZE(train, batch_size), A3_SIZE(train, epochs), A3_REAL(train, lr_visual), A3_REAL(train, lr_rest),
        A3_REAL(train, lr_decay), A3_REAL(train, beta1), A3_REAL(train, beta2), A3_REAL(train, adam_eps),
        A3_REAL(train, grad_clip), A3_SIZE(train, warmup_steps), A3_REAL(train, weight_decay),
        A3_REAL(train, label_smoothing), A3_U64(train, seed), A3_SIZE(train, min_freq), A3_BOOL(train, val_metrics)}},
      {"decode", {A3_SIZE(decode, beam_size), A3_REAL(decode, length_alpha), A3_SIZE(decode, max_len)}},
  };
  return s;
}

#undef A3_SIZE
#undef A3_U64
#undef A3_REAL
#undef A3_BOOL

void validate(const Config& c) {
  const auto& m = c.model;
  if (m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0) {
    throw ConfigError("d_model (" + std::to_string(m.d_model) + ") must be a positive multiple of heads (" +
                      std::to_string(m.heads) + ")");
  }
  if (m.views < 1 || m.views > 2) throw ConfigError("views must be 1 or 2");
  if (m.conv_channels.empty()) throw ConfigError("conv_channels needs at least one stage");
  const std::size_t stride = std::size_t{1} << m.conv_channels.size();
  if (m.image_size == 0 || m.image_size % stride != 0) {
    throw ConfigError("image_size " + std::to_string(m.image_size) + " is not divisible by the stride product " +
                      std::to_string(stride));
  }
  if (c.train.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.decode.beam_size == 0) throw ConfigError("beam_size must be positive");
  if (c.decode.max_len == 0) throw ConfigError("decode max_len must be positive");
}

}  // namespace

Config parse_config(std::string_view text, const Config& base) {
  Config c = base;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& [name, _] : schema()) known = known || name == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Key* found = nullptr;
    for (const auto& [name, keys] : schema()) {
      if (name != section) continue;
      for (const auto& [k, desc] : keys) {
        if (k == key) found = &desc;
      }
    }
    if (!found) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    try {
      found->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  validate(c);
  return c;
}

Config load_config(const std::string& path, const Config& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), base);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string to_text(const Config& config) {
  std::string out;
  for (const auto& [section, keys] : schema()) {
    if (!out.empty()) out += '\n';
    out += "[" + section + "]\n";
    for (const auto& [k, desc] : keys) out += k + " = " + desc.get(config) + "\n";
  }
  return out;
}

std::uint64_t model_digest(const ModelConfig& model) {
  Config c;
  c.model = model;
  std::string canon;
  for (const auto& [section, keys] : schema()) {
    if (section != "model") continue;
    for (const auto& [k, desc] : keys) {
      if (k == "init_seed" || k == "dictionary_file" || k == "init_std") continue;
      canon += k + "=" + desc.get(c) + ";";
    }
  }
  return fnv1a(canon.data(), canon.size());
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

}  // namespace a3net
