#include "a3net/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "a3net/ops.hpp"

namespace a3net {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Tensor nll_loss(const Tensor& logits, std::span<const std::size_t> targets, std::size_t pad_id,
                double label_smoothing) {
  if (logits.rank() < 2) throw DimensionError("nll_loss: logits need a vocabulary axis, got " + shape_str(logits.shape()));
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows) {
    throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  const auto x = logits.data();
  std::vector<double> probs(x.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = targets[r];
    if (t == pad_id) continue;
    if (t >= v) throw std::out_of_range("nll_loss: target id " + std::to_string(t) + " outside vocabulary");
    const double* row = x.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    double loss = lse - row[t];
    if (label_smoothing > 0.0) {
      double mean_row = 0.0;
      for (std::size_t j = 0; j < v; ++j) mean_row += row[j];
      mean_row /= static_cast<double>(v);
      loss = (1.0 - label_smoothing) * loss + label_smoothing * (lse - mean_row);
    }
    total += loss;
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - lse);
    ++count;
  }
  if (count == 0) throw ContractError("nll_loss: every target is padding");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_op("nll_loss", {}, {total * inv}, {logits},
                 [logits, tg = std::move(tg), probs = std::move(probs), pad_id, v, inv,
                  label_smoothing](const detail::TensorImpl& o) {
                   auto* g = grad_sink(logits);
                   const double scale_out = o.grad[0] * inv;
                   const double uniform = label_smoothing / static_cast<double>(v);
                   for (std::size_t r = 0; r < tg.size(); ++r) {
                     if (tg[r] == pad_id) continue;
                     double* gr = g->data() + r * v;
                     const double* p = probs.data() + r * v;
                     for (std::size_t j = 0; j < v; ++j) gr[j] += scale_out * (p[j] - uniform);
                     gr[tg[r]] -= scale_out * (1.0 - label_smoothing);
                   }
                 });
}

double decayed_lr(double lr0, double decay, std::size_t epoch) {
  return lr0 * std::pow(decay, static_cast<double>(epoch));
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) {
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params.all()) {
      Tensor t = p.value;
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

AdamOptimizer::AdamOptimizer(const ParameterSet& params, const TrainConfig& config)
    : params_(&params), config_(config), lr_visual_(config.lr_visual), lr_rest_(config.lr_rest) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

void AdamOptimizer::set_epoch(std::size_t epoch) {
  lr_visual_ = decayed_lr(config_.lr_visual, config_.lr_decay, epoch);
  lr_rest_ = decayed_lr(config_.lr_rest, config_.lr_decay, epoch);
}

void AdamOptimizer::set_lr(ParamGroup group, double lr) { (group == ParamGroup::Visual ? lr_visual_ : lr_rest_) = lr; }

void AdamOptimizer::step() {
  const auto& all = params_->all();
  if (all.size() != m_.size()) throw ContractError("AdamOptimizer: parameter set changed after construction");
  for (const auto& p : all) {
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  double warm = 1.0;
  if (config_.warmup_steps > 0) {
    warm = std::min(1.0, static_cast<double>(steps_) / static_cast<double>(config_.warmup_steps));
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    Tensor value = all[i].value;
    auto w = value.mutable_data();
    const auto grad = value.grad();
    const double rate = lr(all[i].group) * warm;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double g = grad.empty() ? 0.0 : grad[j];
      if (config_.weight_decay > 0.0) g += config_.weight_decay * w[j];
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      w[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.adam_eps);
    }
  }
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[4] = {'A', '3', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof value)) throw CheckpointError("checkpoint truncated in " + what);
  return value;
}

std::string join_lines(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& it : items) s += it + '\n';
  return s;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < s.size()) {
    const auto nl = s.find('\n', start);
    out.push_back(s.substr(start, nl - start));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  return out;
}

CheckpointRecord f64_record(std::string name, const Shape& shape, std::span<const double> values) {
  CheckpointRecord r;
  r.name = std::move(name);
  r.dtype = CheckpointRecord::DType::F64;
  r.dims.assign(shape.begin(), shape.end());
  r.f64.assign(values.begin(), values.end());
  return r;
}

CheckpointRecord text_record(std::string name, std::string text) {
  CheckpointRecord r;
  r.name = std::move(name);
  r.dtype = CheckpointRecord::DType::Utf8;
  r.dims = {text.size()};
  r.text = std::move(text);
  return r;
}

CheckpointRecord u64_record(std::string name, std::vector<std::uint64_t> values) {
  CheckpointRecord r;
  r.name = std::move(name);
  r.dtype = CheckpointRecord::DType::U64;
  r.dims = {values.size()};
  r.u64 = std::move(values);
  return r;
}

}  // namespace

const CheckpointRecord* CheckpointFile::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const CheckpointRecord& CheckpointFile::at(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  throw CheckpointError("checkpoint has no record '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, CheckpointFile::kVersion);
  put<std::uint64_t>(out, file.digest);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.records.size()));
  for (const auto& r : file.records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put<std::uint64_t>(out, d);
    switch (r.dtype) {
      case CheckpointRecord::DType::F64:
        out.write(reinterpret_cast<const char*>(r.f64.data()), static_cast<std::streamsize>(r.f64.size() * 8));
        break;
      case CheckpointRecord::DType::U64:
        out.write(reinterpret_cast<const char*>(r.u64.data()), static_cast<std::streamsize>(r.u64.size() * 8));
        break;
      case CheckpointRecord::DType::Utf8:
        out.write(r.text.data(), static_cast<std::streamsize>(r.text.size()));
        break;
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, "header");
  if (version != CheckpointFile::kVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(CheckpointFile::kVersion) + ")");
  }
  CheckpointFile file;
  file.digest = get<std::uint64_t>(in, "header");
  const auto count = get<std::uint32_t>(in, "header");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const auto name_len = get<std::uint32_t>(in, "record name");
    r.name.resize(name_len);
    if (!in.read(r.name.data(), name_len)) throw CheckpointError("checkpoint truncated in record name");
    const auto dtype = get<std::uint8_t>(in, r.name);
    if (dtype > 2) throw CheckpointError("record '" + r.name + "' has unknown dtype " + std::to_string(dtype));
    r.dtype = static_cast<CheckpointRecord::DType>(dtype);
    const auto rank = get<std::uint32_t>(in, r.name);
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.dims.push_back(get<std::uint64_t>(in, r.name));
      n *= r.dims.back();
    }
    if (n > (std::uint64_t{1} << 34)) throw CheckpointError("record '" + r.name + "' is implausibly large");
    bool ok = true;
    switch (r.dtype) {
      case CheckpointRecord::DType::F64:
        r.f64.resize(n);
        ok = static_cast<bool>(in.read(reinterpret_cast<char*>(r.f64.data()), static_cast<std::streamsize>(n * 8)));
        break;
      case CheckpointRecord::DType::U64:
        r.u64.resize(n);
        ok = static_cast<bool>(in.read(reinterpret_cast<char*>(r.u64.data()), static_cast<std::streamsize>(n * 8)));
        break;
      case CheckpointRecord::DType::Utf8:
        r.text.resize(n);
        ok = static_cast<bool>(in.read(r.text.data(), static_cast<std::streamsize>(n)));
        break;
    }
    if (!ok) throw CheckpointError("checkpoint truncated in record '" + r.name + "'");
    file.records.push_back(std::move(r));
  }
  return file;
}

void save_snapshot(const std::filesystem::path& path, const Config& config, const A3NetModel& model,
                   const AdamOptimizer* optimizer, std::size_t epoch, std::uint64_t rng_state,
                   std::optional<double> best_val_loss) {
  CheckpointFile file;
  file.digest = model_digest(config.model);
  file.records.push_back(text_record("config", to_text(config)));
  file.records.push_back(text_record("vocab", join_lines(model.vocab().tokens())));
  file.records.push_back(text_record("dictionary", join_lines(model.dictionary().entities())));
  const auto& params = model.parameters().all();
  for (const auto& p : params) file.records.push_back(f64_record("param/" + p.name, p.value.shape(), p.value.data()));
  std::uint64_t steps = 0;
  if (optimizer) {
    steps = optimizer->steps();
    for (std::size_t i = 0; i < params.size(); ++i) {
      file.records.push_back(f64_record("adam.m/" + params[i].name, params[i].value.shape(), optimizer->first_moments()[i]));
      file.records.push_back(
          f64_record("adam.v/" + params[i].name, params[i].value.shape(), optimizer->second_moments()[i]));
    }
  }
  file.records.push_back(u64_record("state", {epoch, rng_state, steps, optimizer ? 1u : 0u, best_val_loss ? 1u : 0u}));
  const double best = best_val_loss.value_or(0.0);
  file.records.push_back(f64_record("best_val_loss", {1}, std::span(&best, 1)));
  write_checkpoint(path, file);
}

TrainingSnapshot load_snapshot(const std::filesystem::path& path, const ModelConfig* expected) {
  const CheckpointFile file = read_checkpoint(path);
  TrainingSnapshot snap;
  snap.config = parse_config(file.at("config").text);
  if (model_digest(snap.config.model) != file.digest) {
    throw CheckpointError("checkpoint " + path.string() + " is corrupt: header digest " + digest_hex(file.digest) +
                          " does not match its embedded config (" + digest_hex(model_digest(snap.config.model)) + ")");
  }
  if (expected && model_digest(*expected) != file.digest) {
    throw CheckpointError("config/checkpoint mismatch: the checkpoint was trained with model digest " +
                          digest_hex(file.digest) + " but the supplied config resolves to " +
                          digest_hex(model_digest(*expected)) + "; model settings must match the training config");
  }
  auto vocab = Vocabulary::from_tokens(split_lines(file.at("vocab").text));
  AnatomicalDictionary dict(split_lines(file.at("dictionary").text));
  snap.model = std::make_unique<A3NetModel>(snap.config.model, std::move(vocab), std::move(dict));
  const auto& params = snap.model->parameters().all();
  for (const auto& p : params) {
    const auto& r = file.at("param/" + p.name);
    const Shape shape(r.dims.begin(), r.dims.end());
    if (r.dtype != CheckpointRecord::DType::F64 || shape != p.value.shape()) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(shape) + " in the checkpoint, expected " +
                            shape_str(p.value.shape()));
    }
    Tensor t = p.value;
    std::copy(r.f64.begin(), r.f64.end(), t.mutable_data().begin());
  }
  const auto& state = file.at("state").u64;
  if (state.size() != 5) throw CheckpointError("checkpoint state record is malformed");
  snap.epoch = state[0];
  snap.rng_state = state[1];
  snap.adam_steps = state[2];
  if (state[3]) {
    for (const auto& p : params) {
      snap.adam_m.push_back(file.at("adam.m/" + p.name).f64);
      snap.adam_v.push_back(file.at("adam.v/" + p.name).f64);
    }
  }
  snap.has_best = state[4] != 0;
  snap.best_val_loss = file.at("best_val_loss").f64.at(0);
  return snap;
}

// ---- trainer ----

std::string EpochRecord::to_json(std::uint64_t config_digest) const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss ? nlohmann::ordered_json(*val_loss) : nlohmann::ordered_json(nullptr);
  if (val_metrics) {
    j["val_metrics"] = nlohmann::ordered_json::parse(val_metrics->to_json());
  } else {
    j["val_metrics"] = nullptr;
  }
  j["lr_visual"] = lr_visual;
  j["lr_rest"] = lr_rest;
  j["steps"] = steps;
  j["best"] = best;
  j["config_digest"] = digest_hex(config_digest);
  return j.dump();
}

AnatomicalDictionary resolve_dictionary(const ModelConfig& config) {
  return config.dictionary_file.empty() ? AnatomicalDictionary::defaults()
                                        : AnatomicalDictionary::load(config.dictionary_file);
}

Vocabulary build_vocabulary(const Corpus& corpus, std::size_t min_freq, const AnatomicalDictionary& dictionary) {
  std::vector<TokenSequence> texts;
  for (const Sample* s : corpus.split(Split::Train)) texts.push_back(tokenize(s->report));
  const TokenSequence forced = dictionary.tokens();
  return Vocabulary::build(texts, min_freq, forced);
}

Trainer::Trainer(const Config& config, const Corpus& corpus, TrainerOptions options)
    : config_(config), options_(std::move(options)), rng_(config.train.seed) {
  auto dict = resolve_dictionary(config.model);
  auto vocab = build_vocabulary(corpus, config.train.min_freq, dict);
  model_ = std::make_unique<A3NetModel>(config.model, std::move(vocab), std::move(dict));
  optimizer_ = std::make_unique<AdamOptimizer>(model_->parameters(), config_.train);
  prepare(corpus);
}

Trainer::Trainer(TrainingSnapshot snapshot, const Corpus& corpus, TrainerOptions options)
    : config_(snapshot.config), options_(std::move(options)), rng_(snapshot.rng_state) {
  model_ = std::move(snapshot.model);
  optimizer_ = std::make_unique<AdamOptimizer>(model_->parameters(), config_.train);
  if (!snapshot.adam_m.empty()) {
    optimizer_->first_moments() = std::move(snapshot.adam_m);
    optimizer_->second_moments() = std::move(snapshot.adam_v);
  }
  optimizer_->set_steps(snapshot.adam_steps);
  epoch_ = snapshot.epoch;
  if (snapshot.has_best) best_val_ = snapshot.best_val_loss;
  prepare(corpus);
}

void Trainer::prepare(const Corpus& corpus) {
  train_ = corpus.split(Split::Train);
  val_ = corpus.split(Split::Val);
  if (train_.empty()) throw CorpusError("training needs a non-empty train split");
  for (const Sample* s : train_) train_ids_.push_back(target_ids(s->report));
  for (const Sample* s : val_) val_ids_.push_back(target_ids(s->report));
}

TokenIds Trainer::target_ids(const std::string& report) const {
  TokenIds ids = encode_report(model_->vocab(), report);
  // The decoder has max_len positions after BOS; longer reports are cut.
  if (ids.size() > config_.model.max_len) ids.resize(config_.model.max_len);
  return ids;
}

double Trainer::evaluate_loss(std::span<const Sample* const> samples) const {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  const std::size_t bs = config_.train.batch_size;
  for (std::size_t start = 0; start < samples.size(); start += bs) {
    const std::size_t end = std::min(samples.size(), start + bs);
    std::vector<ImageSet> images;
    std::vector<TokenIds> reports;
    std::size_t count = 0;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(samples[i]->images);
      reports.push_back(target_ids(samples[i]->report));
      count += reports.back().size() + 1;
    }
    total += model_->loss(images, reports).item() * static_cast<double>(count);
    tokens += count;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

EpochRecord Trainer::run_epoch() {
  EpochRecord rec;
  rec.epoch = epoch_ + 1;
  optimizer_->set_epoch(epoch_);
  rec.lr_visual = optimizer_->lr(ParamGroup::Visual);
  rec.lr_rest = optimizer_->lr(ParamGroup::Rest);

  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng_.shuffle(order);

  const std::size_t bs = config_.train.batch_size;
  double loss_sum = 0.0;
  std::size_t token_sum = 0;
  std::size_t batch_id = 0;
  for (std::size_t start = 0; start < order.size(); start += bs, ++batch_id) {
    const std::size_t end = std::min(order.size(), start + bs);
    std::vector<ImageSet> images;
    std::vector<TokenIds> reports;
    std::size_t count = 0;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(train_[order[i]]->images);
      reports.push_back(train_ids_[order[i]]);
      count += reports.back().size() + 1;
    }
    model_->parameters().zero_grads();
    const Tensor loss = model_->loss(images, reports, config_.train.label_smoothing);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(rec.epoch) + ", batch " +
                          std::to_string(batch_id) + " (first sample id '" + train_[order[start]]->id + "')");
    }
    loss.backward();
    clip_grad_norm(model_->parameters(), config_.train.grad_clip);
    try {
      optimizer_->step();
    } catch (const TrainingError& e) {
      throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(rec.epoch) + ", batch " +
                          std::to_string(batch_id));
    }
    loss_sum += value * static_cast<double>(count);
    token_sum += count;
  }
  model_->parameters().zero_grads();
  rec.train_loss = loss_sum / static_cast<double>(token_sum);
  rec.steps = batch_id;
  ++epoch_;

  if (!val_.empty()) {
    rec.val_loss = evaluate_loss(val_);
    if (config_.train.val_metrics) {
      std::vector<ImageSet> images;
      for (const Sample* s : val_) images.push_back(s->images);
      std::vector<TokenSequence> cands, refs;
      for (std::size_t start = 0; start < images.size(); start += bs) {
        const std::size_t end = std::min(images.size(), start + bs);
        const auto states = model_->greedy_batch(std::span(images).subspan(start, end - start), config_.decode.max_len);
        for (std::size_t i = 0; i < states.size(); ++i) {
          cands.push_back(model_->vocab().decode(states[i].tokens));
          refs.push_back(tokenize(val_[start + i]->report));
        }
      }
      rec.val_metrics = evaluate_suite(cands, refs);
    }
    if (!best_val_ || *rec.val_loss < *best_val_) {
      best_val_ = rec.val_loss;
      rec.best = true;
    }
  } else {
    rec.best = true;
  }

  if (options_.out_dir) {
    std::filesystem::create_directories(*options_.out_dir);
    save(*options_.out_dir / "last.ckpt");
    if (rec.best) save(*options_.out_dir / "best.ckpt");
    std::ofstream hist(*options_.out_dir / "history.jsonl", std::ios::app);
    if (!hist) throw TrainingError("cannot append to " + (*options_.out_dir / "history.jsonl").string());
    hist << rec.to_json(model_digest(config_.model)) << '\n';
  }
  if (options_.on_epoch) options_.on_epoch(rec);
  return rec;
}

std::vector<EpochRecord> Trainer::run() {
  std::vector<EpochRecord> history;
  while (epoch_ < config_.train.epochs) history.push_back(run_epoch());
  return history;
}

void Trainer::save(const std::filesystem::path& path) const {
  save_snapshot(path, config_, *model_, optimizer_.get(), epoch_, rng_.state(), best_val_);
}

}  // namespace a3net
