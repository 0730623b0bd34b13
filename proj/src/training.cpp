// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "mvnmt/error.hpp"
#include "mvnmt/fields.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host byte order");

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(base_lr > 0.0)) fail("base_lr must be > 0");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (max_updates < 0) fail("max_updates must be >= 0");
  if (batch_tokens < 1) fail("batch_tokens must be >= 1");
  if (update_freq < 1) fail("update_freq must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (clip_norm < 0.0) fail("clip_norm must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (keep_last_k < 1) fail("keep_last_k must be >= 1");
  if (log_every < 1) fail("log_every must be >= 1");
}

double lr_at(std::uint64_t step, double base_lr, int warmup) {
  if (step == 0) throw ContractError("learning-rate schedule is defined from step 1");
  if (warmup < 1) throw ContractError("warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

template <typename Real>
AdamState<Real> AdamState<Real>::init(const ParameterSet<Real>& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.names.push_back(name);
    s.m.emplace_back(t.numel(), Real(0));
    s.v.emplace_back(t.numel(), Real(0));
  }
  return s;
}

template <typename Real>
void adam_update(ParameterSet<Real>& params, AdamState<Real>& state, double lr, const TrainConfig& cfg) {
  if (state.names.size() != params.size()) throw ContractError("optimizer state does not match the parameters");
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    if (state.names[i] != name) throw ContractError("optimizer state order differs at '" + name + "'");
    if (t.has_grad()) {
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = state.m[i];
      auto& v = state.v[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
        const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
        m[k] = static_cast<Real>(mk);
        v[k] = static_cast<Real>(vk);
        const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps);
        w[k] = static_cast<Real>(static_cast<double>(w[k]) - update);
      }
    }
    ++i;
  }
}

template <typename Real>
double grad_norm(const ParameterSet<Real>& params) {
  double s = 0.0;
  for (const auto& [_, t] : params)
    for (Real g : t.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

template <typename Real>
TwoStreamLogits<Real> forward_streams(const Model<Real>& model, const Batch& batch, const LossConfig& loss_cfg,
                                      const ForwardOptions& opts) {
  auto views = model.encode_views(batch.src, opts);
  if (model.config().multi_view && loss_cfg.multi_view) return model.decode_two_stream(views, batch.tgt_in, opts);
  TwoStreamLogits<Real> out;
  out.primary = model.decode_single(View::primary, views.primary, views.src_pad, batch.tgt_in, opts);
  return out;
}

namespace {

std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << std::setprecision(9) << "nll_pri=" << b.nll_pri << " nll_aux=" << b.nll_aux << " cr=" << b.cr
     << " total=" << b.total;
  return os.str();
}

}  // namespace

template <typename Real>
StepStats train_step(Model<Real>& model, std::span<const Batch> batches, const LossConfig& loss_cfg,
                     const TrainConfig& cfg, AdamState<Real>& state) {
  if (batches.empty()) throw EmptyBatchError("update without batches");
  StepStats stats;
  stats.step = state.step + 1;
  stats.lr = lr_at(stats.step, cfg.base_lr, cfg.warmup_steps);
  auto& params = model.parameters();
  params.zero_grad();
  const double k = static_cast<double>(batches.size());
  for (std::size_t j = 0; j < batches.size(); ++j) {
    ForwardOptions opts;
    opts.training = true;
    opts.seed = derive_seed(cfg.seed, j);
    opts.step = stats.step;
    std::optional<MultiViewLoss<Real>> computed;
    try {
      computed = compute_loss(forward_streams(model, batches[j], loss_cfg, opts), batches[j].tgt_out, loss_cfg);
    } catch (const NonFiniteInput& e) {
      throw TrainingDiverged("step " + std::to_string(stats.step) + ": non-finite activations in sub-batch " +
                             std::to_string(j) + " (" + e.what() + ")");
    }
    auto& loss = *computed;
    const auto b = loss.breakdown();
    if (!std::isfinite(b.total) || !std::isfinite(b.cr)) {
      throw TrainingDiverged("step " + std::to_string(stats.step) + ": non-finite loss (" + describe(b) + ")");
    }
    backward(batches.size() == 1 ? loss.total : scale(loss.total, 1.0 / k));
    stats.loss.nll_pri += b.nll_pri / k;
    stats.loss.nll_aux += b.nll_aux / k;
    stats.loss.nll_joint += b.nll_joint / k;
    stats.loss.cr += b.cr / k;
    stats.loss.total += b.total / k;
    stats.loss.token_count += b.token_count;
    stats.loss.alpha = b.alpha;
  }
  stats.grad_norm = grad_norm(params);
  if (!std::isfinite(stats.grad_norm)) {
    std::string culprit;
    for (const auto& [name, t] : params) {
      for (Real g : t.grad())
        if (!std::isfinite(static_cast<double>(g))) {
          culprit = name;
          break;
        }
      if (!culprit.empty()) break;
    }
    throw TrainingDiverged("step " + std::to_string(stats.step) + ": non-finite gradient (grad_norm=" +
                           std::to_string(stats.grad_norm) + ", first at '" + culprit + "'; " +
                           describe(stats.loss) + ")");
  }
  if (cfg.clip_norm > 0.0 && stats.grad_norm > cfg.clip_norm) {
    const double f = cfg.clip_norm / stats.grad_norm;
    for (auto& [_, t] : params)
      if (t.has_grad())
        for (auto& g : t.mutable_grad()) g = static_cast<Real>(static_cast<double>(g) * f);
  }
  adam_update(params, state, stats.lr, cfg);
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kMagic = "MVNMT-CHECKPOINT";

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

struct PayloadWriter {
  std::string bytes;
  nlohmann::json manifest = nlohmann::json::array();

  void add(const std::string& name, const std::string& group, const Shape& shape, std::span<const float> v) {
    manifest.push_back({{"name", name},
                        {"group", group},
                        {"shape", shape},
                        {"offset", bytes.size()},
                        {"bytes", v.size() * sizeof(float)}});
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
};

}  // namespace

ModelF Checkpoint::model() const {
  ParameterSet<float> copy;
  for (const auto& [name, t] : params) copy.add(name, t.clone(true));
  return ModelF::from_parameters(config, std::move(copy));
}

void save_checkpoint(const std::filesystem::path& path, const ModelF& model, const AdamState<float>* optimizer,
                     std::uint64_t step, const TrainCursor& cursor, const Vocabulary* vocab) {
  PayloadWriter w;
  for (const auto& [name, t] : model.parameters()) w.add(name, "param", t.shape(), t.data());
  if (optimizer) {
    std::size_t i = 0;
    for (const auto& [name, t] : model.parameters()) {
      w.add(name, "adam_m", t.shape(), optimizer->m.at(i));
      w.add(name, "adam_v", t.shape(), optimizer->v.at(i));
      ++i;
    }
  }
  nlohmann::json meta;
  meta["format_version"] = Checkpoint::kFormatVersion;
  meta["model_config"] = fields::to_json(model.config());
  meta["vocab"] = vocab ? nlohmann::json(vocab->tokens()) : nlohmann::json(nullptr);
  meta["step"] = step;
  meta["cursor"] = {{"seed", cursor.seed}, {"epoch", cursor.epoch}, {"batch", cursor.batch}};
  meta["optimizer"] = optimizer ? nlohmann::json{{"step", optimizer->step}} : nlohmann::json(nullptr);
  meta["arrays"] = w.manifest;
  meta["payload_bytes"] = w.bytes.size();
  meta["payload_fnv1a64"] = hex64(fnv1a(w.bytes.data(), w.bytes.size()));
  const std::string text = meta.dump();

  // Write to a sibling temp file first so a crash never leaves a partial
  // checkpoint under the final name.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << kMagic << '\n' << text.size() << '\n' << text;
    out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto bad = [&](const std::string& why) { return IntegrityError(path.string() + ": " + why); };

  const std::string magic_line = std::string(kMagic) + "\n";
  if (file.compare(0, magic_line.size(), magic_line) != 0) throw bad("not a checkpoint (bad magic)");
  std::size_t pos = magic_line.size();
  const auto eol = file.find('\n', pos);
  if (eol == std::string::npos || eol == pos || eol - pos > 20) throw bad("corrupt header");
  std::size_t meta_len = 0;
  for (std::size_t i = pos; i < eol; ++i) {
    if (file[i] < '0' || file[i] > '9') throw bad("corrupt header");
    meta_len = meta_len * 10 + static_cast<std::size_t>(file[i] - '0');
  }
  pos = eol + 1;
  if (file.size() - pos < meta_len) throw bad("truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(file.substr(pos, meta_len));
  } catch (const nlohmann::json::exception&) {
    throw bad("corrupt metadata");
  }
  pos += meta_len;

  Checkpoint ck;
  try {
    ck.version = meta.at("format_version").get<int>();
    if (ck.version != Checkpoint::kFormatVersion) {
      throw bad("unsupported format version " + std::to_string(ck.version) + " (expected " +
                std::to_string(Checkpoint::kFormatVersion) + ")");
    }
    const auto payload_bytes = meta.at("payload_bytes").get<std::size_t>();
    if (file.size() - pos != payload_bytes) {
      throw bad("payload has " + std::to_string(file.size() - pos) + " bytes, expected " +
                std::to_string(payload_bytes));
    }
    if (hex64(fnv1a(file.data() + pos, payload_bytes)) != meta.at("payload_fnv1a64").get<std::string>()) {
      throw bad("payload checksum mismatch");
    }
    try {
      ck.config = fields::from_json<ModelConfig>(meta.at("model_config"));
      ck.config.validate();
    } catch (const ConfigError& e) {
      throw bad(std::string("invalid model config: ") + e.what());
    }
    if (!meta.at("vocab").is_null()) {
      const auto tokens = meta.at("vocab").get<std::vector<std::string>>();
      if (tokens.size() < kNumReserved) throw bad("vocabulary lacks reserved symbols");
      for (int i = 0; i < kNumReserved; ++i)
        if (tokens[static_cast<std::size_t>(i)] != Vocabulary::kReserved[i]) throw bad("vocabulary lacks reserved symbols");
      ck.vocab = Vocabulary::from_tokens(std::vector<std::string>(tokens.begin() + kNumReserved, tokens.end()));
    }
    ck.step = meta.at("step").get<std::uint64_t>();
    const auto& cur = meta.at("cursor");
    ck.cursor = {cur.at("seed").get<std::uint64_t>(), cur.at("epoch").get<std::uint64_t>(),
                 cur.at("batch").get<std::uint64_t>()};

    const auto layout = parameter_layout(ck.config);
    std::map<std::pair<std::string, std::string>, std::vector<float>> arrays;
    for (const auto& a : meta.at("arrays")) {
      const auto name = a.at("name").get<std::string>();
      const auto group = a.at("group").get<std::string>();
      const auto shape = a.at("shape").get<Shape>();
      const auto offset = a.at("offset").get<std::size_t>();
      const auto bytes = a.at("bytes").get<std::size_t>();
      if (bytes != shape_numel(shape) * sizeof(float) || offset > payload_bytes || bytes > payload_bytes - offset) {
        throw bad("array '" + name + "' lies outside the payload");
      }
      std::vector<float> v(shape_numel(shape));
      std::memcpy(v.data(), file.data() + pos + offset, bytes);
      if (!arrays.emplace(std::make_pair(group, name), std::move(v)).second) throw bad("duplicate array '" + name + "'");
    }
    const bool has_opt = !meta.at("optimizer").is_null();
    AdamState<float> opt;
    if (has_opt) opt.step = meta.at("optimizer").at("step").get<std::uint64_t>();
    std::size_t used = 0;
    for (const auto& spec : layout) {
      auto it = arrays.find({"param", spec.name});
      if (it == arrays.end()) throw bad("missing parameter '" + spec.name + "'");
      if (it->second.size() != shape_numel(spec.shape)) throw bad("parameter '" + spec.name + "' does not match the config shape");
      ck.params.add(spec.name, TensorF::from(spec.shape, std::move(it->second), true));
      ++used;
      if (has_opt) {
        auto m = arrays.find({"adam_m", spec.name});
        auto v = arrays.find({"adam_v", spec.name});
        if (m == arrays.end() || v == arrays.end()) throw bad("missing optimizer state for '" + spec.name + "'");
        opt.names.push_back(spec.name);
        opt.m.push_back(std::move(m->second));
        opt.v.push_back(std::move(v->second));
        used += 2;
      }
    }
    if (used != arrays.size()) throw bad("payload holds arrays the config does not describe");
    if (has_opt) ck.optimizer = std::move(opt);
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("malformed metadata: ") + e.what());
  }
  if (expected && !(*expected == ck.config)) {
    std::string diff;
    const auto a = fields::to_items(*expected), b = fields::to_items(ck.config);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].second != b[i].second) diff += " " + a[i].first + "=" + b[i].second + " (expected " + a[i].second + ")";
    throw ConfigError(path.string() + ": checkpoint config mismatch:" + diff);
  }
  return ck;
}

Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw InvalidArgument("no checkpoints to average");
  Checkpoint first = load_checkpoint(paths.front());
  std::vector<std::vector<double>> acc;
  for (const auto& [_, t] : first.params) acc.emplace_back(t.data().begin(), t.data().end());
  for (std::size_t p = 1; p < paths.size(); ++p) {
    Checkpoint ck = load_checkpoint(paths[p], &first.config);
    std::size_t i = 0;
    for (const auto& [_, t] : ck.params) {
      auto d = t.data();
      for (std::size_t k = 0; k < d.size(); ++k) acc[i][k] += static_cast<double>(d[k]);
      ++i;
    }
    first.step = std::max(first.step, ck.step);
  }
  Checkpoint out;
  out.config = first.config;
  out.vocab = first.vocab;
  out.step = first.step;
  out.cursor = first.cursor;
  const double n = static_cast<double>(paths.size());
  std::size_t i = 0;
  for (const auto& [name, t] : first.params) {
    std::vector<float> v(acc[i].size());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<float>(acc[i][k] / n);
    out.params.add(name, TensorF::from(t.shape(), std::move(v), true));
    ++i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(ModelF& model, const ParallelCorpus& corpus, TrainConfig cfg, LossConfig loss_cfg, Output out)
    : model_(&model),
      corpus_(&corpus),
      cfg_(std::move(cfg)),
      loss_cfg_(std::move(loss_cfg)),
      out_(std::move(out)),
      state_(AdamState<float>::init(model.parameters())) {
  cfg_.validate();
  loss_cfg_.validate();
  cursor_.seed = cfg_.seed;
}

void Trainer::write_checkpoint(std::uint64_t step, bool final) {
  if (out_.dir.empty()) return;
  std::filesystem::create_directories(out_.dir);
  if (final) {
    save_checkpoint(out_.dir / "last.ckpt", *model_, &state_, step, cursor_, out_.vocab);
    return;
  }
  const auto path = out_.dir / ("checkpoint_" + std::to_string(step) + ".ckpt");
  save_checkpoint(path, *model_, &state_, step, cursor_, out_.vocab);
  kept_.push_back(path);
  while (kept_.size() > static_cast<std::size_t>(cfg_.keep_last_k)) {
    std::filesystem::remove(kept_.front());
    kept_.erase(kept_.begin());
  }
}

std::string loss_log_row(const StepStats& s) {
  return std::to_string(s.step) + ',' + fields::to_text(s.lr) + ',' + fields::to_text(s.loss.nll_pri) + ',' +
         fields::to_text(s.loss.nll_aux) + ',' + fields::to_text(s.loss.cr) + ',' + fields::to_text(s.loss.total);
}

bool loss_log_due(std::uint64_t step, int log_every) {
  return step == 1 || step % static_cast<std::uint64_t>(log_every) == 0;
}

std::vector<StepStats> Trainer::run(const Callback& on_step) {
  std::ofstream log;
  if (!out_.loss_log.empty()) {
    log.open(out_.loss_log, std::ios::trunc);
    if (!log) throw IoError("cannot write loss log '" + out_.loss_log.string() + "'");
    log << kLossLogHeader << '\n';
  }
  std::vector<StepStats> history;
  auto iter = std::make_unique<BatchIterator>(*corpus_, cfg_.batch_tokens, cfg_.seed, cursor_.epoch);
  skipped_ = iter->skipped();
  if (iter->batch_count() == 0) throw DataError("no pair fits into batch_tokens=" + std::to_string(cfg_.batch_tokens));
  for (std::uint64_t b = 0; b < cursor_.batch; ++b) {
    Batch skip;
    iter->next(skip);
  }
  std::uint64_t last_step = state_.step;
  while (state_.step < static_cast<std::uint64_t>(cfg_.max_updates)) {
    std::vector<Batch> group;
    while (group.size() < static_cast<std::size_t>(cfg_.update_freq)) {
      Batch b;
      if (!iter->next(b)) {
        ++cursor_.epoch;
        cursor_.batch = 0;
        iter = std::make_unique<BatchIterator>(*corpus_, cfg_.batch_tokens, cfg_.seed, cursor_.epoch);
        continue;
      }
      ++cursor_.batch;
      group.push_back(std::move(b));
    }
    auto stats = train_step(*model_, std::span<const Batch>(group), loss_cfg_, cfg_, state_);
    last_step = stats.step;
    if (log.is_open() && loss_log_due(stats.step, cfg_.log_every)) log << loss_log_row(stats) << '\n';
    if (cfg_.checkpoint_every > 0 && stats.step % static_cast<std::uint64_t>(cfg_.checkpoint_every) == 0) {
      write_checkpoint(stats.step, false);
    }
    history.push_back(stats);
    if (on_step && !on_step(stats)) break;
  }
  write_checkpoint(last_step, true);
  return history;
}

#define MVNMT_INSTANTIATE(Real)                                                                          \
  template struct AdamState<Real>;                                                                       \
  template void adam_update(ParameterSet<Real>&, AdamState<Real>&, double, const TrainConfig&);          \
  template double grad_norm(const ParameterSet<Real>&);                                                  \
  template TwoStreamLogits<Real> forward_streams(const Model<Real>&, const Batch&, const LossConfig&,     \
                                                 const ForwardOptions&);                                 \
  template StepStats train_step(Model<Real>&, std::span<const Batch>, const LossConfig&, const TrainConfig&, \
                                AdamState<Real>&);

MVNMT_INSTANTIATE(float)
MVNMT_INSTANTIATE(double)
#undef MVNMT_INSTANTIATE

}  // namespace mvnmt
