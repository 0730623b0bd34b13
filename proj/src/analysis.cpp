// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mvnmt/error.hpp"
#include "mvnmt/fields.hpp"

namespace mvnmt {

Metric parse_metric(const std::string& s) {
  if (s == "token_accuracy" || s == "accuracy") return Metric::token_accuracy;
  if (s == "bleu") return Metric::bleu;
  throw ConfigError("unknown metric '" + s + "' (expected token_accuracy|bleu)");
}

const char* to_string(Metric m) { return m == Metric::bleu ? "bleu" : "token_accuracy"; }

std::vector<std::vector<int>> sources_of(const ParallelCorpus& c) { return c.src; }

double evaluate(const ModelF& model, View view, const ParallelCorpus& eval, const DecodeConfig& cfg, Metric metric,
                const NoiseSpec* noise) {
  if (eval.size() == 0) throw InvalidArgument("evaluation corpus is empty");
  DecodeConfig c = cfg;
  std::vector<std::vector<int>> hyps;
  if (noise != nullptr && model.config().multi_view) {
    // Noise goes into the last normalisation of the encoder that actually
    // feeds the decoder, i.e. of the model stripped to this view.
    const auto stripped = model.strip_to_view(view);
    c.view = View::primary;
    hyps = translate(stripped, eval.src, c, noise);
  } else {
    c.view = view;
    hyps = translate(model, eval.src, c, noise);
  }
  return metric == Metric::bleu ? corpus_bleu(hyps, eval.tgt).bleu : token_accuracy(hyps, eval.tgt);
}

// ---------------------------------------------------------------------------
// Layer similarity

namespace {

void standardise(std::vector<double>& v, double eps) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double inv = 1.0 / std::sqrt(var / n + eps);
  for (double& x : v) x = (x - mean) * inv;
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different sizes");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

namespace {

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

std::vector<double> layer_similarity_profile(const ModelF& model, const std::vector<std::vector<int>>& sources,
                                             const SimilarityOptions& opts) {
  if (sources.empty()) throw InvalidArgument("layer similarity needs at least one sentence");
  const std::size_t m = static_cast<std::size_t>(model.config().encoder_layers);
  const std::size_t d = static_cast<std::size_t>(model.config().d_model);
  const double eps = model.config().ln_epsilon;
  std::vector<double> sums(m + 1, 0.0);
  std::size_t count = 0;
  NoGradGuard guard;
  ForwardOptions fwd;
  fwd.retain_layers = true;
  constexpr std::size_t kChunk = 64;
  for (std::size_t at = 0; at < sources.size(); at += kChunk) {
    const std::vector<std::vector<int>> part(sources.begin() + static_cast<std::ptrdiff_t>(at),
                                             sources.begin() + static_cast<std::ptrdiff_t>(std::min(sources.size(), at + kChunk)));
    const auto views = model.encode_views(TokenGrid::from_rows(part), fwd);
    const std::size_t s_len = views.src_len;
    auto vec = [&](std::size_t layer, std::size_t b, std::size_t s) {
      const float* p = views.per_layer[layer].data().data() + (b * s_len + s) * d;
      std::vector<double> v(p, p + d);
      if (opts.normalize) standardise(v, eps);
      return v;
    };
    for (std::size_t b = 0; b < views.batch; ++b) {
      if (opts.sentence_pool) {
        std::vector<std::vector<double>> pooled(m + 1, std::vector<double>(d, 0.0));
        std::size_t n = 0;
        for (std::size_t s = 0; s < s_len; ++s) {
          if (views.src_pad[b * s_len + s]) continue;
          ++n;
          for (std::size_t l = 0; l <= m; ++l) {
            const auto v = vec(l, b, s);
            for (std::size_t k = 0; k < d; ++k) pooled[l][k] += v[k];
          }
        }
        if (n == 0) continue;
        for (std::size_t l = 0; l < m; ++l) sums[l] += cosine_similarity(pooled[l], pooled[m]);
        ++count;
      } else {
        for (std::size_t s = 0; s < s_len; ++s) {
          if (views.src_pad[b * s_len + s]) continue;
          const auto top = vec(m, b, s);
          for (std::size_t l = 0; l < m; ++l) sums[l] += cosine_similarity(vec(l, b, s), top);
          ++count;
        }
      }
    }
  }
  if (count == 0) throw InvalidArgument("layer similarity sample has no tokens");
  std::vector<double> profile(m + 1);
  for (std::size_t l = 0; l < m; ++l) profile[l] = sums[l] / static_cast<double>(count);
  profile[m] = 1.0;  // self-similarity, exact by definition
  return profile;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("spearman needs two equal series of length >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Sweep results

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

template <typename Config>
void append_items(std::string& text, const std::string& section, const Config& cfg) {
  for (const auto& [k, v] : fields::to_items(cfg)) text += section + "." + k + "=" + v + "\n";
}

std::uint64_t corpus_hash(const ParallelCorpus& c, std::uint64_t h) {
  for (const auto* side : {&c.src, &c.tgt})
    for (const auto& s : *side) {
      for (int t : s) h = fnv1a(std::to_string(t) + " ", h);
      h = fnv1a("\n", h);
    }
  return h;
}

}  // namespace

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os << kHeader << '\n';
  for (const auto& r : rows) {
    os << csv_field(r.axis) << ',' << csv_field(r.value) << ',' << csv_field(r.model) << ',' << csv_field(r.view)
       << ',' << fields::to_text(r.metric) << ',' << r.seed << ',' << r.config_digest << '\n';
  }
  return os.str();
}

void SweepResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << to_csv();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string ExperimentSetup::digest() const {
  std::string text;
  append_items(text, "model", model);
  append_items(text, "train", train);
  append_items(text, "loss", loss);
  append_items(text, "decode", decode);
  text += std::string("metric=") + to_string(metric) + "\n";
  std::uint64_t h = fnv1a(text);
  if (train_corpus) h = corpus_hash(*train_corpus, fnv1a("train-corpus", h));
  if (eval_corpus) h = corpus_hash(*eval_corpus, fnv1a("eval-corpus", h));
  return hex(h);
}

TrainedModel train_model(const ExperimentSetup& setup, const TrainerOutput& out, const Trainer::Callback& on_step) {
  if (setup.train_corpus == nullptr) throw InvalidArgument("experiment has no training corpus");
  setup.model.validate();
  TrainedModel t{ModelF::build(setup.model, setup.train.seed), {}};
  Trainer trainer(t.model, *setup.train_corpus, setup.train, setup.loss, out);
  t.history = trainer.run(on_step);
  return t;
}

std::vector<SweepRow> evaluate_views(const ModelF& model, const ExperimentSetup& setup, const std::string& axis,
                                     const std::string& value) {
  if (setup.eval_corpus == nullptr) throw InvalidArgument("experiment has no evaluation corpus");
  std::vector<View> views{View::primary};
  if (model.config().multi_view) views.push_back(View::auxiliary);
  const std::string digest = setup.digest();
  std::vector<SweepRow> rows;
  for (View v : views) {
    rows.push_back({axis, value, setup.label, to_string(v),
                    evaluate(model, v, *setup.eval_corpus, setup.decode, setup.metric), setup.train.seed, digest});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Sweeps

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "alpha") return SweepAxis::alpha;
  if (s == "aux_position") return SweepAxis::aux_position;
  if (s == "dark_mode") return SweepAxis::dark_mode;
  if (s == "detach") return SweepAxis::detach;
  if (s == "share_can") return SweepAxis::share_can;
  throw ConfigError("unknown sweep axis '" + s + "' (expected alpha|aux_position|dark_mode|detach|share_can)");
}

const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::alpha: return "alpha";
    case SweepAxis::aux_position: return "aux_position";
    case SweepAxis::dark_mode: return "dark_mode";
    case SweepAxis::detach: return "detach";
    case SweepAxis::share_can: return "share_can";
  }
  return "?";
}

ExperimentSetup apply_axis(const ExperimentSetup& base, SweepAxis axis, const std::string& value) {
  ExperimentSetup s = base;
  try {
    switch (axis) {
      case SweepAxis::alpha:
        fields::from_text(value, s.loss.alpha);
        break;
      case SweepAxis::aux_position:
        fields::from_text(value, s.model.aux_layer);
        break;
      case SweepAxis::dark_mode:
        s.loss.dark = DarkMode::parse(value);
        break;
      case SweepAxis::detach:
        if (value == "oneway") {
          s.loss.detach_teacher = true;
        } else if (value == "mutual") {
          s.loss.detach_teacher = false;
        } else {
          fields::from_text(value, s.loss.detach_teacher);
        }
        break;
      case SweepAxis::share_can:
        fields::from_text(value, s.model.share_can);
        break;
    }
    s.model.validate();
    s.loss.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid ") + to_string(axis) + " value '" + value + "': " + e.what());
  }
  return s;
}

SweepResult run_sweep(SweepAxis axis, const std::vector<std::string>& values, const ExperimentSetup& base,
                      const SweepProgress& progress) {
  if (values.empty()) throw InvalidArgument("sweep without values");
  std::vector<ExperimentSetup> setups;
  for (const auto& v : values) setups.push_back(apply_axis(base, axis, v));  // validate all before training
  SweepResult result;
  result.metric_name = to_string(base.metric);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto trained = train_model(setups[i]);
    for (auto& row : evaluate_views(trained.model, setups[i], to_string(axis), values[i])) {
      result.rows.push_back(std::move(row));
    }
    if (progress) progress(values[i], trained);
    result.histories.push_back(std::move(trained.history));
  }
  return result;
}

SweepResult run_noise_sweep(const std::vector<NoiseSweepModel>& models, const std::vector<double>& eps_grid,
                            const ParallelCorpus& eval, const DecodeConfig& decode, Metric metric,
                            std::uint64_t noise_seed) {
  if (models.empty()) throw InvalidArgument("noise sweep without models");
  if (eps_grid.empty()) throw InvalidArgument("noise sweep without eps values");
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] >= 0.0) || !std::isfinite(eps_grid[i])) throw InvalidArgument("eps values must be >= 0");
    if (i > 0 && !(eps_grid[i] > eps_grid[i - 1])) throw InvalidArgument("eps values must be ascending");
  }
  struct Target {
    std::string label;
    View view;
    ModelF model;
    std::string digest;
  };
  std::vector<Target> targets;
  for (const auto& m : models) {
    if (m.model == nullptr) throw InvalidArgument("noise sweep model '" + m.label + "' is missing");
    std::vector<View> views{View::primary};
    if (m.model->config().multi_view) views.push_back(View::auxiliary);
    for (View v : views) {
      auto stripped = m.model->config().multi_view ? m.model->strip_to_view(v) : m.model->clone();
      std::string text;
      append_items(text, "model", stripped.config());
      append_items(text, "decode", decode);
      text += std::string("metric=") + to_string(metric) + "\n";
      std::uint64_t h = fnv1a(text);
      for (const auto& [name, t] : stripped.parameters()) {
        h = fnv1a(name, h);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data().data()), t.data().size_bytes()), h);
      }
      targets.push_back({m.label, v, std::move(stripped), hex(corpus_hash(eval, h))});
    }
  }
  SweepResult result;
  result.metric_name = to_string(metric);
  for (double eps : eps_grid) {
    const NoiseSpec spec{eps, noise_seed, 0};
    for (const auto& t : targets) {
      result.rows.push_back({"eps", fields::to_text(eps), t.label, to_string(t.view),
                             evaluate(t.model, View::primary, eval, decode, metric, eps > 0.0 ? &spec : nullptr),
                             noise_seed, t.digest});
    }
  }
  return result;
}

SeqKdResult run_seq_kd(const ModelF& teacher, View teacher_view, const DecodeConfig& teacher_decode,
                       const ExperimentSetup& student) {
  if (student.train_corpus == nullptr) throw InvalidArgument("seq-kd needs a training corpus");
  const auto& tc = teacher.config();
  if (tc.src_vocab != student.model.src_vocab || tc.tgt_vocab != student.model.tgt_vocab) {
    throw ConfigError("teacher/student vocabulary mismatch (teacher " + std::to_string(tc.src_vocab) + "/" +
                      std::to_string(tc.tgt_vocab) + ", student " + std::to_string(student.model.src_vocab) + "/" +
                      std::to_string(student.model.tgt_vocab) + ")");
  }
  DecodeConfig dc = teacher_decode;
  dc.view = teacher_view;
  ParallelCorpus distilled;
  distilled.src = student.train_corpus->src;
  distilled.tgt = translate(teacher, distilled.src, dc);
  // A corpus holds no empty sentences; an empty teacher output keeps the
  // original reference so the line count is preserved.
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < distilled.size(); ++i) {
    if (distilled.tgt[i].empty()) {
      distilled.tgt[i] = student.train_corpus->tgt[i];
      ++fallbacks;
    }
  }
  distilled.provenance = "seq-kd(" + student.train_corpus->provenance + ")";
  ExperimentSetup s = student;
  s.train_corpus = &distilled;
  auto trained = train_model(s);
  auto row = evaluate_views(trained.model, s, "seq_kd", "beam=" + std::to_string(dc.beam_size)).front();
  SeqKdResult r{std::move(distilled), std::move(trained), std::move(row), fallbacks};
  return r;
}

}  // namespace mvnmt
