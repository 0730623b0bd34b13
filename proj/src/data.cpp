// SPDX-License-Identifier: Apache-2.0
#include "mvnmt/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "mvnmt/error.hpp"
#include "mvnmt/rng.hpp"

namespace mvnmt {

Vocabulary::Vocabulary() {
  for (const char* r : kReserved) {
    index_.emplace(r, static_cast<int>(tokens_.size()));
    tokens_.emplace_back(r);
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (v.index_.count(t)) throw DataError("duplicate vocabulary entry '" + t + "'");
    v.index_.emplace(t, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(t);
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences) {
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences)
    for (const auto& w : s) ++freq[w];
  for (const char* r : kReserved) freq.erase(r);
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(items.size());
  for (auto& [w, _] : items) tokens.push_back(w);
  return from_tokens(tokens);
}

Vocabulary Vocabulary::synthetic(int size) {
  if (size <= kNumReserved) throw InvalidArgument("synthetic vocabulary must exceed the reserved ids");
  std::vector<std::string> tokens;
  for (int i = kNumReserved; i < size; ++i) tokens.push_back(std::to_string(i));
  return from_tokens(tokens);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kEosId) break;
    if (i == kPadId || i == kBosId) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void ParallelCorpus::validate() const {
  if (src.size() != tgt.size()) {
    throw DataError("corpus sides differ: " + std::to_string(src.size()) + " vs " + std::to_string(tgt.size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) throw DataError("empty sentence in pair " + std::to_string(i + 1));
  }
}

ToyTask parse_toy_task(const std::string& s) {
  if (s == "copy") return ToyTask::copy;
  if (s == "reverse") return ToyTask::reverse;
  if (s == "sort") return ToyTask::sort;
  throw ConfigError("unknown toy task '" + s + "' (expected copy|reverse|sort)");
}

const char* to_string(ToyTask t) {
  switch (t) {
    case ToyTask::copy: return "copy";
    case ToyTask::reverse: return "reverse";
    case ToyTask::sort: return "sort";
  }
  return "copy";
}

ParallelCorpus gen_toy_corpus(ToyTask task, int vocab_size, int min_len, int max_len, std::size_t count,
                              std::uint64_t seed) {
  if (vocab_size <= kNumReserved) throw InvalidArgument("toy vocabulary must exceed the reserved ids");
  if (min_len < 1 || max_len < min_len) throw InvalidArgument("toy length range must satisfy 1 <= min <= max");
  ParallelCorpus c;
  c.provenance = std::string("toy:") + to_string(task) + ":v" + std::to_string(vocab_size) + ":len" +
                 std::to_string(min_len) + "-" + std::to_string(max_len) + ":n" + std::to_string(count) +
                 ":seed" + std::to_string(seed);
  Rng rng(derive_seed(seed, hash_str("toy-corpus")));
  const auto span_len = static_cast<std::uint64_t>(max_len - min_len + 1);
  const auto span_tok = static_cast<std::uint64_t>(vocab_size - kNumReserved);
  c.src.reserve(count);
  c.tgt.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int len = min_len + static_cast<int>(rng() % span_len);
    std::vector<int> s(static_cast<std::size_t>(len));
    for (auto& t : s) t = kNumReserved + static_cast<int>(rng() % span_tok);
    std::vector<int> t = s;
    if (task == ToyTask::reverse) std::reverse(t.begin(), t.end());
    if (task == ToyTask::sort) std::sort(t.begin(), t.end());
    c.src.push_back(std::move(s));
    c.tgt.push_back(std::move(t));
  }
  return c;
}

namespace {

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

}  // namespace

std::vector<std::string> tokenize_line(const std::string& line, std::size_t line_no) {
  if (!valid_utf8(line)) throw DataError("line " + std::to_string(line_no) + ": invalid UTF-8");
  std::vector<std::string> words;
  std::istringstream is(line);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

std::vector<std::vector<std::string>> read_tokenized(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      lines.push_back(tokenize_line(line, n));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return lines;
}

LoadedCorpus load_parallel_corpus(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path,
                                  const std::optional<Vocabulary>& vocab) {
  const auto src = read_tokenized(src_path);
  const auto tgt = read_tokenized(tgt_path);
  if (src.size() != tgt.size()) {
    throw DataError("line-count mismatch: " + src_path.string() + " has " + std::to_string(src.size()) + ", " +
                    tgt_path.string() + " has " + std::to_string(tgt.size()));
  }
  LoadedCorpus out;
  if (vocab) {
    out.vocab = *vocab;
  } else {
    auto both = src;
    both.insert(both.end(), tgt.begin(), tgt.end());
    out.vocab = Vocabulary::build(both);
  }
  out.corpus.provenance = src_path.string() + "|" + tgt_path.string();
  for (std::size_t i = 0; i < src.size(); ++i) {
    out.corpus.src.push_back(out.vocab.encode(src[i]));
    out.corpus.tgt.push_back(out.vocab.encode(tgt[i]));
  }
  out.corpus.validate();
  return out;
}

void write_parallel_corpus(const ParallelCorpus& corpus, const Vocabulary& vocab,
                           const std::filesystem::path& src_path, const std::filesystem::path& tgt_path) {
  std::ofstream s(src_path), t(tgt_path);
  if (!s || !t) throw IoError("cannot write corpus files");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    s << vocab.decode(corpus.src[i]) << '\n';
    t << vocab.decode(corpus.tgt[i]) << '\n';
  }
}

std::size_t Batch::target_tokens() const {
  return static_cast<std::size_t>(std::count(tgt_out.pad.begin(), tgt_out.pad.end(), 0));
}

TokenGrid make_source_grid(const std::vector<std::vector<int>>& sources) { return TokenGrid::from_rows(sources); }

Batch make_batch(const ParallelCorpus& corpus, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw EmptyBatchError("batch without sentences");
  Batch b;
  b.indices = indices;
  std::vector<std::vector<int>> src, tin, tout;
  for (std::size_t i : indices) {
    if (i >= corpus.size()) throw IndexError("pair index out of range");
    src.push_back(corpus.src[i]);
    std::vector<int> in{kBosId};
    in.insert(in.end(), corpus.tgt[i].begin(), corpus.tgt[i].end());
    std::vector<int> out(corpus.tgt[i]);
    out.push_back(kEosId);
    tin.push_back(std::move(in));
    tout.push_back(std::move(out));
  }
  b.src = TokenGrid::from_rows(src);
  b.tgt_in = TokenGrid::from_rows(tin);
  b.tgt_out = TokenGrid::from_rows(tout);
  return b;
}

namespace {

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

BatchIterator::BatchIterator(const ParallelCorpus& corpus, std::size_t batch_tokens, std::uint64_t seed,
                             std::uint64_t epoch)
    : corpus_(&corpus) {
  corpus.validate();
  Rng rng(derive_seed(seed, epoch, hash_str("batches")));
  auto width = [&](std::size_t i) { return std::max(corpus.src[i].size(), corpus.tgt[i].size() + 1); };
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (width(i) > batch_tokens) {
      ++skipped_;
      continue;
    }
    order.push_back(i);
  }
  shuffle_in_place(order, rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return width(a) < width(b); });
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (std::size_t i : order) {
    const std::size_t w = std::max(longest, width(i));
    if (!current.empty() && w * (current.size() + 1) > batch_tokens) {
      plan_.push_back(std::move(current));
      current.clear();
      longest = 0;
    }
    current.push_back(i);
    longest = std::max(longest, width(i));
  }
  if (!current.empty()) plan_.push_back(std::move(current));
  shuffle_in_place(plan_, rng);
}

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= plan_.size()) return false;
  out = make_batch(*corpus_, plan_[cursor_++]);
  return true;
}

}  // namespace mvnmt
