// SPDX-License-Identifier: Apache-2.0
//
// Vocabularies, synthetic transduction tasks, plain-text parallel corpora
// and token-budget batching.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvnmt/tokens.hpp"

namespace mvnmt {

/// Token <-> id bijection with the reserved ids of tokens.hpp in front.
class Vocabulary {
 public:
  static constexpr const char* kReserved[kNumReserved] = {"<pad>", "<s>", "</s>", "<unk>"};

  Vocabulary();  // reserved symbols only
  /// Reserved symbols followed by `tokens` in the given order.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);
  /// Ordered by descending frequency, ties broken lexicographically.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences);
  /// Vocabulary of a synthetic task: token id i is spelled as the decimal i.
  static Vocabulary synthetic(int size);

  int id(const std::string& token) const;  // kUnkId when absent
  const std::string& token(int id) const;  // IndexError when out of range
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& words) const;
  /// Space-joined tokens, stopping at the first eos and skipping specials.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct ParallelCorpus {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tgt;
  std::string provenance;

  std::size_t size() const { return src.size(); }
  /// Throws DataError on unequal sides or an empty sentence.
  void validate() const;
};

enum class ToyTask { copy, reverse, sort };
ToyTask parse_toy_task(const std::string& s);
const char* to_string(ToyTask t);

/// Sequences of uniform non-reserved tokens with lengths in
/// [min_len, max_len]; the target is the task transform of the source.
ParallelCorpus gen_toy_corpus(ToyTask task, int vocab_size, int min_len, int max_len, std::size_t count,
                              std::uint64_t seed);

/// Whitespace tokenised line; throws DataError on invalid UTF-8.
std::vector<std::string> tokenize_line(const std::string& line, std::size_t line_no = 0);

/// Reads a UTF-8 text file into tokenised lines (DataError / IoError).
std::vector<std::vector<std::string>> read_tokenized(const std::filesystem::path& path);

struct LoadedCorpus {
  ParallelCorpus corpus;
  Vocabulary vocab;
};

/// Loads aligned source/target files. Without `vocab` one joint vocabulary
/// is built from both sides; otherwise unknown tokens map to <unk>.
LoadedCorpus load_parallel_corpus(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path,
                                  const std::optional<Vocabulary>& vocab = std::nullopt);

/// Writes `corpus` as two aligned text files.
void write_parallel_corpus(const ParallelCorpus& corpus, const Vocabulary& vocab,
                           const std::filesystem::path& src_path, const std::filesystem::path& tgt_path);

struct Batch {
  TokenGrid src;
  TokenGrid tgt_in;   // <s> y_1 .. y_n
  TokenGrid tgt_out;  // y_1 .. y_n </s>
  std::vector<std::size_t> indices;  // corpus positions of the rows

  std::size_t target_tokens() const;
};

/// Padded batch of the given corpus pairs.
Batch make_batch(const ParallelCorpus& corpus, const std::vector<std::size_t>& indices);
TokenGrid make_source_grid(const std::vector<std::vector<int>>& sources);

/// One epoch of batches under a token budget: pairs are shuffled, sorted by
/// length, cut into batches whose padded size (rows x longest side) stays
/// within the budget, and the batch order is shuffled again. The result is
/// a pure function of (corpus, budget, seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const ParallelCorpus& corpus, std::size_t batch_tokens, std::uint64_t seed, std::uint64_t epoch);

  bool next(Batch& out);
  std::size_t batch_count() const { return plan_.size(); }
  /// Pairs longer than the budget allows; they are left out of the epoch.
  std::size_t skipped() const { return skipped_; }

 private:
  const ParallelCorpus* corpus_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace mvnmt
