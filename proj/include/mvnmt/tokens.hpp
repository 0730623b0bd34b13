// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace mvnmt {

/// Reserved vocabulary ids, fixed for checkpoint portability.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

/// Padded [rows x cols] matrix of token ids; pad[i] != 0 marks padding.
struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> pad;

  int at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  bool is_pad(std::size_t r, std::size_t c) const { return pad[r * cols + c] != 0; }

  /// Right-pads each sequence to the longest one.
  static TokenGrid from_rows(const std::vector<std::vector<int>>& seqs) {
    TokenGrid g;
    g.rows = seqs.size();
    for (const auto& s : seqs) g.cols = std::max(g.cols, s.size());
    g.ids.assign(g.rows * g.cols, kPadId);
    g.pad.assign(g.rows * g.cols, 1);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < seqs[r].size(); ++c) {
        g.ids[r * g.cols + c] = seqs[r][c];
        g.pad[r * g.cols + c] = 0;
      }
    return g;
  }
};

}  // namespace mvnmt
