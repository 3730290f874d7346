#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kadapter/errors.hpp"

namespace kadapter {

// Half-open token range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

// Task payload carried next to one encoded row. Fields a task does not use
// stay at their defaults.
struct RowAnnotations {
  std::vector<Span> entity_spans;
  std::vector<int> dep_heads;  // per token position; -1 = ignore
  int label = -1;
  std::vector<double> multi_hot;
  int at_index = -1;
  int hash_index = -1;
  int mask_index = -1;
  // Inclusive answer positions and the paragraph region for span QA.
  std::optional<std::pair<std::size_t, std::size_t>> answer;
  Span segment;
};

struct EncodedRow {
  std::vector<int> ids;
  RowAnnotations ann;
};

struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> token_ids;   // batch x len, row-major
  std::vector<double> pad_mask;  // 1 = real token, 0 = padding
  std::vector<RowAnnotations> ann;

  std::size_t real_length(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < len; ++t) n += pad_mask[row * len + t] > 0.5 ? 1 : 0;
    return n;
  }
};

// Right-pads rows to the longest one. Dependency heads are padded with -1.
inline EncodedBatch collate(std::span<const EncodedRow> rows, int pad_id) {
  if (rows.empty()) throw ArgumentError("collate: empty batch");
  EncodedBatch out;
  out.batch = rows.size();
  for (const auto& r : rows) {
    if (r.ids.empty()) throw ArgumentError("collate: empty row");
    out.len = std::max(out.len, r.ids.size());
  }
  out.token_ids.assign(out.batch * out.len, pad_id);
  out.pad_mask.assign(out.batch * out.len, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    for (std::size_t t = 0; t < r.ids.size(); ++t) {
      out.token_ids[i * out.len + t] = r.ids[t];
      out.pad_mask[i * out.len + t] = 1.0;
    }
    RowAnnotations ann = r.ann;
    if (!ann.dep_heads.empty()) ann.dep_heads.resize(out.len, -1);
    out.ann.push_back(std::move(ann));
  }
  return out;
}

}  // namespace kadapter
