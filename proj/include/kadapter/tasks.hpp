#pragma once

// Pre-training and fine-tuning heads over fused features, their losses, and
// the evaluation metrics. Every head is polymorphic in the feature width D.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kadapter/batch.hpp"
#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"
#include "kadapter/params.hpp"

namespace kadapter {

using Metrics = std::map<std::string, double>;

struct LinearHead {
  Tensor weight;
  Tensor bias;

  static Layout layout(const std::string& prefix, std::size_t in, std::size_t out) {
    return {{prefix + "weight", {in, out}, Init::Normal},
            {prefix + "bias", {out}, Init::Zeros}};
  }

  static LinearHead bind(const ParamStore& store, const std::string& prefix) {
    return {store.at(prefix + "weight"), store.at(prefix + "bias")};
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return ndgrad::linear(x, weight, bias); }
};

namespace detail {

inline void require_features(const Tensor& features, const char* what) {
  if (features.rank() != 3) {
    throw DimensionError(std::string(what) + ": features must be [b x l x D], got " +
                         ndgrad::shape_str(features.shape()));
  }
}

inline void require_head_input(const LinearHead& head, std::size_t width, const char* what) {
  if (head.in_dim() != width) {
    throw DimensionError(std::string(what) + ": head expects width " +
                         std::to_string(head.in_dim()) + ", features have " +
                         std::to_string(width));
  }
}

inline std::size_t checked_position(int index, std::size_t len, const char* what) {
  if (index < 0 || static_cast<std::size_t>(index) >= len) {
    throw AnnotationError(std::string(what) + " index " + std::to_string(index) +
                          " outside sequence of length " + std::to_string(len));
  }
  return static_cast<std::size_t>(index);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Relation classification used to pre-train the factual adapter: mean-pool
// each entity span, concatenate the two pooled vectors, then classify.

inline Tensor relation_pretrain_head(const Tensor& features, const EncodedBatch& batch,
                                     const LinearHead& head) {
  detail::require_features(features, "relation_pretrain_head");
  const std::size_t d = features.dim(2);
  detail::require_head_input(head, 2 * d, "relation_pretrain_head");
  std::vector<std::pair<std::size_t, std::size_t>> first, second;
  for (std::size_t i = 0; i < batch.batch; ++i) {
    const auto& spans = batch.ann.at(i).entity_spans;
    if (spans.size() != 2) {
      throw AnnotationError("relation_pretrain_head: example " + std::to_string(i) +
                            " has " + std::to_string(spans.size()) +
                            " entity spans, expected 2");
    }
    first.emplace_back(spans[0].begin, spans[0].end);
    second.emplace_back(spans[1].begin, spans[1].end);
  }
  Tensor pooled = ndgrad::concat_lastdim(
      {ndgrad::span_mean(features, first), ndgrad::span_mean(features, second)});
  return head(pooled);
}

inline std::vector<int> batch_labels(const EncodedBatch& batch) {
  std::vector<int> labels;
  for (const auto& a : batch.ann) labels.push_back(a.label);
  return labels;
}

// ---------------------------------------------------------------------------
// Dependency head prediction used to pre-train the linguistic adapter. Class
// 0 is the root; class j means "head is the token at position j".

inline Tensor dep_head_prediction(const Tensor& features, const LinearHead& head,
                                  std::size_t max_len) {
  detail::require_features(features, "dep_head_prediction");
  detail::require_head_input(head, features.dim(2), "dep_head_prediction");
  if (head.out_dim() != max_len + 1) {
    throw DimensionError("dep_head_prediction: head has " + std::to_string(head.out_dim()) +
                         " classes, expected max_len+1 = " + std::to_string(max_len + 1));
  }
  return head(features);
}

inline Tensor dep_head_loss(const Tensor& logits, const EncodedBatch& batch) {
  const std::size_t b = logits.dim(0), l = logits.dim(1), c = logits.dim(2);
  std::vector<int> labels(b * l, -1);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& heads = batch.ann.at(i).dep_heads;
    const std::size_t real = batch.real_length(i);
    for (std::size_t t = 0; t < l && t < heads.size(); ++t) {
      const int h = heads[t];
      if (h == -1) continue;
      if (h < 0 || static_cast<std::size_t>(h) >= real || static_cast<std::size_t>(h) >= c) {
        throw AnnotationError("dep head " + std::to_string(h) + " at position " +
                              std::to_string(t) + " exceeds sentence length");
      }
      labels[i * l + t] = h;
    }
  }
  return ndgrad::cross_entropy(ndgrad::reshape(logits, {b * l, c}), labels, -1);
}

// ---------------------------------------------------------------------------
// Entity typing: classify from the first '@' marker.

inline Tensor entity_typing_head(const Tensor& features, const EncodedBatch& batch,
                                 const LinearHead& head) {
  detail::require_features(features, "entity_typing_head");
  detail::require_head_input(head, features.dim(2), "entity_typing_head");
  const std::size_t l = features.dim(1);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch.batch; ++i) {
    rows.push_back(i * l + detail::checked_position(batch.ann.at(i).at_index, l, "'@' marker"));
  }
  return head(ndgrad::gather_rows(features, rows));
}

inline Tensor entity_typing_loss(const Tensor& logits, const EncodedBatch& batch) {
  std::vector<double> targets;
  for (const auto& a : batch.ann) {
    if (a.multi_hot.size() != logits.dim(1)) {
      throw AnnotationError("typing labels have " + std::to_string(a.multi_hot.size()) +
                            " classes, head has " + std::to_string(logits.dim(1)));
    }
    targets.insert(targets.end(), a.multi_hot.begin(), a.multi_hot.end());
  }
  return ndgrad::bce_with_logits(logits, targets);
}

// ---------------------------------------------------------------------------
// Relation classification fine-tuning from the '@' and '#' markers.

inline Tensor relation_ft_head(const Tensor& features, const EncodedBatch& batch,
                               const LinearHead& head) {
  detail::require_features(features, "relation_ft_head");
  detail::require_head_input(head, 2 * features.dim(2), "relation_ft_head");
  const std::size_t l = features.dim(1);
  std::vector<std::size_t> at_rows, hash_rows;
  for (std::size_t i = 0; i < batch.batch; ++i) {
    at_rows.push_back(i * l + detail::checked_position(batch.ann.at(i).at_index, l, "'@' marker"));
    hash_rows.push_back(i * l +
                        detail::checked_position(batch.ann.at(i).hash_index, l, "'#' marker"));
  }
  return head(ndgrad::concat_lastdim(
      {ndgrad::gather_rows(features, at_rows), ndgrad::gather_rows(features, hash_rows)}));
}

// ---------------------------------------------------------------------------
// Span QA: independent start and end scores per token.

struct SpanLogits {
  Tensor start;  // [b x l]
  Tensor end;    // [b x l]
};

inline SpanLogits span_qa_head(const Tensor& features, const LinearHead& start_head,
                               const LinearHead& end_head) {
  detail::require_features(features, "span_qa_head");
  detail::require_head_input(start_head, features.dim(2), "span_qa_head");
  detail::require_head_input(end_head, features.dim(2), "span_qa_head");
  const std::size_t b = features.dim(0), l = features.dim(1);
  return {ndgrad::reshape(start_head(features), {b, l}),
          ndgrad::reshape(end_head(features), {b, l})};
}

inline Tensor span_qa_loss(const SpanLogits& logits, const EncodedBatch& batch) {
  const std::size_t b = batch.batch, l = batch.len;
  std::vector<int> starts, ends;
  std::vector<double> outside(b * l, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& a = batch.ann.at(i);
    if (!a.answer) throw AnnotationError("span QA example without an answer span");
    const auto [s, e] = *a.answer;
    if (s > e || s < a.segment.begin || e >= a.segment.end) {
      throw AnnotationError("gold answer span lies outside the paragraph segment");
    }
    starts.push_back(static_cast<int>(s));
    ends.push_back(static_cast<int>(e));
    for (std::size_t t = 0; t < l; ++t) {
      if (batch.pad_mask[i * l + t] < 0.5) outside[i * l + t] = -1e9;
    }
  }
  Tensor ls = ndgrad::cross_entropy(ndgrad::add_constant(logits.start, outside), starts);
  Tensor le = ndgrad::cross_entropy(ndgrad::add_constant(logits.end, outside), ends);
  return ndgrad::scale(ndgrad::add(ls, le), 0.5);
}

inline constexpr std::size_t kMaxAnswerTokens = 16;

// Best start in the segment, then best end >= start within the length cap.
inline std::pair<std::size_t, std::size_t> decode_span(std::span<const double> start,
                                                       std::span<const double> end,
                                                       Span segment,
                                                       std::size_t max_tokens = kMaxAnswerTokens) {
  if (segment.begin >= segment.end || segment.end > start.size()) {
    throw AnnotationError("decode_span: empty or out-of-range paragraph segment");
  }
  std::size_t s = segment.begin;
  for (std::size_t t = segment.begin; t < segment.end; ++t) {
    if (start[t] > start[s]) s = t;
  }
  std::size_t e = s;
  const std::size_t last = std::min(segment.end, s + max_tokens);
  for (std::size_t t = s; t < last; ++t) {
    if (end[t] > end[e]) e = t;
  }
  return {s, e};
}

// ---------------------------------------------------------------------------
// Multiple choice: one score per choice from its first-token feature.

inline Tensor multichoice_head(const std::vector<Tensor>& features_per_choice,
                               const LinearHead& head) {
  if (features_per_choice.size() < 2) {
    throw ArgumentError("multichoice_head: need at least 2 choices, got " +
                        std::to_string(features_per_choice.size()));
  }
  std::vector<Tensor> scores;
  for (const auto& f : features_per_choice) {
    detail::require_features(f, "multichoice_head");
    detail::require_head_input(head, f.dim(2), "multichoice_head");
    if (head.out_dim() != 1) throw DimensionError("multichoice_head: head must emit one score");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < f.dim(0); ++i) rows.push_back(i * f.dim(1));
    scores.push_back(head(ndgrad::gather_rows(f, rows)));
  }
  return ndgrad::concat_lastdim(scores);
}

// ---------------------------------------------------------------------------
// Decoding and metrics

inline std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t c = logits.shape().back();
  std::vector<int> out;
  for (std::size_t r = 0; r < logits.size() / c; ++r) {
    out.push_back(static_cast<int>(argmax(logits.data().subspan(r * c, c))));
  }
  return out;
}

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double harmonic_f1(double p, double r) {
  return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

// Micro-averaged over all (example, class) pairs of 0/1 matrices.
inline PRF metric_micro_f1(const std::vector<std::vector<int>>& predictions,
                           const std::vector<std::vector<int>>& gold) {
  if (predictions.size() != gold.size()) {
    throw DimensionError("metric_micro_f1: prediction and gold counts differ");
  }
  double tp = 0, n_pred = 0, n_gold = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predictions[i].size() != gold[i].size()) {
      throw DimensionError("metric_micro_f1: row " + std::to_string(i) + " shapes differ");
    }
    for (std::size_t j = 0; j < gold[i].size(); ++j) {
      n_pred += predictions[i][j] != 0;
      n_gold += gold[i][j] != 0;
      tp += (predictions[i][j] != 0 && gold[i][j] != 0);
    }
  }
  PRF m;
  m.precision = n_pred > 0 ? tp / n_pred : 0.0;
  m.recall = n_gold > 0 ? tp / n_gold : 0.0;
  m.f1 = harmonic_f1(m.precision, m.recall);
  return m;
}

// Typing report: strict accuracy (exact set match), loose macro-F1 (per-example
// precision/recall averaged), and micro P/R/F1.
inline Metrics typing_metrics(const std::vector<std::vector<int>>& predictions,
                              const std::vector<std::vector<int>>& gold) {
  const PRF micro = metric_micro_f1(predictions, gold);
  double exact = 0, p_sum = 0, r_sum = 0, p_count = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    exact += predictions[i] == gold[i];
    double tp = 0, np = 0, ng = 0;
    for (std::size_t j = 0; j < gold[i].size(); ++j) {
      np += predictions[i][j] != 0;
      ng += gold[i][j] != 0;
      tp += predictions[i][j] != 0 && gold[i][j] != 0;
    }
    if (np > 0) {
      p_sum += tp / np;
      ++p_count;
    }
    if (ng > 0) r_sum += tp / ng;
  }
  const double n = static_cast<double>(std::max<std::size_t>(gold.size(), 1));
  const double macro_p = p_count > 0 ? p_sum / p_count : 0.0;
  const double macro_r = r_sum / n;
  return {{"accuracy", exact / n},
          {"macro_f1", harmonic_f1(macro_p, macro_r)},
          {"micro_precision", micro.precision},
          {"micro_recall", micro.recall},
          {"micro_f1", micro.f1}};
}

struct EMF1 {
  double em = 0.0;
  double f1 = 0.0;
};

// Exact sequence match and bag-of-tokens overlap F1.
inline EMF1 metric_em_f1(const std::vector<int>& pred, const std::vector<int>& gold) {
  EMF1 out;
  out.em = pred == gold ? 1.0 : 0.0;
  if (pred.empty() || gold.empty()) {
    out.f1 = out.em;
    return out;
  }
  std::map<int, int> counts;
  for (int t : gold) ++counts[t];
  double common = 0;
  for (int t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return out;
  const double p = common / static_cast<double>(pred.size());
  const double r = common / static_cast<double>(gold.size());
  out.f1 = harmonic_f1(p, r);
  return out;
}

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& gold) {
  if (predictions.size() != gold.size()) throw DimensionError("accuracy: size mismatch");
  if (gold.empty()) throw MetricError("accuracy: no examples");
  double hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i] == gold[i];
  return hits / static_cast<double>(gold.size());
}

// Macro-F1 over classes for single-label predictions (classes absent from
// both predictions and gold are skipped).
inline double macro_f1(const std::vector<int>& predictions, const std::vector<int>& gold,
                       int n_classes) {
  double total = 0;
  int counted = 0;
  for (int c = 0; c < n_classes; ++c) {
    double tp = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      np += predictions[i] == c;
      ng += gold[i] == c;
      tp += predictions[i] == c && gold[i] == c;
    }
    if (np == 0 && ng == 0) continue;
    total += harmonic_f1(np > 0 ? tp / np : 0.0, ng > 0 ? tp / ng : 0.0);
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

}  // namespace kadapter
