#pragma once

// Masked-token output layer, cloze ranking, and P@1. The same MLM machinery
// also warm-fits a freshly initialized backbone.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kadapter/corpus.hpp"
#include "kadapter/errors.hpp"
#include "kadapter/tasks.hpp"
#include "kadapter/trainer.hpp"

namespace kadapter {

inline constexpr const char* kMlmHead = "head.mlm.";
inline constexpr const char* kWarmFitHead = "head.warmfit.";
inline constexpr double kMaskRate = 0.15;
inline constexpr double kObjectMaskRate = 0.5;

// One unmasked sentence; `prefer` marks positions masked at the higher rate.
struct MlmRow {
  std::vector<int> ids;
  std::vector<bool> prefer;
};

inline MlmRow mlm_row(const std::vector<std::string>& words, const Vocab& vocab, std::size_t max_len,
                      std::optional<Span> preferred = std::nullopt) {
  MlmRow r;
  r.ids.push_back(Vocab::kBos);
  r.prefer.push_back(false);
  for (std::size_t i = 0; i < words.size() && r.ids.size() < max_len; ++i) {
    r.ids.push_back(vocab.id(words[i]));
    r.prefer.push_back(preferred && i >= preferred->begin && i < preferred->end);
  }
  return r;
}

inline std::vector<MlmRow> mlm_rows_from_facts(const std::vector<FactExample>& facts, const Vocab& vocab,
                                               std::size_t max_len) {
  std::vector<MlmRow> rows;
  for (const auto& f : facts) rows.push_back(mlm_row(f.tokens, vocab, max_len, f.obj));
  return rows;
}

inline std::vector<MlmRow> mlm_rows_from_deps(const std::vector<DepExample>& deps, const Vocab& vocab,
                                              std::size_t max_len) {
  std::vector<MlmRow> rows;
  for (const auto& d : deps) rows.push_back(mlm_row(d.tokens, vocab, max_len));
  return rows;
}

// Masks each non-[BOS] position (preferred ones at the object rate); at least
// one position is always masked.
inline std::vector<std::size_t> draw_masks(const MlmRow& row, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> masked;
  for (std::size_t t = 1; t < row.ids.size(); ++t) {
    if (u(rng) < (row.prefer[t] ? kObjectMaskRate : kMaskRate)) masked.push_back(t);
  }
  if (masked.empty() && row.ids.size() > 1) {
    std::vector<std::size_t> pool;
    for (std::size_t t = 1; t < row.ids.size(); ++t)
      if (row.prefer[t]) pool.push_back(t);
    if (pool.empty())
      for (std::size_t t = 1; t < row.ids.size(); ++t) pool.push_back(t);
    masked.push_back(pool[draw(rng, pool.size())]);
  }
  return masked;
}

// Masked-token cross-entropy over the selected rows.
inline Tensor mlm_loss(const Model& model, const std::string& head_prefix, const std::vector<MlmRow>& rows,
                       std::span<const std::size_t> idx, std::mt19937_64& rng, const FeatureView& view) {
  std::vector<EncodedRow> encoded;
  std::vector<std::vector<std::size_t>> masks;
  for (std::size_t i : idx) {
    EncodedRow e;
    e.ids = rows.at(i).ids;
    masks.push_back(draw_masks(rows.at(i), rng));
    for (std::size_t t : masks.back()) e.ids[t] = model.backbone_config().mask_id;
    encoded.push_back(std::move(e));
  }
  const EncodedBatch batch = collate(encoded, model.backbone_config().pad_id);
  const Tensor f = model.features(batch, view.adapters, view.backbone_only);
  std::vector<std::size_t> positions;
  std::vector<int> gold;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    for (std::size_t t : masks[k]) {
      positions.push_back(k * batch.len + t);
      gold.push_back(rows.at(idx[k]).ids[t]);
    }
  }
  const Tensor logits = model.bound_head(head_prefix)(ndgrad::gather_rows(f, positions));
  return ndgrad::cross_entropy(logits, gold);
}

// Trains only head.mlm.; every other parameter is frozen.
inline std::vector<double> train_mlm_head(Model& model, const std::vector<MlmRow>& rows, TrainConfig cfg,
                                          const FeatureView& view, std::ostream* log = nullptr) {
  const std::size_t d = model.feature_width(view.adapters, view.backbone_only);
  model.head(kMlmHead, d, static_cast<std::size_t>(model.backbone_config().vocab_size), cfg.seed);
  cfg.freeze_prefixes.clear();
  for (const auto& [name, t] : model.params().all())
    if (!has_prefix(name, kMlmHead)) cfg.freeze_prefixes.push_back(name);
  std::mt19937_64 rng(mix64(cfg.seed) ^ 0x3A5CULL);
  return train_loop(
      model.params(), cfg, rows.size(),
      [&](std::span<const std::size_t> idx) { return mlm_loss(model, kMlmHead, rows, idx, rng, view); }, log);
}

// Short masked-token fit of the backbone itself through a throwaway output
// layer. cfg.freeze_prefixes is honoured (e.g. keep the token table fixed).
inline std::vector<double> warm_fit_backbone(Model& model, const std::vector<MlmRow>& rows,
                                             TrainConfig cfg, std::ostream* log = nullptr) {
  if (!model.adapters().empty()) throw ConfigError("warm-fit expects a backbone without adapters");
  const FeatureView view{{}, true};
  model.head(kWarmFitHead, static_cast<std::size_t>(model.backbone_config().hidden),
             static_cast<std::size_t>(model.backbone_config().vocab_size), cfg.seed);
  std::mt19937_64 rng(mix64(cfg.seed) ^ 0x3A5DULL);
  return train_loop(
      model.params(), cfg, rows.size(),
      [&](std::span<const std::size_t> idx) { return mlm_loss(model, kWarmFitHead, rows, idx, rng, view); },
      log);
}

// ---------------------------------------------------------------------------
// Cloze queries

struct ClozeQuery {
  std::vector<int> ids;  // [BOS] + tokens, exactly one mask id
  int gold = -1;
  std::string relation;
};

inline std::vector<ClozeQuery> make_queries(const std::vector<ClozeRecord>& records, const Vocab& vocab,
                                            std::size_t max_len) {
  std::vector<ClozeQuery> out;
  for (const auto& r : records) {
    EncodedRow row = encode_cloze(r, vocab, max_len);
    if (!vocab.contains(r.answer)) throw QueryError("gold answer '" + r.answer + "' not in vocabulary");
    ClozeQuery q;
    q.ids = std::move(row.ids);
    q.gold = vocab.id(r.answer);
    q.relation = r.relation;
    out.push_back(std::move(q));
  }
  return out;
}

inline std::size_t mask_position(const ClozeQuery& q, int mask_id) {
  std::optional<std::size_t> pos;
  for (std::size_t t = 0; t < q.ids.size(); ++t) {
    if (q.ids[t] != mask_id) continue;
    if (pos) throw QueryError("query contains more than one mask");
    pos = t;
  }
  if (!pos) throw QueryError("query has no mask");
  return *pos;
}

// Token ids sorted by descending logit, ties by ascending id. With a
// candidate set only those ids are ranked.
inline std::vector<int> rank_tokens(std::span<const double> logits,
                                    const std::optional<std::vector<int>>& candidates = std::nullopt) {
  std::vector<int> ids;
  if (candidates) {
    for (int c : *candidates) {
      if (c < 0 || static_cast<std::size_t>(c) >= logits.size()) {
        throw VocabularyError("candidate id " + std::to_string(c) + " outside vocabulary");
      }
      ids.push_back(c);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  } else {
    ids.resize(logits.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  }
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  return ids;
}

// MLM logits at the mask position of each query.
inline std::vector<std::vector<double>> cloze_logits(Model& model, const std::vector<ClozeQuery>& queries,
                                                     const FeatureView& view) {
  NoGrad guard(model.params());
  const LinearHead head = model.bound_head(kMlmHead);
  const int mask_id = model.backbone_config().mask_id;
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < queries.size(); start += kEvalBatch) {
    std::vector<EncodedRow> rows;
    std::vector<std::size_t> positions;
    for (std::size_t i = start; i < std::min(queries.size(), start + kEvalBatch); ++i) {
      positions.push_back(mask_position(queries[i], mask_id));
      rows.push_back({queries[i].ids, {}});
    }
    const EncodedBatch batch = collate(rows, model.backbone_config().pad_id);
    const Tensor f = model.features(batch, view.adapters, view.backbone_only);
    for (std::size_t k = 0; k < positions.size(); ++k) positions[k] += k * batch.len;
    const Tensor logits = head(ndgrad::gather_rows(f, positions));
    const std::size_t v = logits.dim(1);
    for (std::size_t k = 0; k < positions.size(); ++k) {
      out.emplace_back(logits.data().begin() + static_cast<std::ptrdiff_t>(k * v),
                       logits.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * v));
    }
  }
  return out;
}

inline std::vector<int> cloze_predict(Model& model, const ClozeQuery& query, const FeatureView& view,
                                      const std::optional<std::vector<int>>& candidates = std::nullopt) {
  return rank_tokens(cloze_logits(model, {query}, view).front(), candidates);
}

// Per-relation fraction of top-1 hits, then the unweighted mean.
inline double p_at_1(const std::map<std::string, std::vector<bool>>& by_relation) {
  if (by_relation.empty()) throw MetricError("p_at_1: no relations");
  double total = 0;
  for (const auto& [rel, hits] : by_relation) {
    if (hits.empty()) throw MetricError("p_at_1: relation '" + rel + "' has no queries");
    total += static_cast<double>(std::count(hits.begin(), hits.end(), true)) /
             static_cast<double>(hits.size());
  }
  return total / static_cast<double>(by_relation.size());
}

inline double evaluate_p_at_1(Model& model, const std::vector<ClozeQuery>& queries, const FeatureView& view,
                              const std::optional<std::vector<int>>& candidates) {
  const auto logits = cloze_logits(model, queries, view);
  std::map<std::string, std::vector<bool>> hits;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    hits[queries[i].relation].push_back(rank_tokens(logits[i], candidates).front() == queries[i].gold);
  }
  return p_at_1(hits);
}

struct ProbeReport {
  double backbone_p_at_1 = 0;
  double adapter_p_at_1 = 0;
  std::vector<double> backbone_losses;
  std::vector<double> adapter_losses;
};

// Two arms over the same backbone: MLM head on backbone features only, and
// MLM head on backbone + adapter features. Only the heads are trained.
inline ProbeReport probe_experiment(const Checkpoint& backbone, const Checkpoint& adapter,
                                    const std::vector<MlmRow>& rows, const std::vector<ClozeQuery>& queries,
                                    const std::optional<std::vector<int>>& candidates, const TrainConfig& cfg) {
  ProbeReport r;
  {
    Model m = Model::from_backbone(backbone);
    const FeatureView view{{}, true};
    r.backbone_losses = train_mlm_head(m, rows, cfg, view);
    r.backbone_p_at_1 = evaluate_p_at_1(m, queries, view, candidates);
  }
  {
    Model m = assemble(backbone, {adapter});
    const FeatureView view{m.adapter_names(), false};
    r.adapter_losses = train_mlm_head(m, rows, cfg, view);
    r.adapter_p_at_1 = evaluate_p_at_1(m, queries, view, candidates);
  }
  return r;
}

}  // namespace kadapter
