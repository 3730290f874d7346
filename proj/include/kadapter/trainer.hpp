#pragma once

// Optimization loop, model assembly from checkpoints, adapter pre-training,
// downstream fine-tuning, and the forgetting experiment.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kadapter/adapter.hpp"
#include "kadapter/backbone.hpp"
#include "kadapter/batch.hpp"
#include "kadapter/checkpoint.hpp"
#include "kadapter/config.hpp"
#include "kadapter/corpus.hpp"
#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"
#include "kadapter/params.hpp"
#include "kadapter/tasks.hpp"

namespace kadapter {

// ---------------------------------------------------------------------------
// Schedule and optimizer

// Linear warmup from 0 to lr, then linear decay to 0 at total_steps.
inline double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0) throw ArgumentError("lr_at: negative step");
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
  if (step >= cfg.total_steps) return 0.0;
  return cfg.lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

struct AdamState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> slots;
};

// Decoupled weight decay, then the bias-corrected Adam update. `step` is
// 0-based. Parameters without a gradient are left alone.
inline void adamw_step(ParamStore& params, AdamState& state, const TrainConfig& cfg, int step,
                       double lr) {
  const double t = static_cast<double>(step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.all()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(p.size(), 0.0);
      slot.v.assign(p.size(), 0.0);
    }
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr * cfg.weight_decay * w[i];
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = slot.m[i] / c1;
      const double vhat = slot.v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Epoch-wise shuffled minibatches; the last partial batch of an epoch is
// topped up from the next epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(seed) {
    if (n == 0) throw ArgumentError("BatchSampler: no examples");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        shuffle_in_place(order_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

using StepLoss = std::function<Tensor(std::span<const std::size_t>)>;

// Runs cfg.total_steps optimizer steps. Freezing is applied first; the loss
// log gets one `step<TAB>lr<TAB>loss` line per step.
inline std::vector<double> train_loop(ParamStore& params, const TrainConfig& cfg,
                                      std::size_t n_examples, const StepLoss& loss_fn,
                                      std::ostream* log = nullptr) {
  cfg.validate();
  params.apply_freeze(cfg.freeze_prefixes);
  std::vector<double> losses;
  if (cfg.total_steps == 0) return losses;
  AdamState state;
  BatchSampler sampler(n_examples, static_cast<std::size_t>(cfg.batch_size), cfg.seed);
  for (int step = 0; step < cfg.total_steps; ++step) {
    const auto idx = sampler.next();
    Tensor loss = loss_fn(idx);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericInputError("loss became non-finite at step " + std::to_string(step));
    }
    ndgrad::backward(loss);
    const double lr = lr_at(step, cfg);
    adamw_step(params, state, cfg, step, lr);
    params.clear_grads();
    losses.push_back(value);
    if (log != nullptr) {
      std::ostringstream line;
      line << step << '\t' << std::setprecision(9) << lr << '\t' << std::setprecision(9) << value
           << '\n';
      *log << line.str();
    }
  }
  return losses;
}

// Turns gradient tracking off for every parameter and restores it on exit.
class NoGrad {
 public:
  explicit NoGrad(ParamStore& params) : params_(params) {
    for (auto& [name, t] : params_.all()) {
      flags_.emplace(name, t.requires_grad());
      t.set_requires_grad(false);
    }
  }
  ~NoGrad() {
    for (auto& [name, t] : params_.all()) {
      auto it = flags_.find(name);
      t.set_requires_grad(it != flags_.end() && it->second);
    }
  }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  ParamStore& params_;
  std::map<std::string, bool> flags_;
};

// ---------------------------------------------------------------------------
// Model: backbone, zero or more adapters, and heads in one parameter store.

inline std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  return mix64(seed) ^ fingerprint(name);
}

class Model {
 public:
  Model(const BackboneConfig& bcfg, ParamStore store)
      : bcfg_(bcfg), store_(std::move(store)), backbone_(bcfg_, store_) {}

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  static Model initialize(const BackboneConfig& bcfg, std::uint64_t seed) {
    ParamStore store;
    std::mt19937_64 rng(seed);
    store.materialize(Backbone::layout(bcfg), rng);
    return Model(bcfg, std::move(store));
  }

  static Model from_backbone(const Checkpoint& ckpt) {
    if (!ckpt.metadata.contains("backbone")) {
      throw ConfigError("backbone checkpoint has no backbone configuration");
    }
    const BackboneConfig bcfg = backbone_config_from_json(ckpt.metadata.at("backbone"));
    ParamStore store;
    store.assign_from(ckpt.params, Backbone::kPrefix);
    return Model(bcfg, std::move(store));
  }

  const BackboneConfig& backbone_config() const { return bcfg_; }
  const Backbone& backbone() const { return backbone_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const std::vector<Adapter>& adapters() const { return adapters_; }

  std::vector<std::string> adapter_names() const {
    std::vector<std::string> names;
    for (const auto& a : adapters_) names.push_back(a.name());
    return names;
  }

  const Adapter& adapter(const std::string& name) const {
    for (const auto& a : adapters_)
      if (a.name() == name) return a;
    throw ConfigError("no adapter named " + name);
  }

  void add_adapter(const std::string& name, const AdapterConfig& cfg, std::uint64_t seed) {
    require_new_adapter(name);
    std::mt19937_64 rng(name_seed(seed, Adapter::prefix(name)));
    store_.materialize(Adapter::layout(name, cfg, bcfg_), rng);
    adapters_.emplace_back(name, cfg, bcfg_, store_);
  }

  // Loads only the adapter's own parameters; its pre-training head stays out.
  void load_adapter(const Checkpoint& ckpt) {
    const auto& meta = ckpt.metadata;
    if (!meta.contains("name") || !meta.contains("adapter") || !meta.contains("backbone")) {
      throw ConfigError("adapter checkpoint metadata lacks name/adapter/backbone");
    }
    const std::string name = meta.at("name").get<std::string>();
    const AdapterConfig cfg = adapter_config_from_json(meta.at("adapter"));
    const BackboneConfig trained_on = backbone_config_from_json(meta.at("backbone"));
    if (trained_on.hidden != bcfg_.hidden || trained_on.n_layers != bcfg_.n_layers) {
      throw DimensionError("adapter '" + name + "' was built for hidden " +
                           std::to_string(trained_on.hidden) + " x " +
                           std::to_string(trained_on.n_layers) + " layers, backbone has " +
                           std::to_string(bcfg_.hidden) + " x " + std::to_string(bcfg_.n_layers));
    }
    require_new_adapter(name);
    const Layout layout = Adapter::layout(name, cfg, bcfg_);
    for (const auto& spec : layout) {
      if (!ckpt.params.contains(spec.name)) {
        throw FormatError("adapter checkpoint lacks parameter " + spec.name);
      }
      if (ckpt.params.at(spec.name).shape() != spec.shape) {
        throw DimensionError("adapter parameter " + spec.name + " has shape " +
                             ndgrad::shape_str(ckpt.params.at(spec.name).shape()) + ", expected " +
                             ndgrad::shape_str(spec.shape));
      }
    }
    store_.assign_from(ckpt.params, Adapter::prefix(name));
    adapters_.emplace_back(name, cfg, bcfg_, store_);
  }

  // Creates a linear head unless one with this prefix already exists.
  LinearHead head(const std::string& prefix, std::size_t in, std::size_t out, std::uint64_t seed) {
    if (!store_.contains(prefix + "weight")) {
      std::mt19937_64 rng(name_seed(seed, prefix));
      store_.materialize(LinearHead::layout(prefix, in, out), rng);
    }
    return bound_head(prefix);
  }

  LinearHead bound_head(const std::string& prefix) const { return LinearHead::bind(store_, prefix); }

  // Fused features from the named adapters (all adapters when `use` is
  // empty and `backbone_only` is false).
  Tensor features(const EncodedBatch& batch, const std::vector<std::string>& use = {},
                  bool backbone_only = false) const {
    HiddenStack stack = backbone_.encode(batch);
    const auto names = backbone_only ? std::vector<std::string>{}
                                     : (use.empty() ? adapter_names() : use);
    if (names.empty()) return stack.last();
    std::vector<AdapterOutput> outs;
    for (const auto& n : names) outs.push_back(adapter(n).forward(stack));
    return fuse(outs);
  }

  std::size_t feature_width(const std::vector<std::string>& use = {}, bool backbone_only = false) const {
    const auto names = backbone_only ? std::vector<std::string>{}
                                     : (use.empty() ? adapter_names() : use);
    if (names.empty()) return static_cast<std::size_t>(bcfg_.hidden);
    std::size_t w = 0;
    for (const auto& n : names) w += static_cast<std::size_t>(bcfg_.hidden + adapter(n).config().up_dim);
    return w;
  }

 private:
  void require_new_adapter(const std::string& name) const {
    if (name.empty() || name.find('.') != std::string::npos) {
      throw ConfigError("adapter name must be non-empty and contain no '.'");
    }
    for (const auto& a : adapters_)
      if (a.name() == name) throw ConfigError("adapter '" + name + "' loaded twice");
  }

  BackboneConfig bcfg_;
  ParamStore store_;
  Backbone backbone_;
  std::vector<Adapter> adapters_;
};

inline Checkpoint backbone_checkpoint(const Model& model, std::uint64_t seed) {
  Checkpoint c;
  c.metadata = {{"kind", "backbone"}, {"backbone", to_json(model.backbone_config())}, {"seed", seed}};
  c.params = model.params().subset(Backbone::kPrefix);
  return c;
}

// ---------------------------------------------------------------------------
// Task data and generic per-task loss / evaluation

// One encoded row per example, or one row per choice for multiple choice.
using Example = std::vector<EncodedRow>;

struct TaskData {
  Task task = Task::RelationFt;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::size_t n_labels = 0;
};

inline const char* task_name(Task t) {
  switch (t) {
    case Task::Typing: return "typing";
    case Task::RelationFt: return "relation";
    case Task::SpanQa: return "qa";
    case Task::MultiChoice: return "multichoice";
    case Task::FactPretrain: return "fact";
    case Task::DepPretrain: return "dep";
  }
  return "unknown";
}

inline Task task_from_name(const std::string& name) {
  for (Task t : {Task::Typing, Task::RelationFt, Task::SpanQa, Task::MultiChoice, Task::FactPretrain,
                 Task::DepPretrain}) {
    if (name == task_name(t)) return t;
  }
  throw ConfigError("unknown task '" + name + "'");
}

inline std::vector<std::string> metric_keys(Task t) {
  switch (t) {
    case Task::Typing: return {"accuracy", "macro_f1", "micro_precision", "micro_recall", "micro_f1"};
    case Task::RelationFt:
    case Task::FactPretrain: return {"accuracy", "macro_f1"};
    case Task::SpanQa: return {"exact_match", "f1"};
    case Task::MultiChoice: return {"accuracy"};
    case Task::DepPretrain: return {"head_accuracy"};
  }
  return {};
}

// Rows of the selected examples; `choice` picks the row within each example.
inline EncodedBatch collate_examples(const std::vector<Example>& examples,
                                     std::span<const std::size_t> idx, int pad_id,
                                     std::size_t choice = 0) {
  std::vector<EncodedRow> rows;
  rows.reserve(idx.size());
  for (std::size_t i : idx) {
    const Example& ex = examples.at(i);
    if (choice >= ex.size()) throw AnnotationError("example has no row " + std::to_string(choice));
    rows.push_back(ex[choice]);
  }
  return collate(rows, pad_id);
}

struct FeatureView {
  std::vector<std::string> adapters;
  bool backbone_only = false;
};

// Creates (or binds) the task head(s) under `prefix`.
inline void ensure_task_head(Model& model, Task task, const std::string& prefix, std::size_t n_labels,
                             const FeatureView& view, std::uint64_t seed) {
  const std::size_t d = model.feature_width(view.adapters, view.backbone_only);
  switch (task) {
    case Task::Typing: model.head(prefix, d, n_labels, seed); break;
    case Task::RelationFt:
    case Task::FactPretrain: model.head(prefix, 2 * d, n_labels, seed); break;
    case Task::SpanQa:
      model.head(prefix + "start.", d, 1, seed);
      model.head(prefix + "end.", d, 1, seed);
      break;
    case Task::MultiChoice: model.head(prefix, d, 1, seed); break;
    case Task::DepPretrain:
      model.head(prefix, d, static_cast<std::size_t>(model.backbone_config().max_len) + 1, seed);
      break;
  }
}

inline std::size_t example_rows(Task task, const std::vector<Example>& examples) {
  if (examples.empty()) throw ArgumentError(std::string(task_name(task)) + ": no examples");
  return examples.front().size();
}

inline Tensor task_loss(const Model& model, Task task, const std::string& prefix,
                        const std::vector<Example>& examples, std::span<const std::size_t> idx,
                        const FeatureView& view) {
  const int pad = model.backbone_config().pad_id;
  if (task == Task::MultiChoice) {
    const std::size_t n_choices = example_rows(task, examples);
    std::vector<Tensor> feats;
    EncodedBatch first;
    for (std::size_t c = 0; c < n_choices; ++c) {
      EncodedBatch b = collate_examples(examples, idx, pad, c);
      feats.push_back(model.features(b, view.adapters, view.backbone_only));
      if (c == 0) first = std::move(b);
    }
    Tensor scores = multichoice_head(feats, model.bound_head(prefix));
    return ndgrad::cross_entropy(scores, batch_labels(first));
  }
  const EncodedBatch batch = collate_examples(examples, idx, pad);
  const Tensor f = model.features(batch, view.adapters, view.backbone_only);
  switch (task) {
    case Task::Typing:
      return entity_typing_loss(entity_typing_head(f, batch, model.bound_head(prefix)), batch);
    case Task::RelationFt:
      return ndgrad::cross_entropy(relation_ft_head(f, batch, model.bound_head(prefix)),
                                   batch_labels(batch));
    case Task::FactPretrain:
      return ndgrad::cross_entropy(relation_pretrain_head(f, batch, model.bound_head(prefix)),
                                   batch_labels(batch));
    case Task::SpanQa:
      return span_qa_loss(
          span_qa_head(f, model.bound_head(prefix + "start."), model.bound_head(prefix + "end.")),
          batch);
    case Task::DepPretrain:
      return dep_head_loss(dep_head_prediction(f, model.bound_head(prefix),
                                               static_cast<std::size_t>(model.backbone_config().max_len)),
                           batch);
    case Task::MultiChoice: break;
  }
  throw ArgumentError("task_loss: unsupported task");
}

inline constexpr std::size_t kEvalBatch = 32;

// Raw outputs used for bit-equality checks: head logits on the examples.
inline std::vector<double> task_outputs(Model& model, Task task, const std::string& prefix,
                                        const std::vector<Example>& examples, const FeatureView& view);

inline Metrics evaluate(Model& model, Task task, const std::string& prefix,
                        const std::vector<Example>& examples, std::size_t n_labels,
                        const FeatureView& view) {
  if (examples.empty()) throw MetricError(std::string(task_name(task)) + ": empty evaluation split");
  NoGrad guard(model.params());
  const int pad = model.backbone_config().pad_id;
  std::vector<int> pred, gold;
  std::vector<std::vector<int>> pred_sets, gold_sets;
  double em = 0, f1 = 0, head_hits = 0, head_total = 0;
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(examples.size(), start + kEvalBatch); ++i) idx.push_back(i);
    if (task == Task::MultiChoice) {
      const std::size_t n_choices = example_rows(task, examples);
      std::vector<Tensor> feats;
      std::vector<int> labels;
      for (std::size_t c = 0; c < n_choices; ++c) {
        EncodedBatch b = collate_examples(examples, idx, pad, c);
        feats.push_back(model.features(b, view.adapters, view.backbone_only));
        if (c == 0) labels = batch_labels(b);
      }
      const auto p = argmax_rows(multichoice_head(feats, model.bound_head(prefix)));
      pred.insert(pred.end(), p.begin(), p.end());
      gold.insert(gold.end(), labels.begin(), labels.end());
      continue;
    }
    const EncodedBatch batch = collate_examples(examples, idx, pad);
    const Tensor f = model.features(batch, view.adapters, view.backbone_only);
    switch (task) {
      case Task::Typing: {
        const Tensor logits = entity_typing_head(f, batch, model.bound_head(prefix));
        const std::size_t c = logits.dim(1);
        for (std::size_t i = 0; i < batch.batch; ++i) {
          auto row = logits.data().subspan(i * c, c);
          std::vector<int> p(c, 0), g(c, 0);
          for (std::size_t k = 0; k < c; ++k) {
            p[k] = row[k] > 0.0;
            g[k] = batch.ann[i].multi_hot.at(k) > 0.5;
          }
          pred_sets.push_back(std::move(p));
          gold_sets.push_back(std::move(g));
        }
        break;
      }
      case Task::RelationFt:
      case Task::FactPretrain: {
        const Tensor logits = task == Task::RelationFt
                                  ? relation_ft_head(f, batch, model.bound_head(prefix))
                                  : relation_pretrain_head(f, batch, model.bound_head(prefix));
        const auto p = argmax_rows(logits);
        const auto g = batch_labels(batch);
        pred.insert(pred.end(), p.begin(), p.end());
        gold.insert(gold.end(), g.begin(), g.end());
        break;
      }
      case Task::SpanQa: {
        const SpanLogits logits =
            span_qa_head(f, model.bound_head(prefix + "start."), model.bound_head(prefix + "end."));
        for (std::size_t i = 0; i < batch.batch; ++i) {
          const auto& a = batch.ann[i];
          if (!a.answer) throw AnnotationError("span QA example without an answer span");
          const auto [s, e] = decode_span(logits.start.data().subspan(i * batch.len, batch.len),
                                          logits.end.data().subspan(i * batch.len, batch.len), a.segment);
          const auto* ids = batch.token_ids.data() + i * batch.len;
          const std::vector<int> p(ids + s, ids + e + 1);
          const std::vector<int> g(ids + a.answer->first, ids + a.answer->second + 1);
          const EMF1 m = metric_em_f1(p, g);
          em += m.em;
          f1 += m.f1;
        }
        break;
      }
      case Task::DepPretrain: {
        const std::size_t ml = static_cast<std::size_t>(model.backbone_config().max_len);
        const Tensor logits = dep_head_prediction(f, model.bound_head(prefix), ml);
        const auto p = argmax_rows(logits);
        for (std::size_t i = 0; i < batch.batch; ++i) {
          const auto& heads = batch.ann[i].dep_heads;
          for (std::size_t t = 0; t < batch.len && t < heads.size(); ++t) {
            if (heads[t] < 0) continue;
            head_total += 1;
            head_hits += p[i * batch.len + t] == heads[t];
          }
        }
        break;
      }
      case Task::MultiChoice: break;
    }
  }
  const double n = static_cast<double>(examples.size());
  switch (task) {
    case Task::Typing: return typing_metrics(pred_sets, gold_sets);
    case Task::RelationFt:
    case Task::FactPretrain:
      return {{"accuracy", accuracy(pred, gold)},
              {"macro_f1", macro_f1(pred, gold, static_cast<int>(n_labels))}};
    case Task::SpanQa: return {{"exact_match", em / n}, {"f1", f1 / n}};
    case Task::MultiChoice: return {{"accuracy", accuracy(pred, gold)}};
    case Task::DepPretrain:
      if (head_total == 0) throw MetricError("dep evaluation: no scored tokens");
      return {{"head_accuracy", head_hits / head_total}};
  }
  return {};
}

inline std::vector<double> task_outputs(Model& model, Task task, const std::string& prefix,
                                        const std::vector<Example>& examples, const FeatureView& view) {
  NoGrad guard(model.params());
  const int pad = model.backbone_config().pad_id;
  std::vector<std::size_t> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<double> out;
  const EncodedBatch batch = collate_examples(examples, idx, pad);
  const Tensor f = model.features(batch, view.adapters, view.backbone_only);
  out.assign(f.data().begin(), f.data().end());
  if (task == Task::RelationFt) {
    const Tensor logits = relation_ft_head(f, batch, model.bound_head(prefix));
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  } else if (task == Task::FactPretrain) {
    const Tensor logits = relation_pretrain_head(f, batch, model.bound_head(prefix));
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  } else if (task == Task::Typing) {
    const Tensor logits = entity_typing_head(f, batch, model.bound_head(prefix));
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adapter pre-training

struct PretrainResult {
  Checkpoint adapter;
  std::vector<double> losses;
  Metrics dev;
  bool backbone_unchanged = false;  // backbone tensors of the training model, compared as bytes
};

inline constexpr const char* kPretrainHead = "head.pretrain.";

inline Checkpoint adapter_checkpoint(const Model& model, const std::string& name, Task knowledge,
                                     int steps, std::uint64_t seed, std::size_t n_labels) {
  Checkpoint c;
  c.metadata = {{"kind", "adapter"},
                {"name", name},
                {"knowledge", task_name(knowledge)},
                {"adapter", to_json(model.adapter(name).config())},
                {"backbone", to_json(model.backbone_config())},
                {"steps", steps},
                {"seed", seed},
                {"labels", n_labels}};
  c.params = model.params().subset(Adapter::prefix(name));
  c.params.assign_from(model.params().subset(kPretrainHead));
  return c;
}

// Trains one adapter plus its pre-training head with the backbone frozen.
inline PretrainResult pretrain_adapter(const Checkpoint& backbone_ckpt, const std::string& name,
                                       const AdapterConfig& acfg, Task knowledge,
                                       const TaskData& data, const TrainConfig& cfg,
                                       std::ostream* log = nullptr) {
  if (knowledge != Task::FactPretrain && knowledge != Task::DepPretrain) {
    throw ConfigError("pre-training task must be fact or dep");
  }
  if (data.task != knowledge) {
    throw ConfigError(std::string("corpus is for task ") + task_name(data.task) + ", pre-training " +
                      task_name(knowledge));
  }
  if (std::find(cfg.freeze_prefixes.begin(), cfg.freeze_prefixes.end(), Backbone::kPrefix) ==
      cfg.freeze_prefixes.end()) {
    throw ConfigError("adapter pre-training requires freeze_prefixes to include 'backbone.'");
  }
  cfg.validate();
  Model model = Model::from_backbone(backbone_ckpt);
  model.add_adapter(name, acfg, cfg.seed);
  const FeatureView view{{name}, false};
  ensure_task_head(model, knowledge, kPretrainHead, data.n_labels, view, cfg.seed);
  auto backbone_bytes = [&] { return serialize_checkpoint({{}, model.params().subset(Backbone::kPrefix)}); };
  const std::string before = backbone_bytes();
  PretrainResult r;
  r.losses = train_loop(
      model.params(), cfg, data.train.size(),
      [&](std::span<const std::size_t> idx) {
        return task_loss(model, knowledge, kPretrainHead, data.train, idx, view);
      },
      log);
  r.backbone_unchanged = backbone_bytes() == before;
  if (!data.dev.empty()) r.dev = evaluate(model, knowledge, kPretrainHead, data.dev, data.n_labels, view);
  r.adapter = adapter_checkpoint(model, name, knowledge, cfg.total_steps, cfg.seed, data.n_labels);
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning: adapters frozen, backbone and head trainable.

struct FinetuneResult {
  Checkpoint model;
  std::vector<double> losses;
  Metrics metrics;
};

inline std::string task_head_prefix(Task task) { return std::string("head.") + task_name(task) + "."; }

inline Model assemble(const Checkpoint& backbone_ckpt, const std::vector<Checkpoint>& adapters) {
  Model model = Model::from_backbone(backbone_ckpt);
  for (const auto& a : adapters) model.load_adapter(a);
  return model;
}

inline Checkpoint model_checkpoint(const Model& model, Task task, std::size_t n_labels, int steps,
                                   std::uint64_t seed) {
  Checkpoint c;
  Json adapters = Json::array();
  for (const auto& a : model.adapters()) adapters.push_back({{"name", a.name()}, {"adapter", to_json(a.config())}});
  c.metadata = {{"kind", "model"},
                {"task", task_name(task)},
                {"backbone", to_json(model.backbone_config())},
                {"adapters", adapters},
                {"labels", n_labels},
                {"steps", steps},
                {"seed", seed}};
  c.params = model.params().clone();
  return c;
}

inline FinetuneResult finetune(const Checkpoint& backbone_ckpt, const std::vector<Checkpoint>& adapters,
                               const TaskData& data, TrainConfig cfg, std::ostream* log = nullptr) {
  if (data.task == Task::FactPretrain || data.task == Task::DepPretrain) {
    throw ConfigError("fine-tuning task must be typing, relation, qa or multichoice");
  }
  Model model = assemble(backbone_ckpt, adapters);
  for (const auto& a : model.adapters()) cfg.freeze_prefixes.push_back(Adapter::prefix(a.name()));
  const std::string prefix = task_head_prefix(data.task);
  const FeatureView view{model.adapter_names(), model.adapters().empty()};
  ensure_task_head(model, data.task, prefix, data.n_labels, view, cfg.seed);
  FinetuneResult r;
  r.losses = train_loop(
      model.params(), cfg, data.train.size(),
      [&](std::span<const std::size_t> idx) {
        return task_loss(model, data.task, prefix, data.train, idx, view);
      },
      log);
  r.metrics = evaluate(model, data.task, prefix, data.dev, data.n_labels, view);
  r.model = model_checkpoint(model, data.task, data.n_labels, cfg.total_steps, cfg.seed);
  return r;
}

// Rebuilds a fine-tuned model from its checkpoint for evaluation.
inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.metadata;
  if (meta.value("kind", "") != "model") throw ConfigError("not a fine-tuned model checkpoint");
  Model out = Model::from_backbone(Checkpoint{meta, ckpt.params.subset(Backbone::kPrefix)});
  for (const auto& a : meta.at("adapters")) {
    Checkpoint ac;
    ac.metadata = {{"name", a.at("name")}, {"adapter", a.at("adapter")}, {"backbone", meta.at("backbone")}};
    ac.params = ckpt.params.subset(Adapter::prefix(a.at("name").get<std::string>()));
    out.load_adapter(ac);
  }
  out.params().assign_from(ckpt.params, "head.");
  return out;
}

// ---------------------------------------------------------------------------
// Forgetting experiment

struct ForgettingReport {
  double sequential_dev_a_before = 0;
  double sequential_dev_a_after = 0;
  double sequential_forgetting = 0;
  double adapter_dev_a_before = 0;
  double adapter_dev_a_after = 0;
  double adapter_forgetting = 0;
  bool adapter_outputs_identical = false;
  bool adapter_bytes_identical = false;

  Json to_json() const {
    return {{"sequential_dev_a_before", sequential_dev_a_before},
            {"sequential_dev_a_after", sequential_dev_a_after},
            {"sequential_forgetting", sequential_forgetting},
            {"adapter_dev_a_before", adapter_dev_a_before},
            {"adapter_dev_a_after", adapter_dev_a_after},
            {"adapter_forgetting", adapter_forgetting},
            {"adapter_outputs_identical", adapter_outputs_identical},
            {"adapter_bytes_identical", adapter_bytes_identical}};
  }
};

inline std::set<int> label_set(const TaskData& d) {
  std::set<int> out;
  for (const auto* split : {&d.train, &d.dev})
    for (const auto& ex : *split)
      for (const auto& row : ex) out.insert(row.ann.label);
  return out;
}

inline constexpr std::size_t kProbeBatch = 8;

// Arm 1 trains every parameter on A then on B. Arm 2 trains adapter a on A
// and adapter b on B over a frozen backbone. Forgetting is dev accuracy on A
// before minus after the B phase.
inline ForgettingReport forgetting_experiment(const Checkpoint& backbone_ckpt, const AdapterConfig& acfg,
                                              const TaskData& a, const TaskData& b, TrainConfig cfg) {
  for (const auto* d : {&a, &b}) {
    if (d->task != Task::RelationFt && d->task != Task::FactPretrain) {
      throw ConfigError("forgetting experiment needs relation classification tasks");
    }
    if (d->train.empty() || d->dev.empty()) throw ConfigError("forgetting tasks need train and dev data");
  }
  const auto la = label_set(a), lb = label_set(b);
  for (int l : la)
    if (lb.count(l)) throw ConfigError("forgetting tasks share label " + std::to_string(l));
  const std::size_t n_labels = std::max(a.n_labels, b.n_labels);
  ForgettingReport r;
  auto metric = [](const Metrics& m) { return m.at("accuracy"); };
  const TrainConfig base = cfg;

  {
    Model model = Model::from_backbone(backbone_ckpt);
    const FeatureView view{{}, true};
    ensure_task_head(model, a.task, "head.task_a.", n_labels, view, cfg.seed);
    ensure_task_head(model, b.task, "head.task_b.", n_labels, view, cfg.seed);
    TrainConfig ca = base;
    ca.freeze_prefixes = {"head.task_b."};
    train_loop(model.params(), ca, a.train.size(), [&](std::span<const std::size_t> idx) {
      return task_loss(model, a.task, "head.task_a.", a.train, idx, view);
    });
    r.sequential_dev_a_before = metric(evaluate(model, a.task, "head.task_a.", a.dev, n_labels, view));
    TrainConfig cb = base;
    cb.seed = base.seed + 1;
    cb.freeze_prefixes = {"head.task_a."};
    train_loop(model.params(), cb, b.train.size(), [&](std::span<const std::size_t> idx) {
      return task_loss(model, b.task, "head.task_b.", b.train, idx, view);
    });
    r.sequential_dev_a_after = metric(evaluate(model, a.task, "head.task_a.", a.dev, n_labels, view));
    r.sequential_forgetting = r.sequential_dev_a_before - r.sequential_dev_a_after;
  }

  {
    Model model = Model::from_backbone(backbone_ckpt);
    model.add_adapter("task_a", acfg, cfg.seed);
    model.add_adapter("task_b", acfg, cfg.seed + 1);
    const FeatureView va{{"task_a"}, false}, vb{{"task_b"}, false};
    ensure_task_head(model, a.task, "head.task_a.", n_labels, va, cfg.seed);
    ensure_task_head(model, b.task, "head.task_b.", n_labels, vb, cfg.seed);
    TrainConfig ca = base;
    ca.freeze_prefixes = {Backbone::kPrefix, Adapter::prefix("task_b"), "head.task_b."};
    train_loop(model.params(), ca, a.train.size(), [&](std::span<const std::size_t> idx) {
      return task_loss(model, a.task, "head.task_a.", a.train, idx, va);
    });
    r.adapter_dev_a_before = metric(evaluate(model, a.task, "head.task_a.", a.dev, n_labels, va));
    const std::vector<Example> probe(a.dev.begin(), a.dev.begin() + std::min(kProbeBatch, a.dev.size()));
    const auto outputs_before = task_outputs(model, a.task, "head.task_a.", probe, va);
    auto a_bytes = [&]() {
      Checkpoint c;
      c.params = model.params().subset(Adapter::prefix("task_a"));
      c.params.assign_from(model.params().subset("head.task_a."));
      return serialize_checkpoint(c);
    };
    const std::string bytes_before = a_bytes();
    TrainConfig cb = base;
    cb.seed = base.seed + 1;
    cb.freeze_prefixes = {Backbone::kPrefix, Adapter::prefix("task_a"), "head.task_a."};
    train_loop(model.params(), cb, b.train.size(), [&](std::span<const std::size_t> idx) {
      return task_loss(model, b.task, "head.task_b.", b.train, idx, vb);
    });
    r.adapter_dev_a_after = metric(evaluate(model, a.task, "head.task_a.", a.dev, n_labels, va));
    r.adapter_outputs_identical = outputs_before == task_outputs(model, a.task, "head.task_a.", probe, va);
    r.adapter_bytes_identical = bytes_before == a_bytes();
    r.adapter_forgetting = r.adapter_dev_a_before - r.adapter_dev_a_after;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Building task data from corpora

inline TaskData fact_task_data(const std::vector<FactExample>& facts, Task task, const Vocab& vocab,
                               std::size_t max_len, std::size_t n_labels) {
  TaskData d;
  d.task = task;
  d.n_labels = n_labels;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    Example ex{encode_fact(facts[i], task, vocab, max_len)};
    const Split s = split_of(i);
    if (s == Split::Train) d.train.push_back(std::move(ex));
    else if (s == Split::Dev) d.dev.push_back(std::move(ex));
  }
  return d;
}

inline TaskData dep_task_data(const std::vector<DepExample>& deps, const Vocab& vocab, std::size_t max_len) {
  TaskData d;
  d.task = Task::DepPretrain;
  d.n_labels = max_len + 1;
  for (std::size_t i = 0; i < deps.size(); ++i) {
    Example ex{encode_dep(deps[i], vocab, max_len)};
    const Split s = split_of(i);
    if (s == Split::Train) d.train.push_back(std::move(ex));
    else if (s == Split::Dev) d.dev.push_back(std::move(ex));
  }
  return d;
}

// Typing splits by entity (see gen_typing_dataset); QA and multiple choice
// split by example index like the corpora above.
inline TaskData typing_task_data(const SyntheticKb& kb, std::uint64_t seed, std::size_t variants,
                                 const Vocab& vocab, std::size_t max_len) {
  TaskData d;
  d.task = Task::Typing;
  d.n_labels = kNumEntityTypes;
  for (const auto& ex : gen_typing_dataset(kb, seed, variants, Split::Train))
    d.train.push_back({encode_typing(ex, vocab, max_len)});
  for (const auto& ex : gen_typing_dataset(kb, seed, variants, Split::Dev))
    d.dev.push_back({encode_typing(ex, vocab, max_len)});
  return d;
}

inline TaskData qa_task_data(const SyntheticKb& kb, std::uint64_t seed, std::size_t n, const Vocab& vocab,
                             std::size_t max_len, std::size_t sentences = 3) {
  TaskData d;
  d.task = Task::SpanQa;
  const auto all = gen_qa_dataset(kb, seed, n, sentences);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Split s = split_of(i);
    if (s == Split::Train) d.train.push_back({encode_span_qa(all[i], vocab, max_len)});
    else if (s == Split::Dev) d.dev.push_back({encode_span_qa(all[i], vocab, max_len)});
  }
  return d;
}

inline TaskData choice_task_data(const SyntheticKb& kb, std::uint64_t seed, std::size_t n, const Vocab& vocab,
                                 std::size_t max_len, std::size_t n_choices = 4) {
  TaskData d;
  d.task = Task::MultiChoice;
  d.n_labels = n_choices;
  const auto all = gen_choice_dataset(kb, seed, n, n_choices);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Split s = split_of(i);
    if (s == Split::Train) d.train.push_back(encode_multichoice(all[i], vocab, max_len));
    else if (s == Split::Dev) d.dev.push_back(encode_multichoice(all[i], vocab, max_len));
  }
  return d;
}

}  // namespace kadapter
