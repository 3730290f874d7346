#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "kadapter/gradcheck.hpp"
#include "kadapter/tasks.hpp"
#include "kadapter/trainer.hpp"

using namespace kadapter;
using ndgrad::Tensor;

namespace {

Tensor ce(const Tensor& logits, const std::vector<int>& labels) { return ndgrad::cross_entropy(logits, labels); }

LinearHead zero_head(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

LinearHead random_head(std::size_t in, std::size_t out, std::mt19937_64& rng, double sd = 0.5) {
  return {gradcheck::random_tensor({in, out}, rng, -sd, sd), gradcheck::random_tensor({out}, rng, -sd, sd)};
}

// Rows of length l whose token ids are irrelevant to the heads.
EncodedBatch rows_with(std::size_t l, const std::vector<RowAnnotations>& anns) {
  std::vector<EncodedRow> rows;
  for (const auto& a : anns) rows.push_back({std::vector<int>(l, 9), a});
  return collate(rows, 0);
}

RowAnnotations spans(Span a, Span b, int label = 0) {
  RowAnnotations r;
  r.entity_spans = {a, b};
  r.label = label;
  return r;
}

RowAnnotations typing_row(int at, std::vector<double> hot) {
  RowAnnotations r;
  r.at_index = at;
  r.multi_hot = std::move(hot);
  return r;
}

RowAnnotations marker_row(int at, int hash, int label = 0) {
  RowAnnotations r;
  r.at_index = at;
  r.hash_index = hash;
  r.label = label;
  return r;
}

RowAnnotations qa_row(std::size_t s, std::size_t e, Span seg) {
  RowAnnotations r;
  r.answer = std::make_pair(s, e);
  r.segment = seg;
  return r;
}

// Plain Adam over a small store, for head-only training on fixed features.
void fit(ParamStore& store, int steps, double lr, const std::function<Tensor()>& loss) {
  TrainConfig cfg;
  cfg.lr = lr;
  cfg.total_steps = steps;
  AdamState st;
  for (int s = 0; s < steps; ++s) {
    ndgrad::backward(loss());
    adamw_step(store, st, cfg, s, lr);
    store.clear_grads();
  }
}

LinearHead store_head(ParamStore& store, std::size_t in, std::size_t out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  store.materialize(LinearHead::layout("h.", in, out), rng);
  return LinearHead::bind(store, "h.");
}

void set_row(Tensor& f, std::size_t i, std::size_t t, const std::vector<double>& head) {
  const std::size_t l = f.dim(1), d = f.dim(2);
  auto data = f.mutable_data();
  for (std::size_t k = 0; k < head.size(); ++k) data[(i * l + t) * d + k] = head[k];
}

BackboneConfig tiny_backbone(int vocab, int max_len) {
  BackboneConfig c;
  c.n_layers = 2;
  c.hidden = 32;
  c.n_heads = 4;
  c.ffn_inner = 64;
  c.vocab_size = vocab;
  c.max_len = max_len;
  return c;
}

// Trains backbone + head with the backbone-only view and evaluates on train.
Metrics train_and_score(Model& model, const TaskData& data, int steps, double lr) {
  const FeatureView view{{}, true};
  const std::string prefix = task_head_prefix(data.task);
  ensure_task_head(model, data.task, prefix, data.n_labels, view, 42);
  TrainConfig cfg;
  cfg.lr = lr;
  cfg.total_steps = steps;
  cfg.warmup_steps = steps / 10;
  cfg.batch_size = 16;
  train_loop(model.params(), cfg, data.train.size(), [&](std::span<const std::size_t> idx) {
    return task_loss(model, data.task, prefix, data.train, idx, view);
  });
  return evaluate(model, data.task, prefix, data.train, data.n_labels, view);
}

}  // namespace

// ---------------------------------------------------------------------------
// relation_pretrain_head

TEST(RelationPretrainHead, UniformLossAtZeroHead) {
  Tensor f = Tensor::filled({2, 6, 128}, 0.3);
  auto batch = rows_with(6, {spans({1, 2}, {3, 5}, 4), spans({0, 3}, {4, 6}, 11)});
  Tensor logits = relation_pretrain_head(f, batch, zero_head(256, 16));
  EXPECT_EQ(logits.shape(), (ndgrad::Shape{2, 16}));
  EXPECT_NEAR(ce(logits, batch_labels(batch)).item(), std::log(16.0), 1e-9);
}

TEST(RelationPretrainHead, MeanPoolsEachSpan) {
  // feature = position index in column 0; span [1,4) pools to 2, [4,6) to 4.5
  Tensor f = Tensor::zeros({1, 6, 1});
  for (std::size_t t = 0; t < 6; ++t) f.mutable_data()[t] = static_cast<double>(t);
  LinearHead h{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
  Tensor out = relation_pretrain_head(f, rows_with(6, {spans({1, 4}, {4, 6})}), h);
  EXPECT_DOUBLE_EQ(out.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 4.5);
}

TEST(RelationPretrainHead, MissingSpanIsAnnotationError) {
  RowAnnotations one;
  one.entity_spans = {{0, 1}};
  EXPECT_THROW(relation_pretrain_head(Tensor::zeros({1, 3, 4}), rows_with(3, {one}), zero_head(8, 2)),
               AnnotationError);
}

TEST(RelationPretrainHead, OneGradientStepDescends) {
  // Three sentences; column 0 of the first span decides the class.
  Tensor f = Tensor::zeros({3, 4, 3});
  set_row(f, 0, 0, {1.0, 0.2, -0.1});
  set_row(f, 1, 0, {-1.0, 0.3, 0.4});
  set_row(f, 2, 0, {1.0, -0.5, 0.2});
  auto batch = rows_with(4, {spans({0, 1}, {2, 3}, 1), spans({0, 1}, {2, 4}, 0), spans({0, 1}, {1, 3}, 1)});
  std::mt19937_64 rng(5);
  LinearHead h = random_head(6, 2, rng, 0.1);
  auto loss = [&] { return ce(relation_pretrain_head(f, batch, h), batch_labels(batch)); };
  Tensor l0 = loss();
  ndgrad::backward(l0);
  for (Tensor* t : {&h.weight, &h.bias}) {
    auto g = t->grad();
    auto d = t->mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 0.1 * g[i];
  }
  EXPECT_LT(loss().item(), l0.item());
}

// ---------------------------------------------------------------------------
// dep_head_prediction

TEST(DepHead, ShapeAndUniformBaseline) {
  Tensor f = Tensor::filled({3, 10, 16}, -0.2);
  RowAnnotations a;
  a.dep_heads = {-1, 2, 0, 2, 3, 3, 1, 2, 5, 4};
  auto batch = rows_with(10, {a, a, a});
  Tensor logits = dep_head_prediction(f, zero_head(16, 65), 64);
  EXPECT_EQ(logits.shape(), (ndgrad::Shape{3, 10, 65}));
  EXPECT_NEAR(dep_head_loss(logits, batch).item(), std::log(65.0), 1e-9);
}

TEST(DepHead, SingleTokenRootSaturates) {
  RowAnnotations a;
  a.dep_heads = {0};
  auto batch = rows_with(1, {a});
  Tensor f = Tensor::filled({1, 1, 4}, 1.0);
  double prev = INFINITY;
  for (double big : {1.0, 5.0, 20.0, 50.0}) {
    LinearHead h = zero_head(4, 65);
    h.bias.mutable_data()[0] = big;
    const double loss = dep_head_loss(dep_head_prediction(f, h, 64), batch).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(DepHead, Errors) {
  RowAnnotations a;
  a.dep_heads = {0, 4, 1};  // head 4 > sentence length 3
  EXPECT_THROW(dep_head_loss(dep_head_prediction(Tensor::zeros({1, 3, 4}), zero_head(4, 9), 8), rows_with(3, {a})),
               AnnotationError);
  EXPECT_THROW(dep_head_prediction(Tensor::zeros({1, 3, 4}), zero_head(4, 9), 10), DimensionError);
}

TEST(DepHead, FiftyStepsBeatUniformOnGrammarData) {
  const auto deps = gen_dep_corpus(42, 400);
  const Vocab vocab = Vocab::build(dep_lexicon());
  const int max_len = 64;
  TaskData data = dep_task_data(deps, vocab, max_len);
  Model model = Model::initialize(tiny_backbone(static_cast<int>(vocab.size()), max_len), 42);
  const FeatureView view{{}, true};
  const std::string prefix = "head.dep.";
  ensure_task_head(model, Task::DepPretrain, prefix, data.n_labels, view, 42);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.total_steps = 50;
  cfg.batch_size = 16;
  auto losses = train_loop(model.params(), cfg, data.train.size(), [&](std::span<const std::size_t> idx) {
    return task_loss(model, Task::DepPretrain, prefix, data.train, idx, view);
  });
  ASSERT_EQ(losses.size(), 50u);
  EXPECT_LT(losses.back(), std::log(65.0));
}

// ---------------------------------------------------------------------------
// entity_typing_head

TEST(TypingHead, ZeroWeightsGiveLnTwo) {
  std::mt19937_64 rng(1);
  Tensor f = gradcheck::random_tensor({3, 5, 12}, rng, -1, 1, false);
  std::vector<double> hot{1, 0, 0, 1, 0, 0};
  auto batch = rows_with(5, {typing_row(1, hot), typing_row(0, hot), typing_row(4, hot)});
  Tensor logits = entity_typing_head(f, batch, zero_head(12, 6));
  EXPECT_EQ(logits.shape(), (ndgrad::Shape{3, 6}));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(entity_typing_loss(logits, batch).item(), std::log(2.0), 1e-9);
}

TEST(TypingHead, ReadsTheMarkerPosition) {
  Tensor f = Tensor::zeros({1, 4, 2});
  set_row(f, 0, 2, {3.0, -1.0});
  LinearHead h{Tensor::from({2, 1}, {1.0, 1.0}), Tensor::zeros({1})};
  EXPECT_DOUBLE_EQ(entity_typing_head(f, rows_with(4, {typing_row(2, {1})}), h).data()[0], 2.0);
}

TEST(TypingHead, IndexOutOfRange) {
  EXPECT_THROW(entity_typing_head(Tensor::zeros({1, 4, 2}), rows_with(4, {typing_row(4, {1})}), zero_head(2, 1)),
               AnnotationError);
  EXPECT_THROW(entity_typing_head(Tensor::zeros({1, 4, 2}), rows_with(4, {typing_row(-1, {1})}), zero_head(2, 1)),
               AnnotationError);
}

TEST(TypingHead, SeparableToyReachesMicroF1One) {
  // Type k is present iff column k of the '@' vector is +1.
  std::mt19937_64 rng(7);
  const std::size_t n = 24, l = 5, d = 6, types = 3;
  Tensor f = gradcheck::random_tensor({n, l, d}, rng, -1, 1, false);
  std::vector<RowAnnotations> anns;
  std::vector<std::vector<int>> gold;
  for (std::size_t i = 0; i < n; ++i) {
    const int at = static_cast<int>(rng() % l);
    std::vector<double> hot(types);
    std::vector<double> head(types);
    for (std::size_t k = 0; k < types; ++k) {
      hot[k] = static_cast<double>((i >> k) & 1U);
      head[k] = hot[k] > 0 ? 1.0 : -1.0;
    }
    set_row(f, i, static_cast<std::size_t>(at), head);
    anns.push_back(typing_row(at, hot));
    gold.emplace_back(hot.begin(), hot.end());
  }
  auto batch = rows_with(l, anns);
  ParamStore store;
  LinearHead h = store_head(store, d, types, 3);
  fit(store, 300, 0.05, [&] { return entity_typing_loss(entity_typing_head(f, batch, h), batch); });
  Tensor logits = entity_typing_head(f, batch, h);
  std::vector<std::vector<int>> pred;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> p;
    for (std::size_t k = 0; k < types; ++k) p.push_back(logits.data()[i * types + k] > 0.0);
    pred.push_back(p);
  }
  EXPECT_DOUBLE_EQ(metric_micro_f1(pred, gold).f1, 1.0);
}

// ---------------------------------------------------------------------------
// relation_ft_head

TEST(RelationFtHead, AntisymmetricWeightsCancel) {
  std::mt19937_64 rng(2);
  const std::size_t d = 8;
  Tensor f = gradcheck::random_tensor({2, 6, d}, rng, -1, 1, false);
  // copy position 1 onto position 4 so '@' and '#' features coincide
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < d; ++k) f.mutable_data()[(i * 6 + 4) * d + k] = f.data()[(i * 6 + 1) * d + k];
  Tensor top = gradcheck::random_tensor({d, 42}, rng, -1, 1, false);
  std::vector<double> w(2 * d * 42);
  for (std::size_t k = 0; k < d * 42; ++k) {
    w[k] = top.data()[k];
    w[d * 42 + k] = -top.data()[k];
  }
  LinearHead h{Tensor::from({2 * d, 42}, w), Tensor::zeros({42})};
  Tensor logits = relation_ft_head(f, rows_with(6, {marker_row(1, 4), marker_row(1, 4)}), h);
  EXPECT_EQ(logits.shape(), (ndgrad::Shape{2, 42}));
  for (double v : logits.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(RelationFtHead, MarkerAbsent) {
  EXPECT_THROW(relation_ft_head(Tensor::zeros({1, 4, 2}), rows_with(4, {marker_row(1, -1)}), zero_head(4, 3)),
               AnnotationError);
  EXPECT_THROW(relation_ft_head(Tensor::zeros({1, 4, 2}), rows_with(4, {marker_row(-1, 2)}), zero_head(4, 3)),
               AnnotationError);
}

TEST(RelationFtHead, TwoRelationToyTrainsToFullAccuracy) {
  // Column 1 of the '#' vector carries the relation; the rest is noise.
  std::mt19937_64 rng(11);
  const std::size_t n = 32, l = 6, d = 4;
  Tensor f = gradcheck::random_tensor({n, l, d}, rng, -1, 1, false);
  std::vector<RowAnnotations> anns;
  std::vector<int> gold;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const int at = static_cast<int>(rng() % 3), hash = 3 + static_cast<int>(rng() % 3);
    f.mutable_data()[(i * l + static_cast<std::size_t>(hash)) * d + 1] = label ? 1.0 : -1.0;
    anns.push_back(marker_row(at, hash, label));
    gold.push_back(label);
  }
  auto batch = rows_with(l, anns);
  ParamStore store;
  LinearHead h = store_head(store, 2 * d, 2, 4);
  fit(store, 200, 0.05, [&] { return ce(relation_ft_head(f, batch, h), gold); });
  EXPECT_DOUBLE_EQ(accuracy(argmax_rows(relation_ft_head(f, batch, h)), gold), 1.0);
}

// ---------------------------------------------------------------------------
// span_qa_head

TEST(SpanQa, ShapesAndSingleTokenDecode) {
  std::mt19937_64 rng(3);
  Tensor f = gradcheck::random_tensor({2, 7, 5}, rng, -1, 1, false);
  SpanLogits s = span_qa_head(f, random_head(5, 1, rng), random_head(5, 1, rng));
  EXPECT_EQ(s.start.shape(), (ndgrad::Shape{2, 7}));
  EXPECT_EQ(s.end.shape(), (ndgrad::Shape{2, 7}));
  std::vector<double> one{0.3};
  EXPECT_EQ(decode_span(one, one, Span{0, 1}), std::make_pair(std::size_t{0}, std::size_t{0}));
}

TEST(SpanQa, DecodeKeepsEndAfterStartAndWithinCap) {
  std::vector<double> start{0, 5, 0, 0, 0, 0};
  std::vector<double> end{9, 0, 1, 2, 0, 0};
  EXPECT_EQ(decode_span(start, end, Span{0, 6}), std::make_pair(std::size_t{1}, std::size_t{3}));
  EXPECT_EQ(decode_span(start, end, Span{0, 6}, 2), std::make_pair(std::size_t{1}, std::size_t{2}));
  EXPECT_THROW(decode_span(start, end, Span{2, 2}), AnnotationError);
}

TEST(SpanQa, ZeroHeadBaselineAndGoldOutsideSegment) {
  Tensor f = Tensor::filled({1, 8, 3}, 0.5);
  auto batch = rows_with(8, {qa_row(4, 5, {3, 7})});
  SpanLogits s = span_qa_head(f, zero_head(3, 1), zero_head(3, 1));
  EXPECT_NEAR(span_qa_loss(s, batch).item(), std::log(8.0), 1e-9);
  EXPECT_THROW(span_qa_loss(s, rows_with(8, {qa_row(1, 4, {3, 7})})), AnnotationError);
  EXPECT_THROW(span_qa_loss(s, rows_with(8, {qa_row(5, 7, {3, 7})})), AnnotationError);
}

TEST(SpanQa, CopyTaskReachesFullExactMatchOnTrain) {
  const SyntheticKb kb = gen_kb(42, 16, 2);
  const Vocab vocab = Vocab::build(kb.lexicon());
  const int max_len = 32;
  TaskData data;
  data.task = Task::SpanQa;
  for (const auto& ex : gen_qa_dataset(kb, 42, 48, 2)) data.train.push_back({encode_span_qa(ex, vocab, max_len)});
  Model model = Model::initialize(tiny_backbone(static_cast<int>(vocab.size()), max_len), 42);
  const Metrics m = train_and_score(model, data, 1500, 2e-3);
  EXPECT_DOUBLE_EQ(m.at("exact_match"), 1.0);
}

// ---------------------------------------------------------------------------
// multichoice_head

TEST(MultiChoice, IdenticalChoicesGiveLnFour) {
  std::mt19937_64 rng(4);
  Tensor f = gradcheck::random_tensor({3, 5, 6}, rng, -1, 1, false);
  std::vector<Tensor> feats(4, f);
  Tensor logits = multichoice_head(feats, random_head(6, 1, rng));
  EXPECT_EQ(logits.shape(), (ndgrad::Shape{3, 4}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 1; c < 4; ++c) EXPECT_EQ(logits.data()[i * 4 + c], logits.data()[i * 4]);
  EXPECT_NEAR(ce(logits, {0, 2, 3}).item(), std::log(4.0), 1e-9);
}

TEST(MultiChoice, NeedsTwoChoicesAndScalarHead) {
  std::mt19937_64 rng(4);
  Tensor f = Tensor::zeros({1, 2, 3});
  EXPECT_THROW(multichoice_head({f}, zero_head(3, 1)), ArgumentError);
  EXPECT_THROW(multichoice_head({}, zero_head(3, 1)), ArgumentError);
  EXPECT_THROW(multichoice_head({f, f}, zero_head(3, 2)), DimensionError);
}

TEST(MultiChoice, RepeatedContextTokenToyReachesFullAccuracy) {
  const SyntheticKb kb = gen_kb(42, 16, 2);
  const Vocab vocab = Vocab::build(kb.lexicon());
  const int max_len = 32;
  TaskData data;
  data.task = Task::MultiChoice;
  for (const auto& ex : gen_choice_dataset(kb, 42, 48)) data.train.push_back(encode_multichoice(ex, vocab, max_len));
  Model model = Model::initialize(tiny_backbone(static_cast<int>(vocab.size()), max_len), 42);
  const Metrics m = train_and_score(model, data, 400, 2e-3);
  EXPECT_DOUBLE_EQ(m.at("accuracy"), 1.0);
}

// ---------------------------------------------------------------------------
// metrics

TEST(MicroF1, Examples) {
  PRF p = metric_micro_f1({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}});
  EXPECT_EQ(p.precision, 1.0);
  EXPECT_EQ(p.recall, 1.0);
  EXPECT_EQ(p.f1, 1.0);
  p = metric_micro_f1({{0, 0}, {0, 0}}, {{1, 0}, {1, 1}});
  EXPECT_EQ(p.precision, 0.0);
  EXPECT_EQ(p.recall, 0.0);
  EXPECT_EQ(p.f1, 0.0);
  // classes (a, b): pred {a},{a,b}; gold {a,b},{b}
  p = metric_micro_f1({{1, 0}, {1, 1}}, {{1, 1}, {0, 1}});
  EXPECT_NEAR(p.precision, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.recall, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.f1, 2.0 / 3.0, 1e-15);
  EXPECT_THROW(metric_micro_f1({{1}}, {{1, 0}}), DimensionError);
}

TEST(EmF1, Examples) {
  EMF1 m = metric_em_f1({1, 2}, {1, 2});
  EXPECT_EQ(m.em, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  m = metric_em_f1({1, 2}, {3, 4});
  EXPECT_EQ(m.em, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  m = metric_em_f1({'a', 'b', 'c'}, {'b', 'c', 'd'});
  EXPECT_EQ(m.em, 0.0);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-15);
}

TEST(TypingMetrics, StrictAccuracyAndLooseMacro) {
  Metrics m = typing_metrics({{1, 0}, {1, 1}}, {{1, 1}, {0, 1}});
  EXPECT_EQ(m.at("accuracy"), 0.0);
  // per-example precision 1 and 1/2, recall 1/2 and 1
  EXPECT_NEAR(m.at("macro_f1"), 0.75, 1e-15);
  EXPECT_NEAR(m.at("micro_f1"), 2.0 / 3.0, 1e-15);
}

TEST(SingleLabelMetrics, AccuracyAndMacroF1) {
  EXPECT_DOUBLE_EQ(accuracy({0, 1, 1, 2}, {0, 1, 2, 2}), 0.75);
  // class 0: 1; class 1: P 1/2 R 1 -> 2/3; class 2: P 1 R 1/2 -> 2/3
  EXPECT_NEAR(macro_f1({0, 1, 1, 2}, {0, 1, 2, 2}, 5), (1.0 + 2.0 / 3 + 2.0 / 3) / 3, 1e-15);
  EXPECT_THROW(accuracy({}, {}), MetricError);
}

// ---------------------------------------------------------------------------
// invariants

TEST(HeadInvariants, ArgmaxShiftInvariance) {
  std::mt19937_64 rng(9);
  Tensor logits = gradcheck::random_tensor({5, 7}, rng, -3, 3, false);
  std::vector<double> shifted(logits.data().begin(), logits.data().end());
  for (double& v : shifted) v += 123.25;
  EXPECT_EQ(argmax_rows(logits), argmax_rows(Tensor::from({5, 7}, shifted)));
  std::vector<double> s(logits.data().begin(), logits.data().begin() + 7), e(s.rbegin(), s.rend());
  auto base = decode_span(s, e, Span{1, 7});
  for (double& v : s) v -= 40.0;
  for (double& v : e) v += 2.5;
  EXPECT_EQ(decode_span(s, e, Span{1, 7}), base);
}

TEST(HeadInvariants, ShapePolymorphicInFeatureWidth) {
  // backbone only, one adapter, two adapters at desk scale
  for (std::size_t d : {64u, 128u, 256u}) {
    std::mt19937_64 rng(d);
    Tensor f = gradcheck::random_tensor({2, 6, d}, rng, -1, 1, false);
    auto rel = rows_with(6, {spans({1, 2}, {3, 5}, 1), spans({0, 1}, {2, 6}, 0)});
    EXPECT_TRUE(std::isfinite(
        ce(relation_pretrain_head(f, rel, random_head(2 * d, 16, rng, 0.05)), {1, 0}).item()));
    RowAnnotations dep;
    dep.dep_heads = {-1, 2, 0, 2, 3, -1};
    EXPECT_TRUE(std::isfinite(
        dep_head_loss(dep_head_prediction(f, random_head(d, 65, rng, 0.05), 64), rows_with(6, {dep, dep})).item()));
    auto typ = rows_with(6, {typing_row(1, {1, 0, 0, 0, 0, 1}), typing_row(2, {0, 0, 1, 0, 0, 0})});
    EXPECT_TRUE(std::isfinite(entity_typing_loss(entity_typing_head(f, typ, random_head(d, 6, rng, 0.05)), typ).item()));
    auto ft = rows_with(6, {marker_row(1, 3, 5), marker_row(0, 4, 41)});
    EXPECT_TRUE(std::isfinite(
        ce(relation_ft_head(f, ft, random_head(2 * d, 42, rng, 0.05)), {5, 41}).item()));
    auto qa = rows_with(6, {qa_row(3, 4, {2, 6}), qa_row(2, 2, {2, 5})});
    EXPECT_TRUE(std::isfinite(
        span_qa_loss(span_qa_head(f, random_head(d, 1, rng, 0.05), random_head(d, 1, rng, 0.05)), qa).item()));
    Tensor g = gradcheck::random_tensor({2, 6, d}, rng, -1, 1, false);
    EXPECT_TRUE(std::isfinite(
        ce(multichoice_head({f, g, f, g}, random_head(d, 1, rng, 0.05)), {0, 3}).item()));
  }
}

TEST(HeadInvariants, ZeroHeadsHitUniformBaselines) {
  std::mt19937_64 rng(12);
  Tensor f = gradcheck::random_tensor({2, 6, 10}, rng, -1, 1, false);
  auto rel = rows_with(6, {spans({1, 2}, {3, 5}, 1), spans({0, 1}, {2, 6}, 3)});
  EXPECT_NEAR(ce(relation_pretrain_head(f, rel, zero_head(20, 7)), {1, 3}).item(), std::log(7.0),
              1e-9);
  auto ft = rows_with(6, {marker_row(1, 3, 5), marker_row(0, 4, 41)});
  EXPECT_NEAR(ce(relation_ft_head(f, ft, zero_head(20, 42)), {5, 41}).item(), std::log(42.0), 1e-9);
  EXPECT_NEAR(ce(multichoice_head({f, f, f, f}, zero_head(10, 1)), {1, 2}).item(), std::log(4.0),
              1e-9);
}

class HeadGradients : public ::testing::TestWithParam<int> {};

TEST_P(HeadGradients, AllHeads) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  const std::size_t d = 5, l = 6;
  Tensor f = gradcheck::random_tensor({2, l, d}, rng);
  auto check = [&](const char* what, const LinearHead& h, const std::function<Tensor()>& loss) {
    auto r = gradcheck::check(loss, {f, h.weight, h.bias}, {"features", "weight", "bias"});
    EXPECT_LE(r.max_rel, 1e-4) << what << ' ' << r.worst;
  };

  auto rel = rows_with(l, {spans({1, 3}, {3, 6}, 2), spans({0, 1}, {2, 5}, 0)});
  LinearHead hr = random_head(2 * d, 3, rng);
  check("relation_pretrain", hr,
        [&] { return ce(relation_pretrain_head(f, rel, hr), batch_labels(rel)); });

  RowAnnotations dep;
  dep.dep_heads = {-1, 2, 0, 2, 3, 1};
  auto deps = rows_with(l, {dep, dep});
  LinearHead hd = random_head(d, 7, rng);
  check("dep", hd, [&] { return dep_head_loss(dep_head_prediction(f, hd, 6), deps); });

  auto typ = rows_with(l, {typing_row(1, {1, 0, 1}), typing_row(4, {0, 0, 1})});
  LinearHead ht = random_head(d, 3, rng);
  check("typing", ht, [&] { return entity_typing_loss(entity_typing_head(f, typ, ht), typ); });

  auto ft = rows_with(l, {marker_row(1, 3, 1), marker_row(0, 5, 2)});
  LinearHead hf = random_head(2 * d, 3, rng);
  check("relation_ft", hf, [&] { return ce(relation_ft_head(f, ft, hf), batch_labels(ft)); });

  auto qa = rows_with(l, {qa_row(3, 4, {2, 6}), qa_row(2, 2, {2, 5})});
  LinearHead hs = random_head(d, 1, rng), he = random_head(d, 1, rng);
  auto qa_loss = [&] { return span_qa_loss(span_qa_head(f, hs, he), qa); };
  auto r = gradcheck::check(qa_loss, {f, hs.weight, hs.bias, he.weight, he.bias});
  EXPECT_LE(r.max_rel, 1e-4) << "span_qa " << r.worst;

  Tensor g = gradcheck::random_tensor({2, l, d}, rng);
  LinearHead hm = random_head(d, 1, rng);
  auto mc_loss = [&] { return ce(multichoice_head({f, g, f}, hm), {2, 1}); };
  auto r2 = gradcheck::check(mc_loss, {f, g, hm.weight, hm.bias});
  EXPECT_LE(r2.max_rel, 1e-4) << "multichoice " << r2.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, HeadGradients, ::testing::Range(0, 20));
