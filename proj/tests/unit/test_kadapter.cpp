#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "kadapter/adapter.hpp"
#include "kadapter/checkpoint.hpp"
#include "kadapter/gradcheck.hpp"

using namespace kadapter;
using ndgrad::Tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

EncodedBatch make_batch(const std::vector<std::vector<int>>& rows) {
  std::vector<EncodedRow> r;
  for (const auto& ids : rows) r.push_back({ids, {}});
  return collate(r, 0);
}

struct World {
  BackboneConfig bcfg;  // desk defaults
  AdapterConfig acfg;   // desk defaults
  ParamStore store;
  World() {
    std::mt19937_64 rng(42);
    store.materialize(Backbone::layout(bcfg), rng);
  }
  void add(const std::string& name, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    store.materialize(Adapter::layout(name, acfg, bcfg), rng);
  }
  Backbone backbone() const { return Backbone(bcfg, store); }
  Adapter adapter(const std::string& name) const { return Adapter(name, acfg, bcfg, store); }
};

void randomize_up(ParamStore& store, const std::string& prefix, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& [name, t] : store.all())
    if (has_prefix(name, prefix) && name.find(".up.") != std::string::npos)
      for (double& v : t.mutable_data()) v = n(rng);
}

}  // namespace

TEST(AdapterConfig, Validation) {
  BackboneConfig b;
  AdapterConfig a;
  EXPECT_NO_THROW(a.validate(b));
  a.injection_layers = {1, 1};
  EXPECT_THROW(a.validate(b), ConfigError);
  a.injection_layers = {0, 4};
  EXPECT_THROW(a.validate(b), ConfigError);
  a = AdapterConfig{};
  a.n_heads = 5;
  EXPECT_THROW(a.validate(b), ConfigError);
  a = AdapterConfig{};
  a.up_dim = 32;
  EXPECT_THROW(a.validate(b), ConfigError);
  a = AdapterConfig{};
  a.down_dim = 16;
  EXPECT_THROW(a.validate(b), ConfigError);
}

TEST(AdapterLayer, ZeroUpProjectionIsIdentity) {
  World w;
  w.add("a", 1);
  Adapter ad = w.adapter("a");
  std::mt19937_64 rng(3);
  Tensor h = gradcheck::random_tensor({2, 5, 64}, rng, -2, 2, false);
  Tensor prev = gradcheck::random_tensor({2, 5, 64}, rng, -2, 2, false);
  Tensor out = adapter_layer_forward(h, prev, ad.layers()[0], std::vector<double>(10, 1.0));
  EXPECT_EQ(out.shape(), (ndgrad::Shape{2, 5, 64}));
  EXPECT_EQ(values(out), values(h));
}

TEST(AdapterLayer, SkipRequiresMatchingWidth) {
  World w;
  w.add("a", 1);
  Adapter ad = w.adapter("a");
  Tensor h = Tensor::zeros({1, 2, 32}), prev = Tensor::zeros({1, 2, 32});
  EXPECT_THROW(adapter_layer_forward(h, prev, ad.layers()[0], std::vector<double>(2, 1.0)), ConfigError);
}

TEST(AdapterForward, IdentityInitialization) {
  World w;
  w.add("fac", 5);
  auto batch = make_batch({{2, 9, 10, 11, 3}, {2, 12, 13}});
  HiddenStack stack = w.backbone().encode(batch);
  AdapterOutput out = w.adapter("fac").forward(stack);
  ASSERT_EQ(out.per_layer.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(values(out.per_layer[k]), values(stack.after_layer(w.acfg.injection_layers[k])));
  Tensor expect = ndgrad::concat_lastdim({stack.last(), stack.after_layer(3)});
  EXPECT_EQ(out.final.shape(), (ndgrad::Shape{2, 5, 128}));
  EXPECT_EQ(values(out.final), values(expect));
}

TEST(AdapterForward, InjectionOutsideStack) {
  World w;
  w.add("fac", 5);
  HiddenStack stack = w.backbone().encode(make_batch({{2, 9}}));
  stack.states.resize(3);
  EXPECT_THROW(w.adapter("fac").forward(stack), ConfigError);
}

TEST(AdapterForward, TrainingAdapterLeavesStackAndBackboneUntouched) {
  World w;
  w.add("fac", 5);
  w.store.apply_freeze({"backbone."});
  auto batch = make_batch({{2, 9, 10, 11}});
  const std::string before = serialize_checkpoint({{}, w.store.subset("backbone.")});
  HiddenStack s0 = w.backbone().encode(batch);
  const auto final0 = values(w.adapter("fac").forward(s0).final);
  for (int step = 0; step < 3; ++step) {
    AdapterOutput out = w.adapter("fac").forward(w.backbone().encode(batch));
    ndgrad::backward(ndgrad::sum(ndgrad::gelu(out.final)));
    for (auto& [name, t] : w.store.all()) {
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 0.1 * g[i];
    }
    w.store.clear_grads();
  }
  HiddenStack s1 = w.backbone().encode(batch);
  for (std::size_t k = 0; k < s0.states.size(); ++k) EXPECT_EQ(values(s0.states[k]), values(s1.states[k]));
  EXPECT_NE(values(w.adapter("fac").forward(s1).final), final0);
  EXPECT_EQ(serialize_checkpoint({{}, w.store.subset("backbone.")}), before);
}

TEST(AdapterForward, OtherAdapterTrainingDoesNotMoveThisOne) {
  World w;
  w.add("a", 5);
  w.add("b", 6);
  randomize_up(w.store, "adapter.a.", 1);
  w.store.apply_freeze({"backbone.", "adapter.a."});
  auto batch = make_batch({{2, 9, 10, 11}, {2, 4, 5}});
  const auto a0 = values(w.adapter("a").forward(w.backbone().encode(batch)).final);
  const std::string bytes0 = serialize_checkpoint({{}, w.store.subset("adapter.a.")});
  for (int step = 0; step < 3; ++step) {
    HiddenStack s = w.backbone().encode(batch);
    Tensor f = fuse({w.adapter("a").forward(s), w.adapter("b").forward(s)});
    ndgrad::backward(ndgrad::sum(ndgrad::gelu(f)));
    for (auto& [name, t] : w.store.all()) {
      if (!t.has_grad()) continue;
      EXPECT_TRUE(has_prefix(name, "adapter.b.")) << name;
      auto g = t.grad();
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 0.1 * g[i];
    }
    w.store.clear_grads();
  }
  EXPECT_EQ(values(w.adapter("a").forward(w.backbone().encode(batch)).final), a0);
  EXPECT_EQ(serialize_checkpoint({{}, w.store.subset("adapter.a.")}), bytes0);
}

TEST(Fuse, WidthsAndOrder) {
  World w;
  w.add("a", 5);
  w.add("b", 6);
  randomize_up(w.store, "adapter.", 2);
  HiddenStack s = w.backbone().encode(make_batch({{2, 7, 8}}));
  AdapterOutput a = w.adapter("a").forward(s), b = w.adapter("b").forward(s);
  EXPECT_EQ(values(fuse({a})), values(a.final));
  EXPECT_EQ(fuse({a}).dim(2), 128u);
  Tensor ab = fuse({a, b}), ba = fuse({b, a});
  EXPECT_EQ(ab.dim(2), 256u);
  EXPECT_NE(values(ab), values(ba));
  auto sa = values(ab), sb = values(ba);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  EXPECT_EQ(sa, sb);
  EXPECT_THROW(fuse({}), ArgumentError);
}

TEST(Fuse, LargeConfigWidth) {
  // Two large-config outputs: 2 x (1024 + 1024).
  AdapterOutput f{Tensor::zeros({1, 1, 2048}), {}};
  AdapterOutput l{Tensor::zeros({1, 1, 2048}), {}};
  EXPECT_EQ(fuse({f, l}).dim(2), 4096u);
}

TEST(ParamCount, AllOnes) {
  BackboneConfig b;
  b.hidden = 1;
  b.n_heads = 1;
  AdapterConfig a;
  a.injection_layers = {0};
  a.n_inner = 0;
  a.hidden = a.n_heads = a.down_dim = a.up_dim = a.ffn_inner = 1;
  EXPECT_EQ(param_count(a, b), 5u);
  EXPECT_EQ(enumerate_param_count(a, b), 5u);
}

TEST(ParamCount, DeskConfigMatchesEnumeration) {
  BackboneConfig b;
  AdapterConfig a;
  EXPECT_EQ(param_count(a, b), 56832u);
  EXPECT_EQ(enumerate_param_count(a, b), 56832u);
  World w;
  w.add("fac", 1);
  EXPECT_EQ(w.store.numel("adapter.fac."), 56832u);
}

TEST(ParamCount, LargeConfigNearFortyTwoMillion) {
  BackboneConfig b;
  b.n_layers = 24;
  b.hidden = 1024;
  b.n_heads = 16;
  b.ffn_inner = 4096;
  AdapterConfig a;
  a.injection_layers = {0, 11, 23};
  a.n_inner = 2;
  a.hidden = a.down_dim = 768;
  a.n_heads = 12;
  a.up_dim = 1024;
  a.ffn_inner = 3072;
  const std::uint64_t n = param_count(a, b);
  EXPECT_EQ(n, 49610496u);
  EXPECT_EQ(enumerate_param_count(a, b), n);
  EXPECT_GE(n, 31500000u);
  EXPECT_LE(n, 52500000u);
}

class AdapterGradients : public ::testing::TestWithParam<int> {};

TEST_P(AdapterGradients, FullAdapterLayer) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  BackboneConfig b;
  b.hidden = 8;
  b.n_heads = 2;
  AdapterConfig a;
  a.injection_layers = {0};
  a.hidden = a.down_dim = 4;
  a.n_heads = 2;
  a.up_dim = 8;
  a.ffn_inner = 6;
  ParamStore store;
  std::mt19937_64 rng(seed);
  store.materialize(Adapter::layout("g", a, b), rng, 0.5);
  randomize_up(store, "adapter.g.", seed + 1);
  Adapter ad("g", a, b, store);
  Tensor h = gradcheck::random_tensor({2, 3, 8}, rng);
  Tensor prev = gradcheck::random_tensor({2, 3, 8}, rng);
  std::vector<double> mask{1, 1, 1, 1, 1, 0};
  auto w = gradcheck::random_weights(48, rng);
  std::vector<Tensor> inputs{h, prev};
  std::vector<std::string> names{"h", "prev"};
  for (auto& [name, t] : store.all()) {
    inputs.push_back(t);
    names.push_back(name);
  }
  auto r = gradcheck::check(
      [&] { return gradcheck::weighted_sum(adapter_layer_forward(h, prev, ad.layers()[0], mask), w); }, inputs, names);
  EXPECT_LE(r.max_rel, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Seeds, AdapterGradients, ::testing::Range(0, 20));
