// kadapter: corpus generation, adapter pre-training, fine-tuning, probing and
// the forgetting experiment from one binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid input.

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "kadapter/kadapter.hpp"

namespace fs = std::filesystem;
using namespace kadapter;

namespace {

// Held for the lifetime of a command that writes into out_dir.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".kadapter.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) throw IoError("output directory " + dir.string() + " is locked by another run (" +
                                         path_.string() + ")");
      throw IoError("cannot create lock in " + dir.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

fs::path make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  return fs::path(dir);
}

void write_text(const fs::path& p, const std::string& text) { write_file_atomic(p, text); }

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

std::uint64_t parse_seed(const std::string& s) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || s.front() == '-') throw ConfigError("KADAPTER_SEED must be an unsigned integer");
  return v;
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg = load_run_config(path);
  if (const char* env = std::getenv("KADAPTER_SEED"); env && *env) {
    cfg.seed = parse_seed(env);
    cfg.train.seed = cfg.seed;
  }
  return cfg;
}

void apply_steps(RunConfig& cfg, int steps) {
  if (steps < 0) return;
  cfg.train.total_steps = steps;
  cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, steps);
  cfg.train.validate();
}

Checkpoint load_backbone(const RunConfig& cfg) {
  if (cfg.backbone_ckpt.empty()) throw ConfigError("config.backbone_ckpt is required");
  require_file(cfg.backbone_ckpt, "backbone checkpoint");
  Checkpoint bb = load_checkpoint(cfg.backbone_ckpt);
  if (bb.metadata.value("kind", "") != "backbone") throw ConfigError(cfg.backbone_ckpt + " is not a backbone checkpoint");
  if (cfg.backbone && to_json(*cfg.backbone) != bb.metadata.at("backbone")) {
    throw ConfigError("config.backbone does not match " + cfg.backbone_ckpt);
  }
  return bb;
}

BackboneConfig backbone_of(const Checkpoint& bb) { return backbone_config_from_json(bb.metadata.at("backbone")); }

Vocab load_vocab_for(const fs::path& data, const BackboneConfig& bcfg, const RunConfig& cfg) {
  require_file(data / "vocab.txt", "vocabulary");
  Vocab v = Vocab::load(data / "vocab.txt");
  if (v.size() > static_cast<std::size_t>(bcfg.vocab_size)) {
    throw DimensionError("vocabulary has " + std::to_string(v.size()) + " tokens, backbone embeds " +
                         std::to_string(bcfg.vocab_size));
  }
  if (cfg.train.max_seq_len > bcfg.max_len) {
    throw ConfigError("train.max_seq_len exceeds the backbone's max_len");
  }
  return v;
}

std::vector<FactExample> load_facts(const fs::path& data, LabelTable& labels) {
  require_file(data / "facts.jsonl", "fact corpus");
  require_file(data / "labels.txt", "label table");
  labels = LabelTable::load(data / "labels.txt");
  const std::size_t n = labels.size();
  auto facts = load_fact_jsonl(data / "facts.jsonl", labels);
  if (labels.size() != n) throw ValidationError("facts.jsonl uses relations missing from labels.txt");
  return facts;
}

Json kb_manifest(const fs::path& data) {
  require_file(data / "kb.json", "KB manifest");
  std::ifstream in(data / "kb.json");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("kb.json: " + std::string(e.what()));
  }
}

SyntheticKb kb_from_manifest(const Json& m) {
  try {
    return gen_kb(m.at("seed").get<std::uint64_t>(), m.at("entities").get<std::size_t>(),
                  m.at("relations").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("kb.json: " + std::string(e.what()));
  }
}

// Downstream data for fine-tuning and eval.
TaskData build_task_data(const RunConfig& cfg, Task task, const Vocab& vocab) {
  const fs::path data(cfg.data_dir);
  const auto max_len = static_cast<std::size_t>(cfg.train.max_seq_len);
  switch (task) {
    case Task::RelationFt: {
      LabelTable labels;
      auto facts = load_facts(data, labels);
      return fact_task_data(facts, task, vocab, max_len, labels.size());
    }
    case Task::Typing:
      return typing_task_data(kb_from_manifest(kb_manifest(data)), cfg.seed, cfg.typing_variants, vocab, max_len);
    case Task::SpanQa:
      return qa_task_data(kb_from_manifest(kb_manifest(data)), cfg.seed, cfg.task_examples, vocab, max_len);
    case Task::MultiChoice:
      return choice_task_data(kb_from_manifest(kb_manifest(data)), cfg.seed, cfg.task_examples, vocab, max_len);
    default:
      throw ConfigError(std::string("task ") + task_name(task) + " is not a fine-tuning task");
  }
}

Json metrics_json(const Metrics& m, Task task) {
  Json j = Json::object();
  for (const auto& k : metric_keys(task)) j[k] = m.at(k);
  return j;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::uint64_t seed = 42;
  std::size_t entities = 200;
  std::size_t relations = 8;
  std::size_t examples = 2000;
  std::size_t queries = 200;
  std::string out;
  std::vector<std::string> vocabs;
  int layers = 4, hidden = 64, heads = 4, ffn = 256, max_len = 64;
  int warm_steps = 0;
  std::string warm_data;
};

Json kb_json(const GenArgs& a, const char* kind) {
  return {{"kind", kind}, {"seed", a.seed}, {"entities", a.entities}, {"relations", a.relations}};
}

int gen_fact(const GenArgs& a) {
  FactCorpus c = gen_fact_corpus(a.seed, a.entities, a.relations, a.examples);
  const fs::path out = make_out_dir(a.out);
  DirLock lock(out);
  const LabelTable labels = c.kb.relation_labels();
  const Vocab vocab = Vocab::build(c.kb.lexicon());
  write_fact_jsonl(out / "facts.jsonl", c.examples, labels);
  labels.save(out / "labels.txt");
  vocab.save(out / "vocab.txt");
  write_entities(out / "entities.txt", c.kb);
  Json m = kb_json(a, "fact");
  m["examples"] = a.examples;
  write_json(out / "kb.json", m);
  std::cout << "facts " << c.examples.size() << "\nrelations " << labels.size() << "\nvocab " << vocab.size() << "\n";
  return 0;
}

int gen_dep(const GenArgs& a) {
  auto deps = gen_dep_corpus(a.seed, a.examples);
  for (const auto& d : deps) validate_tree(d);
  const fs::path out = make_out_dir(a.out);
  DirLock lock(out);
  const Vocab vocab = Vocab::build(dep_lexicon());
  write_conllu(out / "deps.conllu", deps);
  vocab.save(out / "vocab.txt");
  std::cout << "sentences " << deps.size() << "\nvocab " << vocab.size() << "\n";
  return 0;
}

int gen_cloze(const GenArgs& a) {
  const SyntheticKb kb = gen_kb(a.seed, a.entities, a.relations);
  auto qs = gen_cloze_queries(kb, a.seed, a.queries);
  const fs::path out = make_out_dir(a.out);
  DirLock lock(out);
  write_cloze_jsonl(out / "queries.jsonl", qs);
  write_entities(out / "entities.txt", kb);
  Vocab::build(kb.lexicon()).save(out / "vocab.txt");
  write_json(out / "cloze.json", kb_json(a, "cloze"));
  std::cout << "queries " << qs.size() << "\nrelations " << kb.relations.size() << "\n";
  return 0;
}

int gen_backbone(const GenArgs& a) {
  if (a.vocabs.empty()) throw ConfigError("gen backbone needs at least one --vocab");
  BackboneConfig b;
  b.n_layers = a.layers;
  b.hidden = a.hidden;
  b.n_heads = a.heads;
  b.ffn_inner = a.ffn;
  b.max_len = a.max_len;
  b.vocab_size = 0;
  for (const auto& p : a.vocabs) {
    require_file(p, "vocabulary");
    b.vocab_size = std::max(b.vocab_size, static_cast<int>(Vocab::load(p).size()));
  }
  b.validate();
  Model model = Model::initialize(b, a.seed);
  std::vector<double> losses;
  if (a.warm_steps > 0) {
    if (a.warm_data.empty()) throw ConfigError("--warm-steps needs --warm-data");
    LabelTable labels;
    const fs::path data(a.warm_data);
    auto facts = load_facts(data, labels);
    const Vocab vocab = Vocab::load(data / "vocab.txt");
    if (vocab.size() > static_cast<std::size_t>(b.vocab_size)) throw DimensionError("warm-fit vocabulary too large");
    TrainConfig tc;
    tc.total_steps = a.warm_steps;
    tc.warmup_steps = a.warm_steps / 10;
    tc.seed = a.seed;
    losses = warm_fit_backbone(model, mlm_rows_from_facts(facts, vocab, static_cast<std::size_t>(b.max_len)), tc);
  }
  const fs::path out(a.out);
  if (out.has_parent_path()) make_out_dir(out.parent_path().string());
  save_checkpoint(backbone_checkpoint(model, a.seed), out);
  std::cout << "backbone " << out.string() << "\nvocab_size " << b.vocab_size << "\n";
  if (!losses.empty()) std::cout << "warm_fit_last_loss " << losses.back() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain / finetune / eval

int cmd_pretrain(const std::string& config_path, int steps) {
  RunConfig cfg = load_config(config_path);
  apply_steps(cfg, steps);
  const Task task = task_from_name(cfg.task);
  if (task != Task::FactPretrain && task != Task::DepPretrain) throw ConfigError("pretrain task must be fact or dep");
  if (std::find(cfg.train.freeze_prefixes.begin(), cfg.train.freeze_prefixes.end(), Backbone::kPrefix) ==
      cfg.train.freeze_prefixes.end()) {
    cfg.train.freeze_prefixes.insert(cfg.train.freeze_prefixes.begin(), Backbone::kPrefix);
  }
  const Checkpoint bb = load_backbone(cfg);
  const BackboneConfig bcfg = backbone_of(bb);
  cfg.adapter.validate(bcfg);
  const fs::path data(cfg.data_dir);
  const Vocab vocab = load_vocab_for(data, bcfg, cfg);
  const auto max_len = static_cast<std::size_t>(cfg.train.max_seq_len);
  TaskData td;
  if (task == Task::FactPretrain) {
    LabelTable labels;
    auto facts = load_facts(data, labels);
    td = fact_task_data(facts, task, vocab, max_len, labels.size());
  } else {
    require_file(data / "deps.conllu", "dependency corpus");
    td = dep_task_data(load_conllu(data / "deps.conllu"), vocab, max_len);
  }
  if (td.train.empty()) throw ConfigError("corpus has no training examples");

  const fs::path out = make_out_dir(cfg.out_dir);
  DirLock lock(out);
  write_json(out / "config.resolved.json", cfg.to_json());
  std::ofstream log(out / "loss.log");
  PretrainResult r = pretrain_adapter(bb, cfg.adapter_name, cfg.adapter, task, td, cfg.train, &log);
  log.close();
  save_checkpoint(r.adapter, out / "adapter.ckpt");
  Json m = r.dev.empty() ? Json::object() : metrics_json(r.dev, task);
  write_json(out / "metrics.json", m);
  std::cout << "adapter " << (out / "adapter.ckpt").string() << "\n" << m.dump() << "\n";
  return 0;
}

std::vector<Checkpoint> load_adapters(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> out;
  for (const auto& p : paths) {
    require_file(p, "adapter checkpoint");
    Checkpoint c = load_checkpoint(p);
    if (c.metadata.value("kind", "") != "adapter") throw ConfigError(p + " is not an adapter checkpoint");
    out.push_back(std::move(c));
  }
  return out;
}

int cmd_finetune(const std::string& config_path, const std::string& adapters, bool no_adapters, int steps) {
  RunConfig cfg = load_config(config_path);
  apply_steps(cfg, steps);
  if (no_adapters) cfg.adapters.clear();
  else if (!adapters.empty()) cfg.adapters = split_list(adapters);
  const Task task = task_from_name(cfg.task);
  if (task == Task::FactPretrain || task == Task::DepPretrain) {
    throw ConfigError("finetune task must be typing, relation, qa or multichoice");
  }
  const Checkpoint bb = load_backbone(cfg);
  const BackboneConfig bcfg = backbone_of(bb);
  const auto ads = load_adapters(cfg.adapters);
  assemble(bb, ads);  // dimension check before any output is written
  const Vocab vocab = load_vocab_for(cfg.data_dir, bcfg, cfg);
  const TaskData td = build_task_data(cfg, task, vocab);
  if (td.train.empty() || td.dev.empty()) throw ConfigError("task data has an empty split");

  const fs::path out = make_out_dir(cfg.out_dir);
  DirLock lock(out);
  write_json(out / "config.resolved.json", cfg.to_json());
  std::ofstream log(out / "loss.log");
  FinetuneResult r = finetune(bb, ads, td, cfg.train, &log);
  log.close();
  save_checkpoint(r.model, out / "model.ckpt");
  const Json m = metrics_json(r.metrics, task);
  write_json(out / "metrics.json", m);
  std::cout << m.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& model_path) {
  RunConfig cfg = load_config(config_path);
  require_file(model_path, "model checkpoint");
  const Checkpoint ckpt = load_checkpoint(model_path);
  Model model = model_from_checkpoint(ckpt);
  const Task task = task_from_name(ckpt.metadata.at("task").get<std::string>());
  const Vocab vocab = load_vocab_for(cfg.data_dir, model.backbone_config(), cfg);
  const TaskData td = build_task_data(cfg, task, vocab);
  const FeatureView view{model.adapter_names(), model.adapters().empty()};
  const Metrics m = evaluate(model, task, task_head_prefix(task), td.dev, ckpt.metadata.at("labels").get<std::size_t>(), view);
  const fs::path out = make_out_dir(cfg.out_dir);
  DirLock lock(out);
  const Json j = metrics_json(m, task);
  write_json(out / "eval_metrics.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// probe / forget / paramcount

std::vector<int> entity_candidates(const fs::path& path, const Vocab& vocab) {
  require_file(path, "entity list");
  std::ifstream in(path);
  std::vector<int> ids;
  std::string line;
  while (std::getline(in, line)) {
    const std::string name = line.substr(0, line.find('\t'));
    if (name.empty()) continue;
    if (!vocab.contains(name)) throw VocabularyError("entity '" + name + "' not in vocabulary");
    ids.push_back(vocab.id(name));
  }
  if (ids.empty()) throw ConfigError("entity list is empty");
  return ids;
}

int cmd_probe(const std::string& config_path, const std::string& adapter_path, int steps, bool all_vocab) {
  RunConfig cfg = load_config(config_path);
  apply_steps(cfg, steps);
  const Checkpoint bb = load_backbone(cfg);
  const BackboneConfig bcfg = backbone_of(bb);
  const auto ads = load_adapters({adapter_path});
  assemble(bb, ads);
  const fs::path data(cfg.data_dir);
  const Vocab vocab = load_vocab_for(data, bcfg, cfg);
  LabelTable labels;
  auto facts = load_facts(data, labels);
  const fs::path qpath = cfg.queries.empty() ? data / "queries.jsonl" : fs::path(cfg.queries);
  require_file(qpath, "queries file");
  const auto max_len = static_cast<std::size_t>(cfg.train.max_seq_len);
  const auto queries = make_queries(load_cloze_jsonl(qpath), vocab, max_len);
  std::optional<std::vector<int>> candidates;
  if (!all_vocab) candidates = entity_candidates(data / "entities.txt", vocab);

  const fs::path out = make_out_dir(cfg.out_dir);
  DirLock lock(out);
  write_json(out / "config.resolved.json", cfg.to_json());
  const ProbeReport r = probe_experiment(bb, ads.front(), mlm_rows_from_facts(facts, vocab, max_len), queries,
                                         candidates, cfg.train);
  Json j = {{"backbone_p_at_1", r.backbone_p_at_1},
            {"adapter_p_at_1", r.adapter_p_at_1},
            {"queries", queries.size()},
            {"candidates", candidates ? candidates->size() : vocab.size()}};
  write_json(out / "metrics.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

// Relations [0, R/2) against [R/2, R): the two halves share no label, and
// their templates differ, so the B phase pulls shared weights elsewhere.
std::pair<TaskData, TaskData> forgetting_pair(const std::vector<FactExample>& facts, std::size_t n_labels,
                                              const Vocab& vocab, std::size_t max_len) {
  if (n_labels < 2) throw ConfigError("forgetting needs at least 2 relations");
  std::vector<FactExample> a, b;
  for (const auto& f : facts) (static_cast<std::size_t>(f.relation) < n_labels / 2 ? a : b).push_back(f);
  return {fact_task_data(a, Task::RelationFt, vocab, max_len, n_labels),
          fact_task_data(b, Task::RelationFt, vocab, max_len, n_labels)};
}

int cmd_forget(const std::string& config_path, int steps) {
  RunConfig cfg = load_config(config_path);
  apply_steps(cfg, steps);
  const Checkpoint bb = load_backbone(cfg);
  const BackboneConfig bcfg = backbone_of(bb);
  cfg.adapter.validate(bcfg);
  const fs::path data(cfg.data_dir);
  const Vocab vocab = load_vocab_for(data, bcfg, cfg);
  LabelTable labels;
  auto facts = load_facts(data, labels);
  auto [a, b] = forgetting_pair(facts, labels.size(), vocab, static_cast<std::size_t>(cfg.train.max_seq_len));

  const fs::path out = make_out_dir(cfg.out_dir);
  DirLock lock(out);
  write_json(out / "config.resolved.json", cfg.to_json());
  const ForgettingReport r = forgetting_experiment(bb, cfg.adapter, a, b, cfg.train);
  write_json(out / "forget.json", r.to_json());
  std::cout << r.to_json().dump() << "\n";
  return 0;
}

int cmd_paramcount(bool large, const std::string& config_path) {
  BackboneConfig b;
  AdapterConfig a;
  if (large) {
    b = large_backbone_config();
    a = large_adapter_config();
  } else {
    if (config_path.empty()) throw ConfigError("paramcount needs --paper-config or --config");
    RunConfig cfg = load_config(config_path);
    if (cfg.backbone) b = *cfg.backbone;
    else b = backbone_of(load_backbone(cfg));
    a = cfg.adapter;
  }
  a.validate(b);
  const std::uint64_t formula = param_count(a, b);
  const std::uint64_t counted = enumerate_param_count(a, b);
  std::cout << "formula " << formula << "\nenumeration " << counted << "\nmatches enumeration: "
            << (formula == counted ? "true" : "false") << "\n";
  return formula == counted ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge adapters over a frozen transformer backbone"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "kadapter 1.0");

  GenArgs g;
  auto* gen = app.add_subcommand("gen", "generate a corpus or a backbone");
  gen->require_subcommand(1);
  auto add_common = [&](CLI::App* c, bool kb) {
    c->add_option("--seed", g.seed, "generator seed")->capture_default_str();
    c->add_option("--out", g.out, "output directory")->required();
    if (kb) {
      c->add_option("--entities", g.entities, "KB entities")->capture_default_str();
      c->add_option("--relations", g.relations, "KB relations")->capture_default_str();
    }
  };
  auto* gfact = gen->add_subcommand("fact", "relation-aligned sentences from a synthetic KB");
  add_common(gfact, true);
  gfact->add_option("--examples", g.examples, "sentences")->capture_default_str();
  auto* gdep = gen->add_subcommand("dep", "dependency trees from a fixed grammar");
  add_common(gdep, false);
  gdep->add_option("--examples", g.examples, "sentences")->capture_default_str();
  auto* gcloze = gen->add_subcommand("cloze", "masked-object queries");
  add_common(gcloze, true);
  gcloze->add_option("--queries", g.queries, "queries")->capture_default_str();
  auto* gbb = gen->add_subcommand("backbone", "randomly initialized backbone checkpoint");
  gbb->add_option("--seed", g.seed, "init seed")->capture_default_str();
  gbb->add_option("--out", g.out, "checkpoint path")->required();
  gbb->add_option("--vocab", g.vocabs, "vocabulary file(s); the largest sets vocab_size")->required();
  gbb->add_option("--layers", g.layers)->capture_default_str();
  gbb->add_option("--hidden", g.hidden)->capture_default_str();
  gbb->add_option("--heads", g.heads)->capture_default_str();
  gbb->add_option("--ffn", g.ffn)->capture_default_str();
  gbb->add_option("--max-len", g.max_len)->capture_default_str();
  gbb->add_option("--warm-steps", g.warm_steps, "masked-token warm-fit steps")->capture_default_str();
  gbb->add_option("--warm-data", g.warm_data, "fact corpus directory for the warm-fit");

  std::string config, adapters, model, adapter;
  int steps = -1;
  bool no_adapters = false, large = false, all_vocab = false;
  auto* pre = app.add_subcommand("pretrain", "train one adapter on fact or dep data");
  pre->add_option("--config", config)->required();
  pre->add_option("--steps", steps, "override train.total_steps");
  auto* ft = app.add_subcommand("finetune", "fine-tune on a downstream task");
  ft->add_option("--config", config)->required();
  auto* ad_opt = ft->add_option("--adapters", adapters, "comma-separated adapter checkpoints");
  ft->add_flag("--no-adapters", no_adapters, "backbone-only baseline")->excludes(ad_opt);
  ft->add_option("--steps", steps, "override train.total_steps");
  auto* ev = app.add_subcommand("eval", "re-evaluate a fine-tuned model on dev");
  ev->add_option("--config", config)->required();
  ev->add_option("--model", model)->required();
  auto* pr = app.add_subcommand("probe", "cloze P@1, backbone vs backbone+adapter");
  pr->add_option("--config", config)->required();
  pr->add_option("--adapter", adapter)->required();
  pr->add_option("--steps", steps, "override train.total_steps");
  pr->add_flag("--all-vocab", all_vocab, "rank the whole vocabulary instead of the entity list");
  auto* fg = app.add_subcommand("forget", "sequential vs adapter forgetting");
  fg->add_option("--config", config)->required();
  fg->add_option("--steps", steps, "override train.total_steps");
  auto* pc = app.add_subcommand("paramcount", "adapter parameter count");
  pc->add_flag("--paper-config", large, "large configuration");
  pc->add_option("--config", config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gfact->parsed()) return gen_fact(g);
    if (gdep->parsed()) return gen_dep(g);
    if (gcloze->parsed()) return gen_cloze(g);
    if (gbb->parsed()) return gen_backbone(g);
    if (pre->parsed()) return cmd_pretrain(config, steps);
    if (ft->parsed()) return cmd_finetune(config, adapters, no_adapters, steps);
    if (ev->parsed()) return cmd_eval(config, model);
    if (pr->parsed()) return cmd_probe(config, adapter, steps, all_vocab);
    if (fg->parsed()) return cmd_forget(config, steps);
    if (pc->parsed()) return cmd_paramcount(large, config);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
