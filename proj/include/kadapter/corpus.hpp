#pragma once

// Tokenization, dataset files, synthetic corpora, and the per-task input
// encoders that insert entity markers and separators.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "kadapter/batch.hpp"
#include "kadapter/errors.hpp"

namespace kadapter {

// ---------------------------------------------------------------------------
// Vocabulary

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[BOS]", "[SEP]",
                                                     "[MASK]", "@", "#"};
  return specials;
}

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kAt = 5;
  static constexpr int kHash = 6;
  static constexpr int kNumSpecial = 7;

  Vocab() {
    for (const auto& s : special_tokens()) push(s);
  }

  // Specials followed by the given words, deduplicated, in sorted order.
  static Vocab build(const std::vector<std::string>& words) {
    Vocab v;
    std::set<std::string> sorted(words.begin(), words.end());
    for (const auto& w : sorted) v.add(w);
    return v;
  }

  int add(const std::string& word) {
    if (is_special(word)) throw VocabularyError("cannot add special token as a word: " + word);
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    return push(word);
  }

  // Unknown words map to [UNK]; special spellings never come from text.
  int id(const std::string& word) const {
    if (is_special(word)) return kUnk;
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const {
    return !is_special(word) && index_.count(word) > 0;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }

  static bool is_special(const std::string& word) {
    const auto& s = special_tokens();
    return std::find(s.begin(), s.end(), word) != s.end();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Vocab v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (n < static_cast<std::size_t>(kNumSpecial)) {
        if (line != special_tokens()[n]) {
          throw ParseError(path.string() + ":" + std::to_string(n + 1) +
                           ": expected special token " + special_tokens()[n]);
        }
      } else if (!line.empty()) {
        if (v.index_.count(line)) {
          throw ParseError(path.string() + ":" + std::to_string(n + 1) +
                           ": duplicate token " + line);
        }
        v.push(line);
      }
      ++n;
    }
    if (n < static_cast<std::size_t>(kNumSpecial)) {
      throw ParseError(path.string() + ": missing special tokens");
    }
    return v;
  }

 private:
  int push(const std::string& word) {
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(lowercase(w));
  return words;
}

inline std::vector<int> to_ids(const std::vector<std::string>& words, const Vocab& vocab) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  return ids;
}

inline std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
  return to_ids(split_words(text), vocab);
}

inline std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& words, std::size_t begin = 0,
                        std::size_t end = std::string::npos) {
  end = std::min(end, words.size());
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label table: line number (0-based) is the label id.

class LabelTable {
 public:
  int intern(const std::string& name) {
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(names_.size());
    names_.push_back(name);
    index_.emplace(name, id);
    return id;
  }

  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown label: " + name);
    return it->second;
  }

  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& n : names_) out << n << '\n';
  }

  static LabelTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    LabelTable t;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (t.index_.count(line)) throw ParseError(path.string() + ": duplicate label " + line);
      t.intern(line);
    }
    return t;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Examples

struct FactExample {
  std::vector<std::string> tokens;
  Span subj;
  Span obj;
  int relation = -1;
};

inline void validate_fact(const FactExample& ex) {
  const auto n = ex.tokens.size();
  for (const Span* s : {&ex.subj, &ex.obj}) {
    if (s->begin >= s->end || s->end > n) {
      throw ValidationError("entity span [" + std::to_string(s->begin) + "," +
                            std::to_string(s->end) + ") invalid for " + std::to_string(n) +
                            " tokens");
    }
  }
  if (ex.subj.begin < ex.obj.end && ex.obj.begin < ex.subj.end) {
    throw ValidationError("subject and object spans overlap");
  }
}

struct DepExample {
  std::vector<std::string> tokens;
  std::vector<int> heads;  // 1-based head per token, 0 = root
  std::vector<std::string> tags;
};

// Single root, heads in range, no self-loops, no cycles.
inline void validate_tree(const DepExample& ex, const std::string& where = "") {
  const std::size_t n = ex.tokens.size();
  const std::string ctx = where.empty() ? std::string("sentence") : where;
  if (n == 0) throw ValidationError(ctx + ": empty sentence");
  if (ex.heads.size() != n) throw ValidationError(ctx + ": head count differs from token count");
  int roots = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int h = ex.heads[i];
    if (h < 0 || static_cast<std::size_t>(h) > n) {
      throw ValidationError(ctx + ": head " + std::to_string(h) + " out of range");
    }
    if (static_cast<std::size_t>(h) == i + 1) throw ValidationError(ctx + ": token is its own head");
    roots += h == 0;
  }
  if (roots != 1) {
    throw ValidationError(ctx + ": expected exactly one root, found " + std::to_string(roots));
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t cur = i + 1, steps = 0;
    while (cur != 0) {
      cur = static_cast<std::size_t>(ex.heads[cur - 1]);
      if (++steps > n) throw ValidationError(ctx + ": head assignment contains a cycle");
    }
  }
}

// ---------------------------------------------------------------------------
// Fact JSONL: {"text": ..., "subj": [s, e], "obj": [s, e], "relation": ...}
// with token offsets into the whitespace-split text.

inline Span parse_span(const nlohmann::json& j, const char* field) {
  if (!j.contains(field) || !j[field].is_array() || j[field].size() != 2 ||
      !j[field][0].is_number_integer() || !j[field][1].is_number_integer()) {
    throw ParseError(std::string("field '") + field + "' must be [start, end]");
  }
  const auto s = j[field][0].get<long long>();
  const auto e = j[field][1].get<long long>();
  if (s < 0 || e < 0) throw ValidationError(std::string("negative offset in '") + field + "'");
  return {static_cast<std::size_t>(s), static_cast<std::size_t>(e)};
}

// Relations with fewer than min_count examples are dropped before interning.
inline std::vector<FactExample> load_fact_jsonl(const std::filesystem::path& path,
                                                LabelTable& labels,
                                                std::size_t min_count = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<FactExample, std::string>> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
          !j.contains("relation") || !j["relation"].is_string()) {
        throw ParseError("expected object with string fields text and relation");
      }
      FactExample ex;
      ex.tokens = split_words(j["text"].get<std::string>());
      ex.subj = parse_span(j, "subj");
      ex.obj = parse_span(j, "obj");
      validate_fact(ex);
      raw.emplace_back(std::move(ex), j["relation"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": malformed line: " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& [ex, rel] : raw) ++counts[rel];
  std::vector<FactExample> out;
  for (auto& [ex, rel] : raw) {
    if (counts[rel] < min_count) continue;
    ex.relation = labels.intern(rel);
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_fact_jsonl(const std::filesystem::path& path,
                             const std::vector<FactExample>& examples, const LabelTable& labels) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["text"] = join(ex.tokens);
    j["subj"] = {ex.subj.begin, ex.subj.end};
    j["obj"] = {ex.obj.begin, ex.obj.end};
    j["relation"] = labels.name(ex.relation);
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// CoNLL-U (10 tab-separated columns; FORM and HEAD are used)

inline std::vector<DepExample> load_conllu(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<DepExample> out;
  DepExample cur;
  std::size_t line_no = 0, sentence_line = 0;
  auto flush = [&]() {
    if (cur.tokens.empty()) return;
    validate_tree(cur, path.string() + ": sentence starting at line " +
                           std::to_string(sentence_line));
    out.push_back(std::move(cur));
    cur = DepExample{};
  };
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 10) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 10 columns, got " +
                       std::to_string(cols.size()));
    }
    // Multi-word ranges (1-2) and empty nodes (1.1) are skipped.
    if (cols[0].find_first_of("-.") != std::string::npos) continue;
    if (cur.tokens.empty()) sentence_line = line_no;
    int head = 0;
    try {
      std::size_t used = 0;
      head = std::stoi(cols[6], &used);
      if (used != cols[6].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad HEAD '" + cols[6] + "'");
    }
    cur.tokens.push_back(lowercase(cols[1]));
    cur.tags.push_back(cols[3]);
    cur.heads.push_back(head);
  }
  flush();
  return out;
}

inline void write_conllu(const std::filesystem::path& path, const std::vector<DepExample>& examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t s = 0; s < examples.size(); ++s) {
    const auto& ex = examples[s];
    out << "# sent_id = " << (s + 1) << '\n';
    out << "# text = " << join(ex.tokens) << '\n';
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      const std::string tag = i < ex.tags.size() ? ex.tags[i] : "_";
      out << (i + 1) << '\t' << ex.tokens[i] << "\t_\t" << tag << "\t_\t_\t" << ex.heads[i]
          << "\t_\t_\t_\n";
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits: deterministic hash of the example (or entity) index, 80/10/10.

enum class Split { Train, Dev, Test };

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline Split split_of(std::size_t index) {
  const auto bucket = mix64(index) % 10;
  if (bucket < 8) return Split::Train;
  return bucket == 8 ? Split::Dev : Split::Test;
}

template <class T>
std::vector<T> take_split(const std::vector<T>& all, Split which) {
  std::vector<T> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (split_of(i) == which) out.push_back(all[i]);
  }
  return out;
}

// Portable bounded draw; std distributions are implementation-defined.
inline std::size_t draw(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw(rng, i)]);
}

// ---------------------------------------------------------------------------
// Synthetic knowledge base.
//
// Every entity has one of eight types. Relation r links subjects of type
// r mod 8 to objects of type (r + 3) mod 8, and relations 2m and 2m+1 share a
// surface template, so telling them apart requires knowing the entities'
// types. Each (subject, relation) pair has exactly one object.

inline const std::vector<std::string>& entity_type_names() {
  static const std::vector<std::string> names = {"person",   "city",     "company", "team",
                                                 "language", "festival", "river",   "award"};
  return names;
}

inline constexpr std::size_t kNumEntityTypes = 8;
inline constexpr std::size_t kRelationsPerTemplate = 2;

inline const std::vector<std::vector<std::string>>& relation_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"is", "linked", "to"},  {"was", "seen", "near"},   {"works", "with"},
      {"comes", "from"},       {"belongs", "to"},         {"is", "known", "for"},
      {"talks", "about"},      {"stands", "beside"},      {"points", "at"},
      {"depends", "on"},       {"was", "named", "after"}, {"rivals"},
      {"follows"},             {"hosts"},                 {"supports"},
      {"remembers"}};
  return t;
}

inline const std::vector<std::vector<std::string>>& sentence_prefixes() {
  static const std::vector<std::vector<std::string>> p = {
      {}, {"yesterday"}, {"reportedly"}, {"in", "fact"}, {"we", "read", "that"}, {"it", "seems"}};
  return p;
}

inline const std::vector<std::vector<std::string>>& sentence_suffixes() {
  static const std::vector<std::vector<std::string>> s = {
      {}, {"today"}, {"again"}, {"as", "expected"}, {"once", "more"}};
  return s;
}

// Neutral contexts for typing; "_" marks where the entity goes.
inline const std::vector<std::vector<std::string>>& typing_contexts() {
  static const std::vector<std::vector<std::string>> c = {
      {"_", "appeared", "in", "the", "story"},
      {"people", "mentioned", "_", "today"},
      {"the", "report", "names", "_"},
      {"_", "was", "mentioned", "again"},
      {"everyone", "heard", "of", "_"},
      {"a", "note", "about", "_", "arrived"}};
  return c;
}

struct Relation {
  std::string name;
  std::size_t subj_type;
  std::size_t obj_type;
  std::size_t template_id;
};

struct Triple {
  std::size_t subj;
  std::size_t relation;
  std::size_t obj;
};

struct SyntheticKb {
  std::vector<std::string> entities;
  std::vector<std::size_t> entity_type;
  std::vector<Relation> relations;
  std::vector<Triple> triples;

  std::vector<std::size_t> entities_of_type(std::size_t type) const {
    std::vector<std::size_t> out;
    for (std::size_t e = 0; e < entities.size(); ++e)
      if (entity_type[e] == type) out.push_back(e);
    return out;
  }

  const std::vector<std::string>& template_words(std::size_t relation) const {
    const auto& all = relation_templates();
    return all[relations.at(relation).template_id % all.size()];
  }

  LabelTable relation_labels() const {
    LabelTable t;
    for (const auto& r : relations) t.intern(r.name);
    return t;
  }

  // Every word any generator built on this KB can emit.
  std::vector<std::string> lexicon() const {
    std::vector<std::string> words(entities.begin(), entities.end());
    for (std::size_t r = 0; r < relations.size(); ++r)
      for (const auto& w : template_words(r)) words.push_back(w);
    for (const auto& group : {sentence_prefixes(), sentence_suffixes(), typing_contexts()})
      for (const auto& phrase : group)
        for (const auto& w : phrase)
          if (w != "_") words.push_back(w);
    words.push_back(".");
    return words;
  }
};

inline SyntheticKb gen_kb(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations) {
  if (n_relations < 2) throw ConfigError("need at least 2 relations");
  if (n_entities < kNumEntityTypes) {
    throw ConfigError("need at least " + std::to_string(kNumEntityTypes) + " entities");
  }
  std::mt19937_64 rng(seed);
  SyntheticKb kb;
  std::vector<std::size_t> order(n_entities);
  for (std::size_t i = 0; i < n_entities; ++i) order[i] = i;
  shuffle_in_place(order, rng);
  kb.entity_type.assign(n_entities, 0);
  for (std::size_t i = 0; i < n_entities; ++i) {
    kb.entities.push_back("e" + std::to_string(i));
    kb.entity_type[order[i]] = i % kNumEntityTypes;
  }
  for (std::size_t r = 0; r < n_relations; ++r) {
    kb.relations.push_back({"rel_" + std::to_string(r), r % kNumEntityTypes,
                            (r + 3) % kNumEntityTypes, r / kRelationsPerTemplate});
  }
  for (std::size_t r = 0; r < n_relations; ++r) {
    const auto objects = kb.entities_of_type(kb.relations[r].obj_type);
    for (std::size_t s : kb.entities_of_type(kb.relations[r].subj_type)) {
      std::size_t o = objects[draw(rng, objects.size())];
      kb.triples.push_back({s, r, o});
    }
  }
  return kb;
}

struct FactCorpus {
  SyntheticKb kb;
  std::vector<FactExample> examples;
};

inline FactExample render_triple(const SyntheticKb& kb, const Triple& t, std::mt19937_64& rng) {
  const auto& pre = sentence_prefixes()[draw(rng, sentence_prefixes().size())];
  const auto& suf = sentence_suffixes()[draw(rng, sentence_suffixes().size())];
  FactExample ex;
  ex.tokens = pre;
  ex.subj = {ex.tokens.size(), ex.tokens.size() + 1};
  ex.tokens.push_back(kb.entities[t.subj]);
  for (const auto& w : kb.template_words(t.relation)) ex.tokens.push_back(w);
  ex.obj = {ex.tokens.size(), ex.tokens.size() + 1};
  ex.tokens.push_back(kb.entities[t.obj]);
  ex.tokens.insert(ex.tokens.end(), suf.begin(), suf.end());
  ex.relation = static_cast<int>(t.relation);
  return ex;
}

// Examples cycle through a seeded permutation of the triples, so every
// triple (and every relation) is covered once n_examples >= #triples.
inline FactCorpus gen_fact_corpus(std::uint64_t seed, std::size_t n_entities,
                                  std::size_t n_relations, std::size_t n_examples) {
  FactCorpus corpus{gen_kb(seed, n_entities, n_relations), {}};
  std::mt19937_64 rng(mix64(seed) ^ 0xFAC7ULL);
  std::vector<std::size_t> perm(corpus.kb.triples.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t k = 0; k < n_examples; ++k) {
    if (k % perm.size() == 0) shuffle_in_place(perm, rng);
    corpus.examples.push_back(render_triple(corpus.kb, corpus.kb.triples[perm[k % perm.size()]], rng));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Downstream datasets derived from the KB

struct TypingExample {
  std::vector<std::string> tokens;
  Span entity;
  std::vector<double> types;  // multi-hot over the 8 entity types
  std::size_t entity_id = 0;
};

// `variants` sentences per entity. Split membership is decided per entity,
// so no dev entity is ever seen during typing training.
inline std::vector<TypingExample> gen_typing_dataset(const SyntheticKb& kb, std::uint64_t seed,
                                                     std::size_t variants, Split which) {
  std::mt19937_64 rng(mix64(seed) ^ 0x7E9EULL);
  std::vector<TypingExample> out;
  for (std::size_t e = 0; e < kb.entities.size(); ++e) {
    for (std::size_t v = 0; v < variants; ++v) {
      const auto& ctx = typing_contexts()[draw(rng, typing_contexts().size())];
      if (split_of(e) != which) continue;
      TypingExample ex;
      for (const auto& w : ctx) {
        if (w == "_") {
          ex.entity = {ex.tokens.size(), ex.tokens.size() + 1};
          ex.tokens.push_back(kb.entities[e]);
        } else {
          ex.tokens.push_back(w);
        }
      }
      ex.types.assign(kNumEntityTypes, 0.0);
      ex.types[kb.entity_type[e]] = 1.0;
      ex.entity_id = e;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

struct QaExample {
  std::vector<std::string> question;
  std::vector<std::string> paragraph;
  Span answer;  // within paragraph
};

// Copy task: the question repeats "subject template" of one paragraph
// sentence; the answer is that sentence's object, present exactly once.
inline std::vector<QaExample> gen_qa_dataset(const SyntheticKb& kb, std::uint64_t seed,
                                             std::size_t n, std::size_t sentences = 3) {
  std::mt19937_64 rng(mix64(seed) ^ 0x0A0AULL);
  std::vector<QaExample> out;
  while (out.size() < n) {
    std::vector<Triple> picked;
    std::set<std::size_t> used;
    std::size_t guard = 0;
    while (picked.size() < sentences && guard++ < 1000) {
      const Triple& t = kb.triples[draw(rng, kb.triples.size())];
      if (used.count(t.subj) || used.count(t.obj)) continue;
      used.insert(t.subj);
      used.insert(t.obj);
      picked.push_back(t);
    }
    if (picked.size() < sentences) throw ConfigError("KB too small for QA paragraphs");
    const std::size_t target = draw(rng, picked.size());
    QaExample ex;
    for (std::size_t i = 0; i < picked.size(); ++i) {
      ex.paragraph.push_back(kb.entities[picked[i].subj]);
      for (const auto& w : kb.template_words(picked[i].relation)) ex.paragraph.push_back(w);
      if (i == target) ex.answer = {ex.paragraph.size(), ex.paragraph.size() + 1};
      ex.paragraph.push_back(kb.entities[picked[i].obj]);
      ex.paragraph.push_back(".");
    }
    ex.question.push_back(kb.entities[picked[target].subj]);
    for (const auto& w : kb.template_words(picked[target].relation)) ex.question.push_back(w);
    out.push_back(std::move(ex));
  }
  return out;
}

struct ChoiceExample {
  std::vector<std::string> context;
  std::vector<std::string> question;
  std::vector<std::vector<std::string>> choices;
  int label = 0;
};

inline std::vector<ChoiceExample> gen_choice_dataset(const SyntheticKb& kb, std::uint64_t seed,
                                                     std::size_t n, std::size_t n_choices = 4) {
  if (n_choices < 2) throw ArgumentError("multiple choice needs at least 2 choices");
  if (kb.entities.size() < n_choices + 2) throw ConfigError("KB too small for multiple choice");
  std::mt19937_64 rng(mix64(seed) ^ 0xC401CEULL);
  std::vector<ChoiceExample> out;
  for (std::size_t k = 0; k < n; ++k) {
    const Triple& t = kb.triples[draw(rng, kb.triples.size())];
    ChoiceExample ex;
    ex.context.push_back(kb.entities[t.subj]);
    for (const auto& w : kb.template_words(t.relation)) ex.context.push_back(w);
    ex.context.push_back(kb.entities[t.obj]);
    ex.question.push_back(kb.entities[t.subj]);
    for (const auto& w : kb.template_words(t.relation)) ex.question.push_back(w);
    std::set<std::size_t> taken{t.subj, t.obj};
    std::vector<std::size_t> options{t.obj};
    while (options.size() < n_choices) {
      const std::size_t e = draw(rng, kb.entities.size());
      if (taken.insert(e).second) options.push_back(e);
    }
    shuffle_in_place(options, rng);
    for (std::size_t i = 0; i < options.size(); ++i) {
      ex.choices.push_back({kb.entities[options[i]]});
      if (options[i] == t.obj) ex.label = static_cast<int>(i);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

struct ClozeRecord {
  std::vector<std::string> tokens;  // contains "[MASK]" exactly once
  std::string answer;
  std::string relation;
};

// Round-robin over relations so every relation gets queries.
inline std::vector<ClozeRecord> gen_cloze_queries(const SyntheticKb& kb, std::uint64_t seed,
                                                  std::size_t n) {
  std::mt19937_64 rng(mix64(seed) ^ 0xC102EULL);
  std::vector<std::vector<std::size_t>> by_relation(kb.relations.size());
  for (std::size_t i = 0; i < kb.triples.size(); ++i)
    by_relation[kb.triples[i].relation].push_back(i);
  std::vector<ClozeRecord> out;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& pool = by_relation[k % by_relation.size()];
    const Triple& t = kb.triples[pool[draw(rng, pool.size())]];
    FactExample ex = render_triple(kb, t, rng);
    ex.tokens[ex.obj.begin] = "[MASK]";
    out.push_back({ex.tokens, kb.entities[t.obj], kb.relations[t.relation].name});
  }
  return out;
}

inline void write_entities(const std::filesystem::path& path, const SyntheticKb& kb) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t e = 0; e < kb.entities.size(); ++e) {
    out << kb.entities[e] << '\t' << entity_type_names()[kb.entity_type[e]] << '\n';
  }
}

inline void write_cloze_jsonl(const std::filesystem::path& path,
                              const std::vector<ClozeRecord>& queries) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& q : queries) {
    nlohmann::json j;
    j["text"] = join(q.tokens);
    j["answer"] = q.answer;
    j["relation"] = q.relation;
    out << j.dump() << '\n';
  }
}

// Queries file: {"text": "... [MASK] ...", "answer": ..., "relation": ...}.
// "[MASK]" is matched before lowercasing.
inline std::vector<ClozeRecord> load_cloze_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ClozeRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": malformed line: " + e.what());
    }
    if (!j.is_object() || !j.value("text", nlohmann::json()).is_string() ||
        !j.value("answer", nlohmann::json()).is_string() ||
        !j.value("relation", nlohmann::json()).is_string()) {
      throw ParseError(where + ": expected string fields text, answer, relation");
    }
    ClozeRecord q;
    std::istringstream words(j["text"].get<std::string>());
    std::string w;
    std::size_t masks = 0;
    while (words >> w) {
      if (w == "[MASK]") {
        ++masks;
        q.tokens.push_back(w);
      } else {
        q.tokens.push_back(lowercase(w));
      }
    }
    if (masks != 1) {
      throw QueryError(where + ": query must contain [MASK] exactly once, found " +
                       std::to_string(masks));
    }
    q.answer = lowercase(j["answer"].get<std::string>());
    q.relation = j["relation"].get<std::string>();
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dependency grammar:
//   S  -> NP VERB_i [ADV] | NP VERB_t NP [ADV]
//   NP -> DET [ADJ] NOUN
// det -> noun, adj -> noun, subject and object nouns -> verb, adv -> verb,
// verb -> root.

namespace grammar {
inline const std::vector<std::string> kDets = {"the", "a", "every", "some", "this"};
inline const std::vector<std::string> kAdjs = {"big", "small", "red", "old", "quiet", "happy"};
inline const std::vector<std::string> kNouns = {"cat",   "dog",   "bird",    "man",    "woman",
                                                "child", "horse", "teacher", "farmer", "king"};
inline const std::vector<std::string> kVerbsIntrans = {"sleeps", "runs", "waits", "smiles", "falls"};
inline const std::vector<std::string> kVerbsTrans = {"sees",  "likes", "follows",
                                                     "helps", "finds", "calls"};
inline const std::vector<std::string> kAdvs = {"quickly", "slowly", "often", "quietly"};
}  // namespace grammar

inline std::vector<std::string> dep_lexicon() {
  std::vector<std::string> words;
  for (const auto* group : {&grammar::kDets, &grammar::kAdjs, &grammar::kNouns,
                            &grammar::kVerbsIntrans, &grammar::kVerbsTrans, &grammar::kAdvs})
    words.insert(words.end(), group->begin(), group->end());
  return words;
}

inline std::vector<DepExample> gen_dep_corpus(std::uint64_t seed, std::size_t n_examples) {
  using namespace grammar;
  std::mt19937_64 rng(mix64(seed) ^ 0xDE9ULL);
  auto pick = [&](const std::vector<std::string>& v) { return v[draw(rng, v.size())]; };
  std::vector<DepExample> out;
  for (std::size_t k = 0; k < n_examples; ++k) {
    DepExample ex;
    // Appends an NP; returns the 1-based position of its noun. Dependents
    // get their head patched once the noun position is known.
    auto noun_phrase = [&]() {
      const std::size_t start = ex.tokens.size();
      ex.tokens.push_back(pick(kDets));
      ex.tags.push_back("DET");
      if (draw(rng, 2) == 0) {
        ex.tokens.push_back(pick(kAdjs));
        ex.tags.push_back("ADJ");
      }
      ex.tokens.push_back(pick(kNouns));
      ex.tags.push_back("NOUN");
      const int noun = static_cast<int>(ex.tokens.size());
      for (std::size_t i = start; i + 1 < ex.tokens.size(); ++i) ex.heads.push_back(noun);
      ex.heads.push_back(-1);  // patched by caller
      return noun;
    };
    const int subj = noun_phrase();
    const bool transitive = draw(rng, 2) == 0;
    ex.tokens.push_back(transitive ? pick(kVerbsTrans) : pick(kVerbsIntrans));
    ex.tags.push_back("VERB");
    ex.heads.push_back(0);
    const int verb = static_cast<int>(ex.tokens.size());
    ex.heads[static_cast<std::size_t>(subj - 1)] = verb;
    if (transitive) {
      const int obj = noun_phrase();
      ex.heads[static_cast<std::size_t>(obj - 1)] = verb;
    }
    if (draw(rng, 3) == 0) {
      ex.tokens.push_back(pick(kAdvs));
      ex.tags.push_back("ADV");
      ex.heads.push_back(verb);
    }
    validate_tree(ex);
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task encoders

enum class Task { Typing, RelationFt, SpanQa, MultiChoice, FactPretrain, DepPretrain };

namespace detail {

// Keeps [BOS] and a body window of max_len-1 tokens that contains the body
// region [need_begin, need_end); returns the number of body tokens dropped
// from the front.
inline std::size_t fit_window(std::vector<int>& body, std::size_t need_begin, std::size_t need_end,
                              std::size_t max_len) {
  if (max_len < 2) throw LengthError("max_len must be at least 2");
  const std::size_t window = max_len - 1;
  if (body.size() <= window) return 0;
  if (need_end - need_begin > window) {
    throw LengthError("entity markers do not fit in " + std::to_string(max_len) + " tokens");
  }
  const std::size_t start = need_end > window ? need_end - window : 0;
  body = std::vector<int>(body.begin() + static_cast<std::ptrdiff_t>(start),
                          body.begin() + static_cast<std::ptrdiff_t>(start + window));
  return start;
}

}  // namespace detail

// [BOS] tokens with '@' around the subject and '#' around the object. For
// fact pre-training the entity spans cover the markers; for relation
// fine-tuning they cover only the entity tokens.
inline EncodedRow encode_fact(const FactExample& ex, Task task, const Vocab& vocab,
                              std::size_t max_len) {
  if (task != Task::FactPretrain && task != Task::RelationFt) {
    throw ArgumentError("encode_fact: task must be fact pre-training or relation fine-tuning");
  }
  validate_fact(ex);
  std::vector<int> body;
  std::size_t subj_at = 0, subj_close = 0, obj_at = 0, obj_close = 0;
  for (std::size_t i = 0; i <= ex.tokens.size(); ++i) {
    if (i == ex.subj.end) {
      subj_close = body.size();
      body.push_back(Vocab::kAt);
    }
    if (i == ex.obj.end) {
      obj_close = body.size();
      body.push_back(Vocab::kHash);
    }
    if (i == ex.tokens.size()) break;
    if (i == ex.subj.begin) {
      subj_at = body.size();
      body.push_back(Vocab::kAt);
    }
    if (i == ex.obj.begin) {
      obj_at = body.size();
      body.push_back(Vocab::kHash);
    }
    body.push_back(vocab.id(ex.tokens[i]));
  }
  const std::size_t lo = std::min(subj_at, obj_at);
  const std::size_t hi = std::max(subj_close, obj_close) + 1;
  const std::size_t shift = detail::fit_window(body, lo, hi, max_len);
  // +1 for [BOS]
  auto pos = [&](std::size_t body_index) { return body_index - shift + 1; };
  EncodedRow row;
  row.ids.push_back(Vocab::kBos);
  row.ids.insert(row.ids.end(), body.begin(), body.end());
  row.ann.label = ex.relation;
  row.ann.at_index = static_cast<int>(pos(subj_at));
  row.ann.hash_index = static_cast<int>(pos(obj_at));
  if (task == Task::FactPretrain) {
    row.ann.entity_spans = {{pos(subj_at), pos(subj_close) + 1}, {pos(obj_at), pos(obj_close) + 1}};
  } else {
    row.ann.entity_spans = {{pos(subj_at) + 1, pos(subj_close)}, {pos(obj_at) + 1, pos(obj_close)}};
  }
  return row;
}

// [BOS] tokens with '@' before and after the entity.
inline EncodedRow encode_typing(const TypingExample& ex, const Vocab& vocab, std::size_t max_len) {
  if (ex.entity.begin >= ex.entity.end || ex.entity.end > ex.tokens.size()) {
    throw ValidationError("typing entity span out of range");
  }
  std::vector<int> body;
  std::size_t open = 0, close = 0;
  for (std::size_t i = 0; i <= ex.tokens.size(); ++i) {
    if (i == ex.entity.end) {
      close = body.size();
      body.push_back(Vocab::kAt);
    }
    if (i == ex.tokens.size()) break;
    if (i == ex.entity.begin) {
      open = body.size();
      body.push_back(Vocab::kAt);
    }
    body.push_back(vocab.id(ex.tokens[i]));
  }
  const std::size_t shift = detail::fit_window(body, open, close + 1, max_len);
  EncodedRow row;
  row.ids.push_back(Vocab::kBos);
  row.ids.insert(row.ids.end(), body.begin(), body.end());
  row.ann.at_index = static_cast<int>(open - shift + 1);
  row.ann.entity_spans = {{open - shift + 2, close - shift + 1}};
  row.ann.multi_hot = ex.types;
  return row;
}

// [BOS] words; position k holds word k (1-based), matching head indices.
inline EncodedRow encode_dep(const DepExample& ex, const Vocab& vocab, std::size_t max_len) {
  validate_tree(ex);
  const std::size_t keep = std::min(ex.tokens.size(), max_len - 1);
  EncodedRow row;
  row.ids.push_back(Vocab::kBos);
  row.ann.dep_heads.push_back(-1);
  for (std::size_t i = 0; i < keep; ++i) {
    row.ids.push_back(vocab.id(ex.tokens[i]));
    const int h = ex.heads[i];
    row.ann.dep_heads.push_back(static_cast<std::size_t>(h) <= keep ? h : -1);
  }
  return row;
}

// [SEP] question [SEP] paragraph [SEP]; the paragraph is cut from the end.
inline EncodedRow encode_span_qa(const QaExample& ex, const Vocab& vocab, std::size_t max_len) {
  if (ex.answer.begin >= ex.answer.end || ex.answer.end > ex.paragraph.size()) {
    throw ValidationError("QA answer span out of range");
  }
  const std::size_t fixed = ex.question.size() + 3;
  if (fixed >= max_len) throw LengthError("question does not fit in max_len");
  const std::size_t room = max_len - fixed;
  const std::size_t keep = std::min(ex.paragraph.size(), room);
  if (ex.answer.end > keep) throw LengthError("answer would be truncated away");
  EncodedRow row;
  row.ids.push_back(Vocab::kSep);
  for (const auto& w : ex.question) row.ids.push_back(vocab.id(w));
  row.ids.push_back(Vocab::kSep);
  const std::size_t p0 = row.ids.size();
  for (std::size_t i = 0; i < keep; ++i) row.ids.push_back(vocab.id(ex.paragraph[i]));
  row.ids.push_back(Vocab::kSep);
  row.ann.segment = {p0, p0 + keep};
  row.ann.answer = std::make_pair(p0 + ex.answer.begin, p0 + ex.answer.end - 1);
  return row;
}

// One row per choice: [SEP] context [SEP] question [SEP] answer [SEP].
inline std::vector<EncodedRow> encode_multichoice(const ChoiceExample& ex, const Vocab& vocab,
                                                  std::size_t max_len) {
  if (ex.choices.size() < 2) throw ArgumentError("multiple choice needs at least 2 choices");
  std::vector<EncodedRow> rows;
  for (const auto& answer : ex.choices) {
    const std::size_t fixed = ex.question.size() + answer.size() + 4;
    if (fixed > max_len) throw LengthError("question and answer do not fit in max_len");
    const std::size_t keep = std::min(ex.context.size(), max_len - fixed);
    EncodedRow row;
    row.ids.push_back(Vocab::kSep);
    for (std::size_t i = 0; i < keep; ++i) row.ids.push_back(vocab.id(ex.context[i]));
    row.ids.push_back(Vocab::kSep);
    for (const auto& w : ex.question) row.ids.push_back(vocab.id(w));
    row.ids.push_back(Vocab::kSep);
    for (const auto& w : answer) row.ids.push_back(vocab.id(w));
    row.ids.push_back(Vocab::kSep);
    row.ann.label = ex.label;
    rows.push_back(std::move(row));
  }
  return rows;
}

// [BOS] tokens where the single "[MASK]" word becomes the mask id.
inline EncodedRow encode_cloze(const ClozeRecord& q, const Vocab& vocab, std::size_t max_len) {
  EncodedRow row;
  row.ids.push_back(Vocab::kBos);
  for (const auto& w : q.tokens) {
    if (w == "[MASK]") {
      if (row.ann.mask_index >= 0) throw QueryError("query contains more than one mask");
      row.ann.mask_index = static_cast<int>(row.ids.size());
      row.ids.push_back(Vocab::kMask);
    } else {
      row.ids.push_back(vocab.id(w));
    }
  }
  if (row.ann.mask_index < 0) throw QueryError("query has no mask");
  if (row.ids.size() > max_len) {
    if (static_cast<std::size_t>(row.ann.mask_index) >= max_len) {
      throw LengthError("mask would be truncated away");
    }
    row.ids.resize(max_len);
  }
  row.ann.label = vocab.id(q.answer);
  return row;
}

}  // namespace kadapter
