#include "ice/featurizer.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "ice/column_engine.hpp"
#include "ice/model_export.hpp"

namespace ice {

std::string item_text(std::string_view title, std::string_view body_text) {
  std::string text;
  text.reserve(title.size() + 1 + body_text.size());
  text.append(title);
  text.push_back(' ');
  text.append(body_text);
  return text;
}

void define_text_columns(ColumnEngine& engine) {
  if (!engine.has_column(kTextColumn)) {
    ColumnDef text;
    text.name = kTextColumn;
    text.kind = ColumnKind::kLambda;
    text.type = ValueType::kText;
    text.dependencies = {"title", "body_text"};
    text.function_id = "concat_title_body";
    text.fn = [](const LambdaInputs& in) -> Value {
      return item_text(std::get<std::string>(in[0]), std::get<std::string>(in[1]));
    };
    engine.define_lambda(std::move(text));
  }
  if (!engine.has_column(kTokensColumn)) {
    ColumnDef tokens;
    tokens.name = kTokensColumn;
    tokens.kind = ColumnKind::kLambda;
    tokens.type = ValueType::kTokens;
    tokens.dependencies = {kTextColumn};
    tokens.function_id = "tokenize";
    tokens.fn = [](const LambdaInputs& in) -> Value {
      return tokenize(std::get<std::string>(in[0]));
    };
    engine.define_lambda(std::move(tokens));
  }
}

const char* to_string(StatMode mode) {
  switch (mode) {
    case StatMode::kTotal: return "total";
    case StatMode::kDistinct: return "distinct";
    case StatMode::kPresence: return "presence";
  }
  return "?";
}

StatMode parse_stat_mode(std::string_view text) {
  if (text == "total" || text == "total_count") return StatMode::kTotal;
  if (text == "distinct" || text == "distinct_count") return StatMode::kDistinct;
  if (text == "presence" || text == "binary_presence") return StatMode::kPresence;
  throw InvalidArgument("unknown stat mode '" + std::string(text) + "'");
}

double DictionaryStats::get(StatMode mode) const {
  switch (mode) {
    case StatMode::kTotal: return static_cast<double>(total);
    case StatMode::kDistinct: return static_cast<double>(distinct);
    case StatMode::kPresence: return static_cast<double>(presence);
  }
  return 0.0;
}

DictionaryFeature DictionaryFeature::make(std::string name,
                                          const std::vector<std::string>& raw_entries,
                                          std::vector<StatMode> modes) {
  DictionaryFeature d;
  d.name = std::move(name);
  if (d.name.empty()) throw InvalidArgument("dictionary needs a name");
  for (const auto& raw : raw_entries) {
    TokenList t = tokenize(raw);
    if (t.size() != 1) {
      throw InvalidArgument("dictionary entry '" + raw + "' must be exactly one token");
    }
    d.entries.insert(std::move(t[0]));
  }
  std::sort(modes.begin(), modes.end());
  modes.erase(std::unique(modes.begin(), modes.end()), modes.end());
  if (modes.empty()) throw InvalidArgument("dictionary needs at least one stat mode");
  d.modes = std::move(modes);
  return d;
}

nlohmann::json DictionaryFeature::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["entries"] = std::vector<std::string>(entries.begin(), entries.end());
  std::vector<std::string> m;
  for (StatMode mode : modes) m.emplace_back(to_string(mode));
  j["modes"] = m;
  return j;
}

DictionaryFeature DictionaryFeature::from_json(const nlohmann::json& j) {
  try {
    std::vector<StatMode> modes;
    if (j.contains("modes")) {
      for (const auto& m : j.at("modes")) modes.push_back(parse_stat_mode(m.get<std::string>()));
    } else {
      modes = {StatMode::kTotal, StatMode::kDistinct, StatMode::kPresence};
    }
    return make(j.at("name").get<std::string>(), j.at("entries").get<std::vector<std::string>>(),
                std::move(modes));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad dictionary document: ") + e.what());
  }
}

DictionaryFeature DictionaryFeature::from_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad dictionary document: ") + e.what());
  }
  return from_json(j);
}

std::string DictionaryFeature::to_text() const { return to_json().dump(2); }

DictionaryStats dictionary_stats(std::span<const std::string> tokens,
                                 const DictionaryFeature& dict) {
  DictionaryStats s;
  std::set<std::string_view> seen;
  for (const auto& t : tokens) {
    if (dict.entries.count(t)) {
      ++s.total;
      seen.insert(t);
    }
  }
  s.distinct = seen.size();
  s.presence = s.total > 0 ? 1 : 0;
  return s;
}

std::vector<std::string> ngrams(std::span<const std::string> tokens) {
  std::vector<std::string> out(tokens.begin(), tokens.end());
  for (std::size_t i = 1; i < tokens.size(); ++i) out.push_back(tokens[i - 1] + " " + tokens[i]);
  return out;
}

namespace {

void count_distinct_ngrams(std::span<const std::string> tokens,
                           std::unordered_map<std::string, std::uint64_t>& df) {
  auto grams = ngrams(tokens);
  std::sort(grams.begin(), grams.end());
  grams.erase(std::unique(grams.begin(), grams.end()), grams.end());
  for (auto& g : grams) ++df[std::move(g)];
}

}  // namespace

void BowVocabulary::index() {
  lookup_.clear();
  for (std::size_t i = 0; i < terms_.size(); ++i) lookup_.emplace(terms_[i].ngram, i);
}

BowVocabulary BowVocabulary::from_counts(const std::unordered_map<std::string, std::uint64_t>& df,
                                         std::uint64_t documents, std::size_t cap) {
  if (cap < 1) throw InvalidArgument("vocabulary cap must be at least 1");
  BowVocabulary v;
  v.documents_ = documents;
  v.cap_ = cap;
  v.terms_.reserve(df.size());
  for (const auto& [g, n] : df) v.terms_.push_back({g, n});
  auto better = [](const BowTerm& a, const BowTerm& b) {
    return a.df != b.df ? a.df > b.df : a.ngram < b.ngram;
  };
  const std::size_t keep = std::min(cap, v.terms_.size());
  std::partial_sort(v.terms_.begin(), v.terms_.begin() + static_cast<std::ptrdiff_t>(keep),
                    v.terms_.end(), better);
  v.terms_.resize(keep);
  v.index();
  return v;
}

BowVocabulary BowVocabulary::from_documents(std::span<const std::string> texts, std::size_t cap) {
  std::unordered_map<std::string, std::uint64_t> df;
  for (const auto& text : texts) count_distinct_ngrams(tokenize(text), df);
  return from_counts(df, texts.size(), cap);
}

nlohmann::json BowVocabulary::to_json() const {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : terms_) terms.push_back({t.ngram, t.df});
  return {{"documents", documents_}, {"cap", cap_}, {"terms", terms}};
}

BowVocabulary BowVocabulary::from_json(const nlohmann::json& j) {
  BowVocabulary v;
  try {
    v.documents_ = j.at("documents").get<std::uint64_t>();
    v.cap_ = j.at("cap").get<std::size_t>();
    for (const auto& t : j.at("terms")) {
      v.terms_.push_back({t.at(0).get<std::string>(), t.at(1).get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad vocabulary document: ") + e.what());
  }
  v.index();
  return v;
}

std::optional<std::size_t> BowVocabulary::find(std::string_view ngram) const {
  auto it = lookup_.find(std::string(ngram));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

double BowVocabulary::idf(std::size_t term) const {
  return std::log(static_cast<double>(documents_) / static_cast<double>(terms_.at(term).df));
}

std::unordered_map<std::string, std::uint64_t> count_document_frequencies(
    ColumnEngine& engine, std::string_view tokens_column, std::uint64_t* documents) {
  const std::uint32_t n = engine.shard_count();
  std::vector<std::unordered_map<std::string, std::uint64_t>> partial(n);
  std::vector<std::uint64_t> docs(n, 0);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  for (std::uint32_t s = 0; s < n; ++s) {
    if (!engine.shard_alive(s) || engine.shard_info(s).rows() == 0) continue;
    workers.emplace_back([&, s] {
      try {
        auto values = engine.shard_values(s, tokens_column);
        for (const Value& v : *values) count_distinct_ngrams(std::get<TokenList>(v), partial[s]);
        docs[s] = values->size();
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::unordered_map<std::string, std::uint64_t> total;
  std::uint64_t doc_total = 0;
  for (std::uint32_t s = 0; s < n; ++s) {
    doc_total += docs[s];
    if (total.empty()) {
      total = std::move(partial[s]);
      continue;
    }
    for (auto& [g, c] : partial[s]) total[g] += c;
  }
  if (documents) *documents = doc_total;
  return total;
}

BowVocabulary build_bow_vocabulary(ColumnEngine& engine, std::size_t cap) {
  define_text_columns(engine);
  std::uint64_t documents = 0;
  const auto df = count_document_frequencies(engine, kTokensColumn, &documents);
  return BowVocabulary::from_counts(df, documents, cap);
}

SparseVector tfidf_vector(std::span<const std::string> tokens, const BowVocabulary& vocab) {
  std::map<std::size_t, double> tf;
  for (const auto& g : ngrams(tokens)) {
    if (auto i = vocab.find(g)) tf[*i] += 1.0;
  }
  SparseVector out;
  double norm = 0.0;
  for (const auto& [i, count] : tf) {
    const double w = count * vocab.idf(i);
    if (w == 0.0) continue;
    out.push_back({static_cast<FeatureIndex>(i), w});
    norm += w * w;
  }
  if (norm > 0) {
    norm = std::sqrt(norm);
    for (auto& e : out) e.value /= norm;
  }
  return out;
}

namespace {

double log_length(std::span<const std::string> tokens) {
  return std::log1p(static_cast<double>(tokens.size()));
}

double numeric_fraction(std::span<const std::string> tokens) {
  if (tokens.empty()) return 0.0;
  const auto numeric = std::count_if(tokens.begin(), tokens.end(), [](const std::string& t) {
    return std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; });
  });
  return static_cast<double>(numeric) / static_cast<double>(tokens.size());
}

const std::map<std::string, BuiltinFn, std::less<>>& builtins() {
  static const std::map<std::string, BuiltinFn, std::less<>> table{
      {"log_length", &log_length},
      {"numeric_fraction", &numeric_fraction},
  };
  return table;
}

}  // namespace

BuiltinFn find_builtin(std::string_view name) {
  auto it = builtins().find(name);
  if (it == builtins().end()) throw NotFound("unknown built-in feature '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> builtin_names() {
  std::vector<std::string> names;
  for (const auto& [n, _] : builtins()) names.push_back(n);
  return names;
}

const char* to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kDictionary: return "dictionary";
    case FeatureKind::kBow: return "bow";
    case FeatureKind::kModel: return "model";
    case FeatureKind::kBuiltin: return "builtin";
  }
  return "?";
}

std::string FeatureDefinition::key() const { return id + "@" + std::to_string(version); }

std::string FeatureDefinition::column_name() const { return "feature:" + key(); }

std::vector<std::string> FeatureDefinition::coordinate_names() const {
  std::vector<std::string> names;
  switch (kind) {
    case FeatureKind::kDictionary:
      for (StatMode m : dictionary.modes) names.push_back("dict:" + key() + ":" + to_string(m));
      break;
    case FeatureKind::kBow:
      for (const auto& t : vocabulary->terms()) names.push_back("bow:" + key() + ":" + t.ngram);
      break;
    case FeatureKind::kModel:
      names.push_back("model:" + key());
      break;
    case FeatureKind::kBuiltin:
      names.push_back("builtin:" + key());
      break;
  }
  return names;
}

nlohmann::json FeatureDefinition::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)}, {"id", id}, {"version", version}};
  switch (kind) {
    case FeatureKind::kDictionary: j["dictionary"] = dictionary.to_json(); break;
    case FeatureKind::kBow: j["vocabulary"] = vocabulary->to_json(); break;
    case FeatureKind::kModel: j["model"] = model->document(); break;
    case FeatureKind::kBuiltin: j["function"] = builtin; break;
  }
  return j;
}

FeatureDefinition FeatureDefinition::from_json(const nlohmann::json& j) {
  FeatureDefinition d;
  try {
    d.id = j.at("id").get<std::string>();
    d.version = j.at("version").get<std::uint32_t>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "dictionary") {
      d.kind = FeatureKind::kDictionary;
      d.dictionary = DictionaryFeature::from_json(j.at("dictionary"));
    } else if (kind == "bow") {
      d.kind = FeatureKind::kBow;
      d.vocabulary = std::make_shared<const BowVocabulary>(BowVocabulary::from_json(j.at("vocabulary")));
    } else if (kind == "model") {
      d.kind = FeatureKind::kModel;
      d.model = std::make_shared<const ExportedScorer>(j.at("model"));
    } else if (kind == "builtin") {
      d.kind = FeatureKind::kBuiltin;
      d.builtin = j.at("function").get<std::string>();
      find_builtin(d.builtin);
    } else {
      throw InvalidArgument("unknown feature kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad feature document: ") + e.what());
  }
  if (d.id.empty() || d.id.find('@') != std::string::npos) {
    throw InvalidArgument("feature id must be non-empty and must not contain '@'");
  }
  if (d.version < 1) throw InvalidArgument("feature versions start at 1");
  return d;
}

SparseVector evaluate_feature(const FeatureDefinition& def, std::span<const std::string> tokens,
                              std::span<const FeatureIndex> coords) {
  SparseVector out;
  auto push = [&](std::size_t local, double v) {
    if (v != 0.0) out.push_back({coords[local], v});
  };
  switch (def.kind) {
    case FeatureKind::kDictionary: {
      const DictionaryStats s = dictionary_stats(tokens, def.dictionary);
      for (std::size_t i = 0; i < def.dictionary.modes.size(); ++i) {
        push(i, s.get(def.dictionary.modes[i]));
      }
      break;
    }
    case FeatureKind::kBow:
      for (const auto& e : tfidf_vector(tokens, *def.vocabulary)) push(e.index, e.value);
      break;
    case FeatureKind::kModel:
      push(0, def.model->probability(tokens));
      break;
    case FeatureKind::kBuiltin:
      push(0, find_builtin(def.builtin)(tokens));
      break;
  }
  std::sort(out.begin(), out.end(),
            [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  return out;
}

std::vector<FeatureIndex> FeatureSpace::intern(const std::vector<std::string>& names) {
  std::unique_lock lock(mutex_);
  std::vector<FeatureIndex> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    auto [it, inserted] = index_.emplace(n, static_cast<FeatureIndex>(names_.size()));
    if (inserted) names_.push_back(n);
    out.push_back(it->second);
  }
  return out;
}

std::optional<FeatureIndex> FeatureSpace::find(std::string_view name) const {
  std::shared_lock lock(mutex_);
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::string FeatureSpace::name(FeatureIndex index) const {
  std::shared_lock lock(mutex_);
  if (index >= names_.size()) throw OutOfRange("no feature index " + std::to_string(index));
  return names_[index];
}

std::size_t FeatureSpace::size() const {
  std::shared_lock lock(mutex_);
  return names_.size();
}

FeatureRegistry::FeatureRegistry(ColumnEngine& engine) : engine_(engine) {
  define_text_columns(engine_);
}

const FeatureDefinition& FeatureRegistry::add(FeatureDefinition def) {
  const std::string key = def.key();
  std::unique_lock lock(mutex_);
  if (auto it = entries_.find(key); it != entries_.end()) {
    if (it->second->def.to_json() != def.to_json()) {
      throw Conflict("feature " + key + " already exists with a different definition");
    }
    return it->second->def;
  }
  auto e = std::make_unique<Entry>();
  e->def = std::move(def);
  e->coords = space_.intern(e->def.coordinate_names());

  ColumnDef col;
  col.name = e->def.column_name();
  col.kind = ColumnKind::kLambda;
  col.type = ValueType::kSparse;
  col.dependencies = {kTokensColumn};
  col.function_id = std::string("feature/") + to_string(e->def.kind);
  // The entry is heap-allocated and never erased, so the lambda may hold it.
  const Entry* held = e.get();
  col.fn = [held](const LambdaInputs& in) -> Value {
    return evaluate_feature(held->def, std::get<TokenList>(in[0]), held->coords);
  };
  engine_.define_lambda(std::move(col));
  const FeatureDefinition& out = e->def;
  entries_.emplace(key, std::move(e));
  return out;
}

const FeatureRegistry::Entry& FeatureRegistry::entry(std::string_view key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) throw NotFound("unknown feature " + std::string(key));
  return *it->second;
}

bool FeatureRegistry::contains(std::string_view key) const {
  std::shared_lock lock(mutex_);
  return entries_.find(key) != entries_.end();
}

const FeatureDefinition& FeatureRegistry::get(std::string_view key) const {
  return entry(key).def;
}

std::span<const FeatureIndex> FeatureRegistry::coordinates(std::string_view key) const {
  return entry(key).coords;
}

std::uint32_t FeatureRegistry::latest_version(std::string_view id) const {
  std::shared_lock lock(mutex_);
  std::uint32_t latest = 0;
  for (const auto& [_, e] : entries_) {
    if (e->def.id == id) latest = std::max(latest, e->def.version);
  }
  return latest;
}

void FeatureRegistry::remove(std::string_view key) {
  std::unique_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) throw NotFound("unknown feature " + std::string(key));
  it->second->removed = true;
}

bool FeatureRegistry::removed(std::string_view key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  return it != entries_.end() && it->second->removed;
}

SparseVector merge_sparse(const std::vector<const SparseVector*>& parts) {
  SparseVector out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  std::sort(out.begin(), out.end(),
            [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].index == out[i - 1].index) throw InvalidArgument("overlapping feature coordinates");
  }
  return out;
}

SparseVector FeatureRegistry::assemble(RowId row, const std::vector<std::string>& keys) const {
  std::vector<std::string> columns;
  for (const auto& k : keys) {
    const Entry& e = entry(k);
    if (e.removed) throw NotFound("feature " + k + " was deleted");
    columns.push_back(e.def.column_name());
  }
  const RowResult r = engine_.get_row(row, columns);
  std::vector<const SparseVector*> parts;
  for (const auto& c : columns) parts.push_back(&std::get<SparseVector>(r.values.at(c)));
  return merge_sparse(parts);
}

void FeatureRegistry::assemble_range(std::uint32_t shard, RowId begin, RowId end,
                                     const std::vector<std::string>& keys,
                                     std::vector<SparseVector>& out) const {
  const ShardInfo info = engine_.shard_info(shard);
  if (begin < info.begin || end > info.end || begin > end) {
    throw OutOfRange("row range outside shard " + std::to_string(shard));
  }
  std::vector<std::shared_ptr<const std::vector<Value>>> columns;
  for (const auto& k : keys) {
    const Entry& e = entry(k);
    if (e.removed) throw NotFound("feature " + k + " was deleted");
    columns.push_back(engine_.shard_values(shard, e.def.column_name()));
  }
  out.resize(end - begin);
  std::vector<const SparseVector*> parts(columns.size());
  for (RowId r = begin; r < end; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      parts[c] = &std::get<SparseVector>((*columns[c])[r - info.begin]);
    }
    out[r - begin] = merge_sparse(parts);
  }
}

}  // namespace ice
