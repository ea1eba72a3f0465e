#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ice/featurizer.hpp"
#include "ice/model_export.hpp"
#include "ice/tokenizer.hpp"
#include "test_util.hpp"

using namespace ice;

namespace {

DictionaryFeature months() {
  return DictionaryFeature::make("months", {"January", "february", "March"});
}

FeatureDefinition dictionary_def(std::string id, DictionaryFeature d, std::uint32_t version = 1) {
  FeatureDefinition def;
  def.id = std::move(id);
  def.version = version;
  def.kind = FeatureKind::kDictionary;
  def.dictionary = std::move(d);
  return def;
}

FeatureDefinition builtin_def(std::string name) {
  FeatureDefinition def;
  def.id = name;
  def.kind = FeatureKind::kBuiltin;
  def.builtin = std::move(name);
  return def;
}

}  // namespace

TEST_CASE("tokenizer") {
  CHECK(tokenize("Hello, World!") == TokenList{"hello", "world"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("A1-b2") == TokenList{"a1", "b2"});
  CHECK(tokenize("  tabs\tand\nnewlines ") == TokenList{"tabs", "and", "newlines"});
  CHECK(tokenize("caf\xc3\xa9 x") == TokenList{"caf", "x"});
}

TEST_CASE("dictionary statistics") {
  const auto d = months();
  CHECK(d.entries == std::set<std::string>{"january", "february", "march"});
  const TokenList toks{"january", "snow", "january"};
  CHECK(dictionary_stats(toks, d) == DictionaryStats{2, 1, 1});
  CHECK(dictionary_stats(TokenList{}, d) == DictionaryStats{0, 0, 0});
}

TEST_CASE("dictionary statistics equal a nested-loop count on a long document") {
  std::mt19937_64 rng(12);
  std::vector<std::string> raw;
  for (int i = 0; i < 30; ++i) raw.push_back("w" + std::to_string(rng() % 100));
  const auto dict = DictionaryFeature::make("d", raw);
  const auto body = ice::testing::random_bodies(1, 100, 500, 500, 3)[0];
  const TokenList toks = tokenize(body);
  REQUIRE(toks.size() == 500);
  std::uint64_t total = 0;
  std::set<std::string> seen;
  for (const auto& t : toks) {
    for (const auto& e : dict.entries) {
      if (t == e) {
        ++total;
        seen.insert(e);
      }
    }
  }
  const auto s = dictionary_stats(toks, dict);
  CHECK(s.total == total);
  CHECK(s.distinct == seen.size());
  CHECK(s.presence == (total > 0 ? 1u : 0u));
}

TEST_CASE("dictionary entries must be single tokens") {
  CHECK_THROWS_AS(DictionaryFeature::make("d", {"new york"}), InvalidArgument);
  CHECK_THROWS_AS(DictionaryFeature::make("d", {"!!"}), InvalidArgument);
  CHECK_THROWS_AS(DictionaryFeature::make("d", {"a"}, {}), InvalidArgument);
}

TEST_CASE("dictionary exchange format round-trips") {
  const auto d = DictionaryFeature::make("months", {"january"}, {StatMode::kPresence});
  CHECK(DictionaryFeature::from_text(d.to_text()) == d);
  CHECK(DictionaryFeature::from_json(d.to_json()) == d);
  CHECK_THROWS_AS(DictionaryFeature::from_text("{\"name\": \"x\"}"), InvalidArgument);
  CHECK_THROWS_AS(DictionaryFeature::from_text("not json"), InvalidArgument);
}

TEST_CASE("n-grams are unigrams then bigrams") {
  const TokenList toks{"a", "b", "c"};
  CHECK(ngrams(toks) == std::vector<std::string>{"a", "b", "c", "a b", "b c"});
}

TEST_CASE("vocabulary keeps the most frequent n-grams with lexicographic ties") {
  const std::vector<std::string> docs{"a b", "a c"};
  const auto v = BowVocabulary::from_documents(docs, 2);
  REQUIRE(v.size() == 2);
  CHECK(v.terms()[0] == BowTerm{"a", 2});
  CHECK(v.terms()[1] == BowTerm{"a b", 1});
  CHECK(BowVocabulary::from_documents(docs, 100).size() == 5);
  CHECK(BowVocabulary::from_json(v.to_json()) == v);
}

TEST_CASE("engine document frequencies equal a sequential counter") {
  const auto bodies = ice::testing::random_bodies(300, 40, 0, 15, 17);
  ice::testing::Fixture f(ice::testing::records(bodies), 3, 20);
  define_text_columns(*f.engine);
  std::uint64_t docs = 0;
  const auto df = count_document_frequencies(*f.engine, kTokensColumn, &docs);
  CHECK(docs == 300);
  std::unordered_map<std::string, std::uint64_t> expected;
  for (const auto& b : bodies) {
    const auto grams = ngrams(tokenize(item_text("", b)));
    for (const auto& g : std::set<std::string>(grams.begin(), grams.end())) ++expected[g];
  }
  CHECK(df == expected);
  CHECK(build_bow_vocabulary(*f.engine, 50) == BowVocabulary::from_counts(expected, 300, 50));
}

TEST_CASE("tf-idf vectors") {
  SUBCASE("no vocabulary terms gives an empty vector") {
    const auto v = BowVocabulary::from_documents(std::vector<std::string>{"a", "b"}, 10);
    CHECK(tfidf_vector(TokenList{"zzz"}, v).empty());
  }
  SUBCASE("a single known term is a unit vector") {
    const auto v = BowVocabulary::from_documents(std::vector<std::string>{"a", "b", "b"}, 10);
    const auto x = tfidf_vector(TokenList{"a"}, v);
    REQUIRE(x.size() == 1);
    CHECK(x[0].index == *v.find("a"));
    CHECK(x[0].value == doctest::Approx(1.0));
  }
  SUBCASE("vectors match a direct evaluation of tf * ln(N / df)") {
    const auto bodies = ice::testing::random_bodies(20, 12, 1, 10, 5);
    const auto v = BowVocabulary::from_documents(bodies, 40);
    for (const auto& b : bodies) {
      const TokenList toks = tokenize(b);
      std::map<std::size_t, double> direct;
      for (const auto& g : ngrams(toks)) {
        if (auto i = v.find(g)) direct[*i] += 1.0;
      }
      double norm = 0.0;
      for (auto& [i, w] : direct) {
        w *= std::log(20.0 / static_cast<double>(v.terms()[i].df));
        norm += w * w;
      }
      norm = std::sqrt(norm);
      SparseVector expected;
      for (const auto& [i, w] : direct) {
        if (w != 0.0) expected.push_back({static_cast<FeatureIndex>(i), w / norm});
      }
      const auto got = tfidf_vector(toks, v);
      REQUIRE(got.size() == expected.size());
      for (std::size_t k = 0; k < got.size(); ++k) {
        CHECK(got[k].index == expected[k].index);
        CHECK(std::abs(got[k].value - expected[k].value) < 1e-12);
      }
    }
  }
}

TEST_CASE("built-in features") {
  CHECK(find_builtin("log_length")(TokenList{"a", "b", "c"}) == doctest::Approx(std::log(4.0)));
  CHECK(find_builtin("numeric_fraction")(TokenList{"12", "a", "3b", "7"}) == 0.5);
  CHECK(find_builtin("numeric_fraction")(TokenList{}) == 0.0);
  CHECK_THROWS_AS(find_builtin("system"), NotFound);
}

TEST_CASE("feature definitions round-trip and name their coordinates") {
  const auto def = dictionary_def("s.months", months(), 3);
  CHECK(def.key() == "s.months@3");
  CHECK(def.column_name() == "feature:s.months@3");
  CHECK(def.coordinate_names() ==
        std::vector<std::string>{"dict:s.months@3:total", "dict:s.months@3:distinct",
                                 "dict:s.months@3:presence"});
  CHECK(FeatureDefinition::from_json(def.to_json()).to_json() == def.to_json());
  auto bad = def.to_json();
  bad["id"] = "a@b";
  CHECK_THROWS_AS(FeatureDefinition::from_json(bad), InvalidArgument);
  bad = def.to_json();
  bad["version"] = 0;
  CHECK_THROWS_AS(FeatureDefinition::from_json(bad), InvalidArgument);
}

TEST_CASE("feature space indices never change") {
  FeatureSpace space;
  const auto a = space.intern({"x", "y"});
  const auto b = space.intern({"z", "x"});
  CHECK(a == std::vector<FeatureIndex>{0, 1});
  CHECK(b == std::vector<FeatureIndex>{2, 0});
  CHECK(space.name(2) == "z");
  CHECK(*space.find("y") == 1);
  CHECK_FALSE(space.find("w"));
}

TEST_CASE("registry assembles vectors equal to per-feature evaluation") {
  const std::vector<std::string> bodies{"january snow january 42", "march 7 8 9", "", "february march march"};
  ice::testing::Fixture f(ice::testing::records(bodies), 2, 2);
  define_text_columns(*f.engine);
  FeatureRegistry reg(*f.engine);
  const auto dict = reg.add(dictionary_def("s.months", months()));
  FeatureDefinition bow;
  bow.id = "bow10";
  bow.kind = FeatureKind::kBow;
  bow.vocabulary = std::make_shared<const BowVocabulary>(build_bow_vocabulary(*f.engine, 10));
  reg.add(bow);
  reg.add(builtin_def("numeric_fraction"));
  const std::vector<std::string> keys{"s.months@1", "bow10@1", "numeric_fraction@1"};

  for (RowId r = 0; r < bodies.size(); ++r) {
    const TokenList toks = tokenize(item_text("", bodies[r]));
    std::map<FeatureIndex, double> expected;
    const auto stats = dictionary_stats(toks, months());
    const double dvals[] = {static_cast<double>(stats.total), static_cast<double>(stats.distinct),
                            static_cast<double>(stats.presence)};
    const char* modes[] = {"total", "distinct", "presence"};
    for (int m = 0; m < 3; ++m) {
      if (dvals[m] != 0.0) expected[*reg.space().find(std::string("dict:s.months@1:") + modes[m])] = dvals[m];
    }
    for (const auto& e : tfidf_vector(toks, *bow.vocabulary)) {
      expected[*reg.space().find("bow:bow10@1:" + bow.vocabulary->terms()[e.index].ngram)] = e.value;
    }
    const double nf = find_builtin("numeric_fraction")(toks);
    if (nf != 0.0) expected[*reg.space().find("builtin:numeric_fraction@1")] = nf;

    const SparseVector got = reg.assemble(r, keys);
    REQUIRE(got.size() == expected.size());
    std::size_t k = 0;
    for (const auto& [i, v] : expected) {
      CHECK(got[k].index == i);
      CHECK(got[k].value == v);
      ++k;
    }
    std::vector<SparseVector> range;
    const std::uint32_t shard = f.engine->shard_of(r);
    const ShardInfo info = f.engine->shard_info(shard);
    reg.assemble_range(shard, info.begin, info.end, keys, range);
    CHECK(range[r - info.begin] == got);
  }
}

TEST_CASE("adding a model feature leaves dictionary coordinates unchanged") {
  ice::testing::Fixture f(ice::testing::records({"january march", "snow"}), 1, 2);
  define_text_columns(*f.engine);
  FeatureRegistry reg(*f.engine);
  const auto& d = reg.add(dictionary_def("s.months", months()));
  const std::vector<FeatureIndex> before(reg.coordinates(d.key()).begin(), reg.coordinates(d.key()).end());

  LinearModel m;
  m.weights.assign(reg.space().size(), 0.0);
  m.weights[before[0]] = 0.7;
  m.bias = -0.2;
  m.version = 1;
  const auto doc = export_model(m, {d}, reg.space(), {"ds", "s"});
  FeatureDefinition model_feature;
  model_feature.id = "s.v1";
  model_feature.kind = FeatureKind::kModel;
  model_feature.model = std::make_shared<const ExportedScorer>(doc);
  reg.add(model_feature);

  const std::vector<FeatureIndex> after(reg.coordinates(d.key()).begin(), reg.coordinates(d.key()).end());
  CHECK(before == after);
  const auto x = reg.assemble(0, {"s.v1@1"});
  REQUIRE(x.size() == 1);
  CHECK(x[0].value == doctest::Approx(sigmoid(0.7 * 2 - 0.2)));
}

TEST_CASE("registry versions, conflicts and removal") {
  ice::testing::Fixture f(ice::testing::records({"january"}), 1, 1);
  define_text_columns(*f.engine);
  FeatureRegistry reg(*f.engine);
  reg.add(dictionary_def("s.m", months()));
  CHECK_NOTHROW(reg.add(dictionary_def("s.m", months())));
  CHECK_THROWS_AS(reg.add(dictionary_def("s.m", DictionaryFeature::make("months", {"april"}))), Conflict);
  reg.add(dictionary_def("s.m", DictionaryFeature::make("months", {"april"}), 2));
  CHECK(reg.latest_version("s.m") == 2);
  CHECK(reg.latest_version("nope") == 0);
  reg.remove("s.m@1");
  CHECK(reg.removed("s.m@1"));
  CHECK_THROWS(reg.assemble(0, {"s.m@1"}));
  CHECK(reg.assemble(0, {"s.m@2"}).empty());
  CHECK_THROWS_AS(reg.get("x@1"), NotFound);
}

TEST_CASE("merging sparse parts rejects overlapping indices") {
  const SparseVector a{{0, 1.0}, {4, 2.0}}, b{{2, 3.0}}, c{{4, 1.0}};
  CHECK(merge_sparse({&a, &b}) == SparseVector{{0, 1.0}, {2, 3.0}, {4, 2.0}});
  CHECK_THROWS(merge_sparse({&a, &c}));
}
