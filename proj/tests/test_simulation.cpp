#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ice/simulation.hpp"
#include "test_util.hpp"

using namespace ice;
using ice::testing::TempDir;

namespace {

ExperimentConfig small_experiment(const std::filesystem::path& work) {
  ExperimentConfig c;
  c.corpus.documents = 3000;
  c.corpus.positive_rate = 0.04;
  c.corpus.background_words = 800;
  c.corpus.seed = 3;
  c.seeds = {4};
  c.teacher.label_budget = 160;
  c.teacher.bow_cap = 2000;
  c.uniform_budget = 160;
  c.shards = 2;
  c.work_dir = work;
  return c;
}

nlohmann::json without_timing(nlohmann::json j) {
  j.erase("seconds");
  return j;
}

}  // namespace

TEST_CASE("generated corpora are deterministic and lopsided") {
  CorpusSpec spec;
  spec.documents = 5000;
  spec.seed = 11;
  const SyntheticCorpus a = generate_corpus(spec);
  const SyntheticCorpus b = generate_corpus(spec);
  REQUIRE(a.records.size() == 5000);
  CHECK(a.positive == b.positive);
  CHECK(a.records[1234].body_text == b.records[1234].body_text);
  const auto pos = std::count(a.positive.begin(), a.positive.end(), true);
  CHECK(std::abs(pos / 5000.0 - 0.02) < 0.01);
  CHECK_FALSE(a.seed_queries.empty());
  CHECK(CorpusSpec::from_json(spec.to_json()).to_json() == spec.to_json());
}

TEST_CASE("the oracle hold-out is a stable fraction of rows") {
  std::vector<bool> truth(10000, false);
  truth[5] = true;
  const Oracle o = make_oracle(truth, 0.3, 9);
  CHECK(std::abs(o.test_rows->size() / 10000.0 - 0.3) <= 0.02);
  CHECK(*make_oracle(truth, 0.3, 9).test_rows == *o.test_rows);
}

TEST_CASE("the teacher rejects a corpus without positives and handles a zero budget") {
  CorpusSpec spec;
  spec.documents = 500;
  spec.seed = 2;
  const SyntheticCorpus corpus = generate_corpus(spec);
  TempDir dir;
  import_items(dir.path(), "syn", records_from(corpus.records), 256);
  EngineOptions eo;
  eo.shard_count = 2;
  ServiceOptions so;
  so.session_dir = dir / "sessions";
  LoopService service(ColumnEngine::load_dataset(RawStore::open(dir.path(), "syn"), eo), so);

  TeacherConfig tc;
  tc.bow_cap = 500;
  const Oracle none = make_oracle(std::vector<bool>(500, false), 0.3, 1);
  CHECK_THROWS_AS(run_simulated_teacher(service, none, corpus.seed_queries, tc), InvalidArgument);

  tc.label_budget = 0;
  const Oracle oracle = make_oracle(corpus.positive, 0.3, 1);
  const TeacherReport r = run_simulated_teacher(service, oracle, corpus.seed_queries, tc);
  CHECK(r.rounds.empty());
  CHECK_FALSE(r.labels_to_target);

  tc.strategy = "bandit";
  tc.seed = 2;
  CHECK_THROWS_AS(run_simulated_teacher(service, oracle, corpus.seed_queries, tc), InvalidArgument);
}

TEST_CASE("censored median counts misses as the budget") {
  std::vector<TeacherReport> runs(4);
  runs[0].labels_to_target = 100;
  runs[1].labels_to_target = 300;
  runs[2].labels_to_target = 200;
  CHECK(censored_median(runs, 1000) == 250.0);
  runs.pop_back();
  CHECK(censored_median(runs, 1000) == 200.0);
}

TEST_CASE("an experiment with the same seeds gives the same report") {
  TempDir a, b;
  const ExperimentReport ra = run_experiment(small_experiment(a.path()));
  const ExperimentReport rb = run_experiment(small_experiment(b.path()));
  REQUIRE(ra.runs.size() == 2);
  REQUIRE(rb.runs.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(without_timing(ra.runs[i].to_json()) == without_timing(rb.runs[i].to_json()));
    CHECK_FALSE(ra.runs[i].rounds.empty());
    std::uint64_t prev = 0;
    for (const auto& round : ra.runs[i].rounds) {
      CHECK(round.labels > prev);
      CHECK(round.labels <= 160);
      prev = round.labels;
    }
  }
  CHECK(ra.runs[0].strategy == "active");
  CHECK(ra.runs[1].strategy == "uniform");
  CHECK(ra.runs[0].rounds.front().source == "search");
}
