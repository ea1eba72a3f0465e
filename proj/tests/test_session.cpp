#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>

#include "ice/session.hpp"
#include "test_util.hpp"

using namespace ice;
using ice::testing::TempDir;
using nlohmann::json;

namespace {

SessionConfig config(const std::string& id = "s1") {
  SessionConfig c;
  c.session_id = id;
  c.dataset_id = "ds";
  return c;
}

json label(RowId row, const char* value, const char* source = "search") {
  return {{"row", row}, {"label", value}, {"source", source}};
}

}  // namespace

TEST_CASE("sequence numbers start at 1 and increase") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  CHECK(s->latest_sequence() == 0);
  CHECK(s->append(EventKind::kQueryIssued, {{"query", "cat"}}) == 1);
  CHECK(s->append(EventKind::kLabelSubmitted, label(3, "positive")) == 2);
  CHECK(s->event(2).kind == EventKind::kLabelSubmitted);
  CHECK_THROWS_AS(s->event(3), OutOfRange);
  CHECK_THROWS_AS(Session::create(dir / "s.log", config()), Conflict);
}

TEST_CASE("payloads are validated before anything is written") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  CHECK_THROWS_AS(s->append(EventKind::kLabelSubmitted, {{"row", 1}}), InvalidArgument);
  CHECK_THROWS_AS(s->append(EventKind::kLabelSubmitted, label(1, "maybe")), InvalidArgument);
  CHECK_THROWS_AS(s->append(EventKind::kLabelSubmitted, label(1, "positive", "guess")), InvalidArgument);
  CHECK_THROWS_AS(s->append(EventKind::kModelTrained, json::object()), InvalidArgument);
  CHECK(s->latest_sequence() == 0);
  CHECK(Session::read_events(dir / "s.log").empty());
}

TEST_CASE("re-reading the log reproduces the in-memory events") {
  TempDir dir;
  std::vector<SessionEvent> before;
  {
    auto s = Session::create(dir / "s.log", config());
    std::mt19937_64 rng(1);
    for (int i = 0; i < 60; ++i) {
      if (i % 7 == 0) {
        s->append(EventKind::kSampleDrawn, {{"rows", {rng() % 100, rng() % 100}}});
      } else {
        s->append(EventKind::kLabelSubmitted, label(rng() % 30, rng() % 2 ? "positive" : "negative"));
      }
    }
    before = s->events();
  }
  SessionConfig cfg;
  CHECK(Session::read_events(dir / "s.log", &cfg) == before);
  CHECK(cfg.to_json() == config().to_json());
  auto reopened = Session::open(dir / "s.log");
  CHECK(reopened->events() == before);
  CHECK(reopened->append(EventKind::kQueryIssued, {{"query", "x"}}) == 61);
  CHECK(Session::open(dir / "s.log")->latest_sequence() == 61);
}

TEST_CASE("tampering and truncation are detected") {
  TempDir dir;
  {
    auto s = Session::create(dir / "s.log", config());
    s->append(EventKind::kLabelSubmitted, label(1, "positive"));
    s->append(EventKind::kLabelSubmitted, label(2, "negative"));
  }
  std::string text;
  {
    std::ifstream in(dir / "s.log", std::ios::binary);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto write = [&](const std::string& body) {
    std::ofstream out(dir / "s.log", std::ios::binary | std::ios::trunc);
    out << body;
  };

  std::string tampered = text;
  const auto at = tampered.rfind("negative");
  tampered.replace(at, 8, "positive");
  write(tampered);
  CHECK_THROWS_AS(Session::open(dir / "s.log"), LogCorruption);

  write(text.substr(0, text.size() - 5));
  CHECK_THROWS_AS(Session::open(dir / "s.log"), LogCorruption);

  write("");
  CHECK_THROWS_AS(Session::open(dir / "s.log"), LogCorruption);

  write(text);
  CHECK(Session::open(dir / "s.log")->latest_sequence() == 2);
  CHECK_THROWS_AS(Session::open(dir / "missing.log"), NotFound);
}

TEST_CASE("the last label event for a row wins") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  s->append(EventKind::kQueryIssued, {{"query", "q"}});
  s->append(EventKind::kLabelSubmitted, label(5, "positive"));
  s->append(EventKind::kLabelEdited, label(5, "negative", "review_edit"));
  const auto now = s->current_labels();
  REQUIRE(now.size() == 1);
  CHECK(now.at(5).label == Label::kNegative);
  CHECK(now.at(5).source == LabelSource::kReviewEdit);
  CHECK(now.at(5).sequence == 3);
  CHECK(s->current_labels(1).empty());
  CHECK(s->current_labels(2).at(5).label == Label::kPositive);
  CHECK_THROWS_AS(s->current_labels(4), OutOfRange);
  CHECK(s->events().size() == 3);
}

TEST_CASE("labels at any prefix equal a brute-force replay") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  std::mt19937_64 rng(2);
  std::vector<std::tuple<RowId, Label>> history;
  for (int i = 0; i < 300; ++i) {
    const RowId row = rng() % 40;
    const bool pos = rng() % 2;
    if (i % 5 == 0) {
      s->append(EventKind::kQueryIssued, {{"query", "q"}});
      history.emplace_back(~RowId{0}, Label::kPositive);
    } else {
      s->append(i % 3 ? EventKind::kLabelSubmitted : EventKind::kLabelEdited,
                label(row, pos ? "positive" : "negative"));
      history.emplace_back(row, pos ? Label::kPositive : Label::kNegative);
    }
  }
  for (int trial = 0; trial < 50; ++trial) {
    const std::uint64_t at = rng() % 301;
    std::map<RowId, Label> expected;
    for (std::uint64_t k = 0; k < at; ++k) {
      const auto [row, lab] = history[k];
      if (row != ~RowId{0}) expected[row] = lab;
    }
    const auto got = s->current_labels(at);
    REQUIRE(got.size() == expected.size());
    for (const auto& [row, lab] : expected) CHECK(got.at(row).label == lab);
  }
}

TEST_CASE("train/test split") {
  SplitAssignment all{1.0, 4};
  for (RowId r = 0; r < 1000; ++r) CHECK(all.is_train(r));
  SplitAssignment a{0.7, 9};
  std::size_t train = 0;
  for (RowId r = 0; r < 10000; ++r) {
    train += a.is_train(r);
    CHECK(a.is_train(r) == a.is_train(r));
  }
  CHECK(std::abs(train / 10000.0 - 0.7) <= 0.02);
  SplitAssignment other{0.7, 10};
  std::size_t moved = 0;
  for (RowId r = 0; r < 1000; ++r) moved += a.is_train(r) != other.is_train(r);
  CHECK(moved > 0);
}

TEST_CASE("session config validation") {
  auto c = config();
  CHECK(SessionConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto j = c.to_json();
  j["session_id"] = "../escape";
  CHECK_THROWS_AS(SessionConfig::from_json(j), InvalidArgument);
  j = c.to_json();
  j["split_ratio"] = 0.0;
  CHECK_THROWS_AS(SessionConfig::from_json(j), InvalidArgument);
  j = c.to_json();
  j["folds"] = 1;
  CHECK_THROWS_AS(SessionConfig::from_json(j), InvalidArgument);
  j = c.to_json();
  j["grid"] = json::array();
  CHECK_THROWS_AS(SessionConfig::from_json(j), InvalidArgument);
}

TEST_CASE("review filters equal a linear scan") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  std::mt19937_64 rng(3);
  std::map<RowId, double> scores;
  for (RowId r = 0; r < 200; ++r) scores[r] = (rng() % 1000) / 1000.0;
  for (int i = 0; i < 150; ++i) {
    s->append(EventKind::kLabelSubmitted, label(rng() % 200, rng() % 3 == 0 ? "positive" : "negative"));
  }
  const Predictor predict = [&](RowId r) { return scores.at(r); };
  const auto labels = s->current_labels();

  for (auto filter : {ReviewFilter::kAll, ReviewFilter::kFalsePositive, ReviewFilter::kFalseNegative,
                      ReviewFilter::kDisagreement}) {
    std::set<RowId> expected;
    for (const auto& [row, rec] : labels) {
      const bool pos = rec.label == Label::kPositive;
      const bool pred = scores[row] >= 0.5;
      const bool fp = !pos && pred, fn = pos && !pred;
      if (filter == ReviewFilter::kAll || (filter == ReviewFilter::kFalsePositive && fp) ||
          (filter == ReviewFilter::kFalseNegative && fn) || (filter == ReviewFilter::kDisagreement && (fp || fn))) {
        expected.insert(row);
      }
    }
    const auto rows = s->review_query(filter, ReviewSort::kScore, &predict);
    std::set<RowId> got;
    for (const auto& r : rows) got.insert(r.row);
    CHECK(got == expected);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(*rows[i - 1].score >= *rows[i].score);
  }

  const auto by_recency = s->review_query(ReviewFilter::kAll, ReviewSort::kRecency, nullptr);
  for (std::size_t i = 1; i < by_recency.size(); ++i) {
    CHECK(by_recency[i - 1].record.sequence > by_recency[i].record.sequence);
  }
  const auto by_row = s->review_query(ReviewFilter::kAll, ReviewSort::kRowId, nullptr);
  for (std::size_t i = 1; i < by_row.size(); ++i) CHECK(by_row[i - 1].row < by_row[i].row);
  CHECK_THROWS_AS(s->review_query(ReviewFilter::kFalsePositive, ReviewSort::kRowId, nullptr), Unavailable);
}

TEST_CASE("a perfect model has no errors and one mislabeled row lands in one filter") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  for (RowId r = 0; r < 10; ++r) s->append(EventKind::kLabelSubmitted, label(r, r < 5 ? "positive" : "negative"));
  const Predictor perfect = [](RowId r) { return r < 5 ? 0.9 : 0.1; };
  CHECK(s->review_query(ReviewFilter::kFalsePositive, ReviewSort::kRowId, &perfect).empty());
  CHECK(s->review_query(ReviewFilter::kFalseNegative, ReviewSort::kRowId, &perfect).empty());
  s->append(EventKind::kLabelEdited, label(2, "negative", "review_edit"));
  const auto fp = s->review_query(ReviewFilter::kFalsePositive, ReviewSort::kRowId, &perfect);
  REQUIRE(fp.size() == 1);
  CHECK(fp[0].row == 2);
  CHECK(s->review_query(ReviewFilter::kFalseNegative, ReviewSort::kRowId, &perfect).empty());
}

TEST_CASE("metrics history has one entry per trained model") {
  TempDir dir;
  auto s = Session::create(dir / "s.log", config());
  CHECK(s->metrics_history().empty());
  s->append(EventKind::kModelTrained, {{"version", 1u}, {"positives", 3}, {"negatives", 2}});
  s->append(EventKind::kLabelSubmitted, label(1, "positive"));
  s->append(EventKind::kModelTrained, {{"version", 2u}, {"positives", 4}, {"negatives", 2}});
  const auto h = s->metrics_history();
  REQUIRE(h.size() == 2);
  CHECK(h[0]["version"] == 1);
  CHECK(h[1]["positives"] == 4);
  CHECK(s->model_count() == 2);
}
