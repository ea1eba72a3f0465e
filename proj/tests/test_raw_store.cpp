#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "ice/hash.hpp"
#include "test_util.hpp"

using namespace ice;
using ice::testing::TempDir;

namespace {

std::vector<RawRecord> numbered(std::size_t n, std::size_t offset = 0) {
  std::vector<RawRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(ice::testing::record(offset + i, "body " + std::to_string(offset + i),
                                       "title " + std::to_string(offset + i)));
  }
  return out;
}

}  // namespace

TEST_CASE("records fill buckets contiguously") {
  TempDir dir;
  const auto r = import_items(dir.path(), "d", records_from(numbered(10)), 4);
  REQUIRE(r.manifest.buckets.size() == 3);
  CHECK(r.manifest.buckets[0].row_count == 4);
  CHECK(r.manifest.buckets[1].row_count == 4);
  CHECK(r.manifest.buckets[2].row_count == 2);
  CHECK(r.manifest.buckets[0].start_row_id == 0);
  CHECK(r.manifest.buckets[1].start_row_id == 4);
  CHECK(r.manifest.buckets[2].start_row_id == 8);
  CHECK(r.manifest.row_count() == 10);
  CHECK(read_manifest(dir.path(), "d") == r.manifest);
}

TEST_CASE("empty import publishes an empty manifest") {
  TempDir dir;
  const auto r = import_items(dir.path(), "d", records_from({}), 4);
  CHECK(r.manifest.row_count() == 0);
  CHECK(r.manifest.buckets.empty());
  CHECK(RawStore::open(dir.path(), "d")->size() == 0);
}

TEST_CASE("importing the same input twice gives identical bytes") {
  TempDir a, b;
  const auto recs = numbered(1000);
  const auto ra = import_items(a.path(), "d", records_from(recs), 64);
  const auto rb = import_items(b.path(), "d", records_from(recs), 64);
  REQUIRE(ra.manifest == rb.manifest);
  for (const auto& bucket : ra.manifest.buckets) {
    const auto fa = dataset_dir(a.path(), "d") / bucket.file;
    const auto fb = dataset_dir(b.path(), "d") / bucket.file;
    std::ifstream ia(fa, std::ios::binary), ib(fb, std::ios::binary);
    std::stringstream sa, sb;
    sa << ia.rdbuf();
    sb << ib.rdbuf();
    CHECK(sa.str() == sb.str());
    CHECK(digest_file(fa) == bucket.digest);
  }
}

TEST_CASE("importing over an existing dataset is refused") {
  TempDir dir;
  import_items(dir.path(), "d", records_from(numbered(3)), 4);
  CHECK_THROWS_AS(import_items(dir.path(), "d", records_from(numbered(3)), 4), ImmutabilityViolation);
}

TEST_CASE("append continues the row numbering and leaves old buckets untouched") {
  TempDir dir;
  const auto first = import_items(dir.path(), "d", records_from(numbered(10)), 4);
  const auto before = digest_file(dataset_dir(dir.path(), "d") / first.manifest.buckets[0].file);
  const auto r = append_items(dir.path(), first.manifest, records_from(numbered(3, 10)), 4);
  CHECK(r.manifest.row_count() == 13);
  CHECK(r.manifest.buckets.back().start_row_id == 10);
  CHECK(r.manifest.buckets.back().row_count == 3);
  CHECK(digest_file(dataset_dir(dir.path(), "d") / first.manifest.buckets[0].file) == before);
  const auto store = RawStore::open(dir.path(), "d");
  for (RowId row = 10; row < 13; ++row) {
    CHECK(store->fetch_record(row).external_id == "x" + std::to_string(row));
  }
}

TEST_CASE("append with a stale manifest is refused") {
  TempDir dir;
  const auto first = import_items(dir.path(), "d", records_from(numbered(4)), 4);
  append_items(dir.path(), first.manifest, records_from(numbered(2, 4)), 4);
  CHECK_THROWS_AS(append_items(dir.path(), first.manifest, records_from(numbered(2, 6)), 4),
                  ImmutabilityViolation);
}

TEST_CASE("append to a dataset that was never imported starts at row 0") {
  TempDir dir;
  DatasetManifest empty;
  empty.dataset_id = "fresh";
  const auto r = append_items(dir.path(), empty, records_from(numbered(3)), 4);
  CHECK(r.manifest.buckets.front().start_row_id == 0);
  CHECK(r.manifest.row_count() == 3);
}

TEST_CASE("append to an empty dataset behaves like an import") {
  TempDir dir;
  const auto empty = import_items(dir.path(), "d", records_from({}), 4);
  const auto r = append_items(dir.path(), empty.manifest, records_from(numbered(5)), 4);
  CHECK(r.manifest.row_count() == 5);
  CHECK(r.manifest.buckets.front().start_row_id == 0);
}

TEST_CASE("fetch returns the imported record and rejects rows past the end") {
  TempDir dir;
  const auto recs = numbered(1);
  import_items(dir.path(), "d", records_from(recs), 4);
  const auto store = RawStore::open(dir.path(), "d");
  CHECK(store->fetch_raw(0) == serialize_raw_record(recs[0]));
  CHECK_THROWS_AS(store->fetch_raw(1), OutOfRange);
}

TEST_CASE("random rows match the source records") {
  TempDir dir;
  const auto recs = numbered(2000);
  import_items(dir.path(), "d", records_from(recs), 97);
  const auto store = RawStore::open(dir.path(), "d");
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const RowId row = rng() % recs.size();
    const RawRecord got = store->fetch_record(row);
    CHECK(got.external_id == recs[row].external_id);
    CHECK(got.title == recs[row].title);
    CHECK(got.body_text == recs[row].body_text);
    CHECK(got.url == recs[row].url);
  }
}

TEST_CASE("bad lines are skipped and counted") {
  TempDir dir;
  std::istringstream in(
      "{\"external_id\":\"a\",\"url\":\"u\",\"title\":\"t\",\"body_text\":\"b\"}\n"
      "not json\n"
      "\n"
      "{\"external_id\":\"b\"}\n"
      "{\"external_id\":\"c\",\"url\":\"u\",\"title\":\"t\",\"body_text\":\"b\"}\n");
  const auto r = import_items(dir.path(), "d", lines_from(in), 10);
  CHECK(r.report.imported == 2);
  CHECK(r.report.skipped == 3);
  CHECK(r.manifest.row_count() == 2);
  CHECK(RawStore::open(dir.path(), "d")->fetch_record(1).external_id == "c");
}

TEST_CASE("a corrupted bucket is detected on read") {
  TempDir dir;
  const auto r = import_items(dir.path(), "d", records_from(numbered(5)), 10);
  const auto path = dataset_dir(dir.path(), "d") / r.manifest.buckets[0].file;
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);
    f.put('#');
  }
  CHECK_THROWS_AS(RawStore::open(dir.path(), "d")->fetch_raw(0), CorruptionError);
}

TEST_CASE("an unreachable store fails reads with Unavailable") {
  TempDir dir;
  import_items(dir.path(), "d", records_from(numbered(5)), 10);
  const auto store = RawStore::open(dir.path(), "d");
  store->set_reachable(false);
  CHECK_THROWS_AS(store->fetch_raw(0), Unavailable);
  store->set_reachable(true);
  CHECK(store->fetch_record(0).external_id == "x0");
}

TEST_CASE("dataset ids cannot escape the root") {
  TempDir dir;
  CHECK_THROWS_AS(import_items(dir.path(), "../x", records_from(numbered(1)), 4), InvalidArgument);
  CHECK_THROWS_AS(import_items(dir.path(), "", records_from(numbered(1)), 4), InvalidArgument);
}

TEST_CASE("manifest text round-trips and validation rejects gaps") {
  TempDir dir;
  const auto r = import_items(dir.path(), "d", records_from(numbered(9)), 4);
  CHECK(DatasetManifest::from_text(r.manifest.to_text()) == r.manifest);
  DatasetManifest broken = r.manifest;
  broken.buckets[1].start_row_id += 1;
  CHECK_THROWS_AS(broken.validate(), CorruptionError);
}
