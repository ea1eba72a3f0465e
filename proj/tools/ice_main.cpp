#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ice/http_api.hpp"
#include "ice/loop_service.hpp"
#include "ice/model_export.hpp"
#include "ice/raw_store.hpp"
#include "ice/simulation.hpp"

namespace {

ice::HttpApi* g_api = nullptr;

void on_signal(int) {
  if (g_api) g_api->stop();
}

std::unique_ptr<ice::ColumnEngine> load_engine(const std::string& data, const std::string& dataset,
                                               std::uint32_t shards) {
  ice::EngineOptions options;
  options.shard_count = shards;
  return ice::ColumnEngine::load_dataset(ice::RawStore::open(data, dataset), options);
}

int run_import(const std::string& input, const std::string& dataset, std::uint32_t capacity,
               const std::string& out) {
  std::ifstream in(input, std::ios::binary);
  if (!in) throw ice::NotFound("cannot read " + input);
  const bool exists = std::filesystem::exists(ice::dataset_dir(out, dataset) / "manifest");
  const ice::ImportResult r =
      exists ? ice::append_items(out, ice::read_manifest(out, dataset), ice::lines_from(in), capacity)
             : ice::import_items(out, dataset, ice::lines_from(in), capacity);
  std::cout << (exists ? "appended " : "imported ") << r.report.imported << " records, skipped "
            << r.report.skipped << "; dataset '" << dataset << "' now has " << r.manifest.row_count()
            << " rows in " << r.manifest.buckets.size() << " buckets\n";
  for (const auto& reason : r.report.skip_reasons) std::cout << "  skipped: " << reason << "\n";
  return 0;
}

int run_serve(const std::string& data, const std::string& dataset, std::uint32_t shards,
              const std::string& host, int port, std::string sessions) {
  if (sessions.empty()) sessions = (std::filesystem::path(data) / "sessions" / dataset).string();
  ice::ServiceOptions options;
  options.session_dir = sessions;
  ice::LoopService service(load_engine(data, dataset, shards), options);
  if (std::filesystem::is_directory(sessions)) {
    for (const auto& entry : std::filesystem::directory_iterator(sessions)) {
      if (entry.path().extension() != ".log") continue;
      const auto st = service.open_session(entry.path());
      std::cerr << "reopened session " << st.session_id << " at model version " << st.model_version << "\n";
    }
  }
  ice::HttpApi api(service);
  const int bound = api.bind(host, port);
  g_api = &api;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "serving dataset '" << dataset << "' (" << service.engine().size() << " rows, " << shards
            << " shards) on http://" << host << ":" << bound << "\n";
  api.run();
  g_api = nullptr;
  return 0;
}

int run_simulate(const std::string& config_path, const std::string& out) {
  nlohmann::json config_json = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ice::NotFound("cannot read " + config_path);
    config_json = nlohmann::json::parse(in);
  }
  const ice::ExperimentConfig config = ice::ExperimentConfig::from_json(config_json);
  const ice::ExperimentReport report = ice::run_experiment(config);
  std::ofstream(out) << report.to_json().dump(2) << "\n";
  for (const auto& r : report.runs) {
    std::cout << r.strategy << " seed " << r.seed << ": "
              << (r.labels_to_target ? std::to_string(*r.labels_to_target) + " labels" : "target not reached")
              << " (" << r.seconds << " s)\n";
  }
  if (report.median_active) std::cout << "median active:  " << *report.median_active << "\n";
  if (report.median_uniform) std::cout << "median uniform: " << *report.median_uniform << "\n";
  std::cout << "total " << report.seconds << " s\n";
  return 0;
}

int run_stats(const std::string& data, const std::string& dataset, std::uint32_t shards) {
  std::cout << load_engine(data, dataset, shards)->stats_text();
  return 0;
}

// Scores line-delimited records with an exported model, without an engine.
int run_score(const std::string& model_path, const std::string& input) {
  std::ifstream mf(model_path);
  if (!mf) throw ice::NotFound("cannot read " + model_path);
  const ice::ExportedScorer scorer(nlohmann::json::parse(mf));
  std::ifstream in(input);
  if (!in) throw ice::NotFound("cannot read " + input);
  std::string line;
  std::cout.precision(17);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    const std::string text = rec.value("title", std::string{}) + " " + rec.value("body_text", std::string{});
    std::cout << rec.value("external_id", std::string{}) << "\t" << scorer.score_text(text) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ICE interactive classifier engine"};
  app.require_subcommand(1);

  std::string input, dataset, out, data, config, host = "127.0.0.1", sessions, model;
  std::uint32_t capacity = ice::kDefaultBucketCapacity;
  std::uint32_t shards = 4;
  int port = 8080;

  auto* imp = app.add_subcommand("import", "import (or append) line-delimited JSON records");
  imp->add_option("--input", input, "records, one JSON object per line")->required();
  imp->add_option("--dataset", dataset)->required();
  imp->add_option("--bucket-capacity", capacity)->check(CLI::PositiveNumber);
  imp->add_option("--out", out, "raw store root")->required();

  auto* serve = app.add_subcommand("serve", "serve the loop API over HTTP");
  serve->add_option("--data", data, "raw store root")->required();
  serve->add_option("--dataset", dataset)->required();
  serve->add_option("--shards", shards)->check(CLI::PositiveNumber);
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  serve->add_option("--host", host);
  serve->add_option("--sessions", sessions, "session log directory (default <data>/sessions/<dataset>)");

  auto* sim = app.add_subcommand("simulate", "run the simulated-teacher experiment");
  sim->add_option("--config", config, "experiment config JSON (defaults apply when omitted)");
  sim->add_option("--out", out, "report JSON")->required();

  auto* engine = app.add_subcommand("engine", "engine diagnostics");
  engine->require_subcommand(1);
  auto* stats = engine->add_subcommand("stats", "shard sizes, resident bytes, freshness");
  stats->add_option("--data", data)->required();
  stats->add_option("--dataset", dataset)->required();
  stats->add_option("--shards", shards)->check(CLI::PositiveNumber);

  auto* score = app.add_subcommand("score", "score records with an exported model");
  score->add_option("--model", model)->required();
  score->add_option("--input", input)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*imp) return run_import(input, dataset, capacity, out);
    if (*serve) return run_serve(data, dataset, shards, host, port, sessions);
    if (*sim) return run_simulate(config, out);
    if (*stats) return run_stats(data, dataset, shards);
    if (*score) return run_score(model, input);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
