#include "ice/http_api.hpp"

#include <charconv>

#include <httplib.h>

namespace ice {

int http_status_for(const std::exception& e) {
  if (dynamic_cast<const NotFound*>(&e)) return 404;
  if (dynamic_cast<const InvalidArgument*>(&e) || dynamic_cast<const OutOfRange*>(&e)) return 400;
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return 400;
  if (dynamic_cast<const Conflict*>(&e)) return 409;
  if (dynamic_cast<const Unavailable*>(&e)) return 503;
  return 500;
}

namespace {

void reply(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

nlohmann::json body_of(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

std::uint64_t parse_u64(const std::string& text, const char* what) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw InvalidArgument(std::string("bad ") + what + " '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& text, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw InvalidArgument(std::string("bad ") + what + " '" + text + "'");
  return v;
}

std::string param(const httplib::Request& req, const char* name, std::string fallback = {}) {
  return req.has_param(name) ? req.get_param_value(name) : fallback;
}

std::vector<LabelInput> parse_labels(const nlohmann::json& body) {
  std::vector<LabelInput> out;
  const nlohmann::json& list = body.is_array() ? body : body.at("labels");
  for (const auto& l : list) {
    LabelInput in;
    in.row = l.at("row").get<RowId>();
    in.label = parse_label(l.at("label").get<std::string>());
    in.source = parse_label_source(l.value("source", std::string("search")));
    out.push_back(in);
  }
  return out;
}

}  // namespace

struct HttpApi::Impl {
  LoopService& service;
  httplib::Server server;

  explicit Impl(LoopService& s) : service(s) { routes(); }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        reply(res, {{"error", e.what()}}, http_status_for(e));
      } catch (...) {
        reply(res, {{"error", "unknown failure"}}, 500);
      }
    });
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    server.Get("/search", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string q = param(req, "q");
      const std::size_t k = parse_u64(param(req, "k", "10"), "k");
      nlohmann::json results = nlohmann::json::array();
      for (const ScoredRow& r : service.search(q, k)) {
        const RowResult row = service.engine().get_row(r.row, {"title"});
        results.push_back({{"row", r.row},
                           {"score", r.score},
                           {"title", std::get<std::string>(row.values.at("title"))}});
      }
      reply(res, {{"query", q}, {"results", results}});
    });

    server.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, {{"sessions", service.session_ids()}});
    });

    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      const SessionConfig config = SessionConfig::from_json(body_of(req));
      reply(res, service.create_session(config).to_json(), 201);
    });

    server.Post(R"(/sessions/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) {
      const SubmitResult r = service.submit_labels(req.matches[1], parse_labels(body_of(req)));
      reply(res, {{"last_sequence", r.last_sequence}, {"retrained", r.retrained}, {"status", r.status.to_json()}});
    });

    server.Post(R"(/sessions/([^/]+)/sample)", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json items = nlohmann::json::array();
      for (const auto& it : service.draw_sample(req.matches[1], SampleRequest::from_json(body_of(req)))) {
        items.push_back(it.to_json());
      }
      reply(res, {{"items", items}});
    });

    server.Post(R"(/sessions/([^/]+)/features)", [this](const httplib::Request& req, httplib::Response& res) {
      const FeatureEditResult r =
          service.feature_edit(req.matches[1], FeatureEditRequest::from_json(body_of(req)));
      reply(res, {{"key", r.key}, {"retrained", r.retrained}, {"status", r.status.to_json()}});
    });

    server.Get(R"(/sessions/([^/]+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, service.status(req.matches[1]).to_json());
    });

    server.Get(R"(/sessions/([^/]+)/metrics)", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, {{"history", service.metrics_history(req.matches[1])}});
    });

    server.Get(R"(/sessions/([^/]+)/histogram)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto bins = parse_u64(param(req, "bins", "20"), "bins");
      if (bins < 1 || bins > 1000) throw InvalidArgument("bins must lie in [1, 1000]");
      const Histogram h = service.score_histogram(req.matches[1], static_cast<std::uint32_t>(bins));
      reply(res, {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}, {"below", h.below}, {"above", h.above}});
    });

    server.Get(R"(/sessions/([^/]+)/review)", [this](const httplib::Request& req, httplib::Response& res) {
      const ReviewFilter filter = parse_review_filter(param(req, "filter", "all"));
      const ReviewSort sort = parse_review_sort(param(req, "sort", "recency"));
      const double threshold = req.has_param("threshold") ? parse_double(param(req, "threshold"), "threshold") : 0.5;
      nlohmann::json rows = nlohmann::json::array();
      for (const ReviewRow& r : service.review(req.matches[1], filter, sort, threshold)) {
        nlohmann::json j{{"row", r.row},
                         {"label", to_string(r.record.label)},
                         {"source", to_string(r.record.source)},
                         {"sequence", r.record.sequence}};
        j["score"] = r.score ? nlohmann::json(*r.score) : nlohmann::json(nullptr);
        rows.push_back(std::move(j));
      }
      reply(res, {{"rows", rows}});
    });

    server.Get(R"(/sessions/([^/]+)/export/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, service.export_model(req.matches[1], parse_u64(req.matches[2], "version")));
    });

    server.Get(R"(/items/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const RowId row = parse_u64(req.matches[1], "row");
      if (row >= service.engine().size()) throw NotFound("row " + std::to_string(row) + " does not exist");
      reply(res, service.item(row, param(req, "session")));
    });
  }
};

HttpApi::HttpApi(LoopService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpApi::~HttpApi() { stop(); }

int HttpApi::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpApi::run() { impl_->server.listen_after_bind(); }

void HttpApi::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace ice
