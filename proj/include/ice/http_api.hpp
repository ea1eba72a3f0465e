#pragma once

#include <memory>
#include <string>

#include "ice/loop_service.hpp"

namespace ice {

// JSON request/response front end for a LoopService.
//
//   GET  /search?q=&k=
//   GET  /sessions                          POST /sessions
//   POST /sessions/{id}/labels | sample | features
//   GET  /sessions/{id}/status | metrics | histogram?bins= | review?filter=&sort=
//   GET  /sessions/{id}/export/{version}
//   GET  /items/{row}?session=
//
// Errors come back as {"error": message} with 400 (bad input), 404 (unknown
// session, row or version), 409 (conflict), 503 (not available yet, e.g. a
// cold-start score_range request) or 500.
class HttpApi {
 public:
  explicit HttpApi(LoopService& service);
  ~HttpApi();
  HttpApi(const HttpApi&) = delete;
  HttpApi& operator=(const HttpApi&) = delete;

  // Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Maps an exception from the service onto an HTTP status code.
int http_status_for(const std::exception& e);

}  // namespace ice
