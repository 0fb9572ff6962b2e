#pragma once

#include <memory>
#include <string>
#include <thread>

#include "emtree/service.hpp"

namespace httplib {
class Server;
}

namespace emtree {

// JSON bodies used by the HTTP API, exposed for the CLI and tests.
std::string qa_result_json(const QaResult& result);
std::string rules_json(const RuleSet& rules, const std::vector<AuditRecord>& audit);
std::string metrics_json(const LagMetrics& lag, const HistoryTree& tree, const UsageLedger& ledger);

// POST /events, /ask, /feedback; GET /tree?version=, /rules, /metrics, /health.
class HttpApi {
 public:
  explicit HttpApi(MemoryService& service);
  ~HttpApi();

  // Port 0 picks a free port. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks serving requests on the calling thread.
  void serve(const std::string& host, int port);
  void stop();

 private:
  void routes();

  MemoryService& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace emtree
