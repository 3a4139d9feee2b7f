#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "nfb/backend.hpp"

namespace nfb {

// Client side of the wire protocol. Each call opens its own connection, so
// one instance may be shared by several worker threads. Transport failures and
// 5xx replies surface as BackendUnavailable; error bodies are mapped back to
// their ErrorCode.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(std::string url, double timeout_s = 120.0);

  ModelInfo model_info() override;
  BackendResponse forward(const BackendRequest& request) override;
  BackendResponse generate(const BackendRequest& request) override;
  bool healthy() override;

  const std::string& url() const noexcept { return url_; }

 private:
  std::string post(const std::string& path, const std::string& body);
  std::string get(const std::string& path);

  std::string url_;
  double timeout_s_;
  std::mutex mutex_;
  std::optional<ModelInfo> info_;
};

// Serves any Backend over HTTP on a background thread.
class BackendServer {
 public:
  explicit BackendServer(Backend& backend);
  ~BackendServer();
  BackendServer(const BackendServer&) = delete;
  BackendServer& operator=(const BackendServer&) = delete;

  // Binds and starts listening; port 0 picks a free port. Returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks in the calling thread until stop() is called from elsewhere.
  bool listen(const std::string& host, int port);
  void stop();

  int port() const noexcept { return port_; }
  std::string url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  std::string host_;
  int port_ = 0;
};

// "toy" gives an in-process toy backend, anything starting with http:// an
// HttpBackend. An empty spec falls back to $NFB_BACKEND_URL, then "toy".
std::unique_ptr<Backend> make_backend(std::string spec, double timeout_s = 120.0,
                                      ToyModelSpec toy = {});

}  // namespace nfb
