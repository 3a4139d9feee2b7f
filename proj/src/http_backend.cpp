#include "nfb/http_backend.hpp"

#include <chrono>
#include <cstdlib>

#include "httplib.h"
#include "json_internal.hpp"
#include "nfb/error.hpp"

namespace nfb {

namespace {

constexpr const char* kJson = "application/json";

bool client_side(ErrorCode code) {
  switch (code) {
    case ErrorCode::BackendUnavailable:
    case ErrorCode::ScriptExhausted:
      return false;
    default:
      return true;
  }
}

[[noreturn]] void raise_reply(int status, const std::string& body, const std::string& what) {
  std::optional<ErrorBody> parsed;
  try {
    parsed = error_from_json(body);
  } catch (const Error&) {
  }
  if (parsed) throw Error(parsed->code, parsed->message);
  throw Error(status >= 500 ? ErrorCode::BackendUnavailable : ErrorCode::BadFormat,
              what + ": HTTP " + std::to_string(status));
}

std::unique_ptr<httplib::Client> connect(const std::string& url, double timeout_s) {
  auto cli = std::make_unique<httplib::Client>(url);
  if (!cli->is_valid()) throw Error(ErrorCode::BadConfig, "unusable backend url '" + url + "'");
  const auto t = std::chrono::duration<double>(timeout_s);
  cli->set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
  cli->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
  cli->set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
  return cli;
}

}  // namespace

HttpBackend::HttpBackend(std::string url, double timeout_s) : url_(std::move(url)), timeout_s_(timeout_s) {
  while (!url_.empty() && url_.back() == '/') url_.pop_back();
  if (!(timeout_s_ > 0.0)) throw Error(ErrorCode::BadConfig, "backend timeout must be positive");
}

std::string HttpBackend::post(const std::string& path, const std::string& body) {
  auto cli = connect(url_, timeout_s_);
  auto res = cli->Post(path, body, kJson);
  if (!res) {
    throw Error(ErrorCode::BackendUnavailable,
                "POST " + url_ + path + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) raise_reply(res->status, res->body, "POST " + path);
  return res->body;
}

std::string HttpBackend::get(const std::string& path) {
  auto cli = connect(url_, timeout_s_);
  auto res = cli->Get(path);
  if (!res) {
    throw Error(ErrorCode::BackendUnavailable,
                "GET " + url_ + path + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) raise_reply(res->status, res->body, "GET " + path);
  return res->body;
}

ModelInfo HttpBackend::model_info() {
  {
    std::lock_guard lock(mutex_);
    if (info_) return *info_;
  }
  ModelInfo info = model_info_from_json(get("/v1/model"));
  std::lock_guard lock(mutex_);
  info_ = info;
  return info;
}

BackendResponse HttpBackend::forward(const BackendRequest& request) {
  return response_from_json(post("/v1/forward", to_json(request)));
}

BackendResponse HttpBackend::generate(const BackendRequest& request) {
  return response_from_json(post("/v1/generate", to_json(request)));
}

bool HttpBackend::healthy() {
  try {
    const auto j = detail::parse_json(get("/v1/health"), "health");
    return j.value("status", std::string{}) == "ok";
  } catch (const Error&) {
    return false;
  }
}

// ---------------------------------------------------------------- server

struct BackendServer::Impl {
  Backend* backend;
  httplib::Server server;
};

namespace {

void reply_error(httplib::Response& res, const Error& e) {
  res.status = client_side(e.code()) ? 400 : 503;
  res.set_content(error_json(e), kJson);
}

template <typename F>
void handle(httplib::Response& res, F&& f) {
  try {
    res.set_content(f(), kJson);
    res.status = 200;
  } catch (const Error& e) {
    reply_error(res, e);
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(error_json(Error(ErrorCode::BackendUnavailable, e.what())), kJson);
  }
}

}  // namespace

BackendServer::BackendServer(Backend& backend) : impl_(std::make_unique<Impl>()) {
  impl_->backend = &backend;
  auto& srv = impl_->server;
  Backend* b = &backend;
  srv.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"status\":\"ok\"}", kJson);
  });
  srv.Get("/v1/model", [b](const httplib::Request&, httplib::Response& res) {
    handle(res, [&] { return to_json(b->model_info()); });
  });
  srv.Post("/v1/forward", [b](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return to_json(b->forward(request_from_json(req.body))); });
  });
  srv.Post("/v1/generate", [b](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return to_json(b->generate(request_from_json(req.body))); });
  });
}

BackendServer::~BackendServer() { stop(); }

int BackendServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  host_ = host;
  if (port == 0) {
    port_ = srv.bind_to_any_port(host);
  } else {
    port_ = srv.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw Error(ErrorCode::BackendUnavailable, "cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return port_;
}

bool BackendServer::listen(const std::string& host, int port) {
  host_ = host;
  port_ = port;
  return impl_->server.listen(host, port);
}

void BackendServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::string BackendServer::url() const { return "http://" + host_ + ":" + std::to_string(port_); }

std::unique_ptr<Backend> make_backend(std::string spec, double timeout_s, ToyModelSpec toy) {
  if (spec.empty()) {
    const char* env = std::getenv("NFB_BACKEND_URL");
    spec = env && *env ? env : "toy";
  }
  if (spec == "toy") return std::make_unique<ToyBackend>(toy);
  if (spec.rfind("http://", 0) == 0) return std::make_unique<HttpBackend>(spec, timeout_s);
  throw Error(ErrorCode::BadConfig, "backend must be 'toy' or an http:// url, got '" + spec + "'");
}

}  // namespace nfb
