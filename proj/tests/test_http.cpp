#include <doctest.h>

#include <thread>

#include "nfb/conformance.hpp"
#include "nfb/error.hpp"
#include "nfb/http_backend.hpp"

using namespace nfb;

namespace {

BackendRequest toy_request() {
  ExampleSet ex;
  ex.pairs = {{"I kept my promise.", 0}, {"I took the last slice without asking.", 1}};
  BackendRequest r;
  r.id = "h1";
  r.transcript = build_control_prompt(ex, 1, ControlMode::Implicit, "I waited my turn.");
  r.want_layers = {1, 2};
  r.want_logit_tokens = {"0", "1"};
  return r;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::BadFormat;
}

}  // namespace

TEST_CASE("HTTP responses are byte-identical to in-process calls") {
  ToyBackend toy;
  BackendServer server(toy);
  server.start();
  HttpBackend http(server.url());
  CHECK(http.healthy());
  CHECK(to_json(http.model_info()) == to_json(toy.model_info()));
  const auto req = toy_request();
  CHECK(to_json(http.forward(req)) == to_json(toy.forward(req)));

  BackendRequest gen = req;
  gen.transcript = build_control_prompt(ExampleSet{}, 0, ControlMode::Explicit);
  gen.want_logit_tokens.clear();
  gen.generate = GenerateParams{};
  gen.generate->max_new_tokens = 8;
  CHECK(to_json(http.generate(gen)) == to_json(toy.generate(gen)));
}

TEST_CASE("error codes survive the round trip") {
  ToyBackend toy;
  BackendServer server(toy);
  server.start();
  HttpBackend http(server.url() + "/");
  auto req = toy_request();
  req.want_layers = {9};
  CHECK(code_of([&] { http.forward(req); }) == ErrorCode::BadLayer);
  req.want_layers = {1};
  req.want_logit_tokens = {"xy"};
  CHECK(code_of([&] { http.forward(req); }) == ErrorCode::BadToken);

  // A script that runs dry is a server-side failure.
  auto mock = script_mock(toy.model_info(), {toy.forward(toy_request())});
  BackendServer mock_server(*mock);
  mock_server.start();
  HttpBackend via_mock(mock_server.url());
  CHECK_NOTHROW(via_mock.forward(toy_request()));
  CHECK(code_of([&] { via_mock.forward(toy_request()); }) == ErrorCode::ScriptExhausted);
}

TEST_CASE("a dead endpoint is BackendUnavailable") {
  int port = 0;
  {
    ToyBackend toy;
    BackendServer server(toy);
    port = server.start();
  }
  HttpBackend http("http://127.0.0.1:" + std::to_string(port), 2.0);
  CHECK_FALSE(http.healthy());
  const auto e = code_of([&] { http.forward(toy_request()); });
  CHECK(e == ErrorCode::BackendUnavailable);
  CHECK(Error(e, "").retriable());
}

TEST_CASE("make_backend") {
  CHECK(dynamic_cast<ToyBackend*>(make_backend("toy").get()));
  CHECK(dynamic_cast<HttpBackend*>(make_backend("http://127.0.0.1:1").get()));
  CHECK(code_of([] { make_backend("grpc://x"); }) == ErrorCode::BadConfig);
  CHECK_THROWS_AS(HttpBackend("http://x", 0.0), Error);
}

TEST_CASE("concurrent clients share one server") {
  ToyBackend toy;
  BackendServer server(toy);
  server.start();
  HttpBackend http(server.url());
  const std::string expected = to_json(toy.forward(toy_request()));
  std::vector<std::string> got(6);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i) {
    threads.emplace_back([&, i] { got[i] = to_json(http.forward(toy_request())); });
  }
  for (auto& t : threads) t.join();
  for (const auto& g : got) CHECK(g == expected);
}

TEST_CASE("toy backend passes conformance in process and over HTTP") {
  ToyBackend toy;
  for (const auto& c : run_conformance(toy)) CHECK_MESSAGE(c.passed, c.name << ": " << c.detail);
  BackendServer server(toy);
  server.start();
  HttpBackend http(server.url());
  const auto results = run_conformance(http);
  CHECK(results.size() >= 8);
  for (const auto& c : results) CHECK_MESSAGE(c.passed, c.name << ": " << c.detail);
}

TEST_CASE("conformance catches a backend that breaks the contract") {
  ToyBackend toy;
  auto mock = script_mock(toy.model_info(), {toy.forward(toy_request())});
  CHECK_FALSE(all_passed(run_conformance(*mock)));
}
