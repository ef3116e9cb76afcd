#pragma once

#include <atomic>
#include <memory>
#include <thread>

// Eigen before httplib: <resolv.h> defines a _res macro.
#include "sensor/embeddings.hpp"
#include "sensor/grace.hpp"
#include "sensor/service.hpp"
#include "sensor/textprep.hpp"
#include "test_util.hpp"

#include "httplib.h"

namespace sensor::testing {

using service::Json;

struct HttpResult {
  int status = 0;
  std::string body;
  Json json() const { return Json::parse(body); }
};

// Service on an ephemeral localhost port with a recording mailer and a
// settable clock.
class ServiceHarness {
 public:
  explicit ServiceHarness(std::function<void(service::ServiceOptions&)> tweak = {}) : tweak_(std::move(tweak)) {
    start();
  }
  ~ServiceHarness() { shutdown(); }

  void start() {
    service::ServiceOptions o;
    o.store_path = dir / "store.db";
    o.password_cost = service::PasswordCost::Minimum;
    o.mail = mail;
    o.prep_dir = data_dir();
    o.clock = [this] { return clock.load(); };
    if (tweak_) tweak_(o);
    svc = std::make_unique<service::AnnotationService>(o);
    http = std::make_unique<service::HttpApi>(*svc);
    port = http->bind("127.0.0.1", 0);
    server = std::thread([this] { http->run(); });
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    for (int i = 0; i < 200 && !http->running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }

  void shutdown() {
    if (!http) return;
    http->stop();
    if (server.joinable()) server.join();
    client.reset();
    http.reset();
    svc.reset();
  }

  // Simulates a process restart on the same store.
  void restart() {
    shutdown();
    start();
  }

  HttpResult call(const std::string& method, const std::string& path, const std::string& token = "",
                  const Json& body = Json()) {
    httplib::Headers h;
    if (!token.empty()) h.emplace("Authorization", "Bearer " + token);
    const std::string payload = body.is_null() ? "" : body.dump();
    httplib::Result r = method == "GET"    ? client->Get(path, h)
                        : method == "POST" ? client->Post(path, h, payload, "application/json")
                                           : client->Delete(path, h);
    if (!r) return {0, "transport error"};
    return {r->status, r->body};
  }

  HttpResult upload(const std::string& token, const std::string& name, const std::string& csv) {
    httplib::Headers h{{"Authorization", "Bearer " + token}};
    httplib::MultipartFormDataItems items{{"file", csv, name + ".csv", "text/csv"}, {"name", name, "", ""}};
    auto r = client->Post("/api/v1/files", h, items);
    if (!r) return {0, "transport error"};
    return {r->status, r->body};
  }

  std::string otp_for(const std::string& email) {
    auto m = mail->last_to(email);
    if (!m) return {};
    return service::extract_otp(m->body).value_or("");
  }

  // register + verify + login; returns the session token.
  std::string account(const std::string& email, const std::string& role, const std::string& password = "password123") {
    call("POST", "/api/v1/auth/register", "", Json{{"email", email}, {"password", password}, {"role", role}});
    call("POST", "/api/v1/auth/verify-otp", "", Json{{"email", email}, {"code", otp_for(email)}});
    auto r = call("POST", "/api/v1/auth/login", "", Json{{"email", email}, {"password", password}});
    if (r.status != 200) return {};
    return r.json()["token"].get<std::string>();
  }

  TempDir dir;
  std::shared_ptr<service::RecordingMailSender> mail = std::make_shared<service::RecordingMailSender>();
  std::atomic<std::int64_t> clock{1'700'000'000};
  std::unique_ptr<service::AnnotationService> svc;
  std::unique_ptr<service::HttpApi> http;
  std::unique_ptr<httplib::Client> client;
  std::thread server;
  int port = 0;

 private:
  std::function<void(service::ServiceOptions&)> tweak_;
};

// 10 reviews, "content" as the text column.
inline std::string ten_review_csv() {
  return "reviewId,content,score\n"
         "r1,Please add an option to hide my location from strangers,4\n"
         "r2,The app leaks my contacts after the update,1\n"
         "r3,Great game and fun levels,5\n"
         "r4,I want a setting to make my profile private,3\n"
         "r5,Bug: my messages are visible to everyone now,1\n"
         "r6,Love the colors and music,5\n"
         "r7,Add a way to delete my search history please,4\n"
         "r8,Camera turns on by itself and records without permission,1\n"
         "r9,Nice graphics but too many ads,3\n"
         "r10,Crashes every time I open the map,2\n";
}

// A small untrained GRACE model over the processed vocabulary of `texts`.
inline void write_toy_model(const std::filesystem::path& path, const std::vector<std::string>& texts, std::uint64_t seed = 3) {
  auto prep = textprep::PrepConfig::load(data_dir());
  std::vector<std::vector<std::string>> docs;
  for (const auto& t : texts) docs.push_back(textprep::postprocess(textprep::preprocess(t, prep), prep));
  auto vocab = embed::Vocabulary::build(docs, 1);
  grace::GraceConfig cfg;
  cfg.embed_dim = 6;
  cfg.hidden = 5;
  cfg.dense = 4;
  cfg.max_len = 20;
  auto model = grace::GraceModel::initialize(cfg, vocab, seed);
  grace::save_model(model, path);
}

}  // namespace sensor::testing
