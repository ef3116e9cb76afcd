#include <atomic>
#include <charconv>

#include "httplib.h"
#include "sensor/service.hpp"

namespace sensor::service {

namespace {

std::string bearer(const httplib::Request& req) {
  auto h = req.get_header_value("Authorization");
  const std::string prefix = "Bearer ";
  if (h.size() > prefix.size() && h.compare(0, prefix.size(), prefix) == 0) return h.substr(prefix.size());
  return {};
}

void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) { send_json(res, e.status, e.body()); }

Json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return Json::object();
  try {
    return Json::parse(req.body);
  } catch (const Json::parse_error&) {
    throw ApiError(400, "validation_error", "request body is not valid JSON");
  }
}

std::int64_t path_id(const httplib::Request& req) {
  const auto& s = req.matches[1].str();
  std::int64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{}) throw ApiError(404, "not_found", "no such file");
  return v;
}

std::size_t query_size(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const auto s = req.get_param_value(key);
  std::size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
    throw ApiError(400, "validation_error", "query parameter " + key + " must be a non-negative integer");
  }
  return v;
}

// Runs fn, mapping exceptions onto the JSON error envelope.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ApiError& e) {
      send_error(res, e);
    } catch (const ValidationError& e) {
      send_error(res, ApiError(400, "validation_error", e.what()));
    } catch (const std::exception& e) {
      send_error(res, ApiError(500, "internal", e.what()));
    }
  };
}

}  // namespace

struct HttpApi::Impl {
  AnnotationService& svc;
  httplib::Server server;
  std::atomic<bool> running{false};

  explicit Impl(AnnotationService& s) : svc(s) {}
};

HttpApi::HttpApi(AnnotationService& service, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>(service)) {
  auto& s = impl_->server;
  auto& svc = impl_->svc;
  const std::string api = "/api/v1";

  s.Get(api + "/health", guarded([](const httplib::Request&, httplib::Response& res) {
          send_json(res, 200, Json{{"status", "ok"}, {"version", SENSOR_VERSION}});
        }));

  s.Post(api + "/auth/register", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 201, svc.register_user(parse_body(req)));
         }));
  s.Post(api + "/auth/verify-otp", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.verify_otp(parse_body(req)));
         }));
  s.Post(api + "/auth/resend-otp", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.resend_otp(parse_body(req)));
         }));
  s.Post(api + "/auth/login", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.login(parse_body(req)));
         }));
  s.Post(api + "/auth/logout", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           svc.logout(bearer(req));
           send_json(res, 200, Json{{"logged_out", true}});
         }));
  s.Get(api + "/me", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.me(bearer(req)));
        }));

  s.Post(api + "/files", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           std::string name = req.has_param("name") ? req.get_param_value("name") : "";
           std::string csv;
           if (req.is_multipart_form_data()) {
             if (!req.has_file("file")) throw ApiError(400, "validation_error", "multipart field 'file' is required");
             auto part = req.get_file_value("file");
             csv = part.content;
             if (req.has_file("name")) name = req.get_file_value("name").content;
             else if (name.empty()) name = part.filename;
           } else {
             csv = req.body;
           }
           send_json(res, 201, svc.upload_file(bearer(req), name, csv));
         }));
  s.Get(api + "/files", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.list_files(bearer(req)));
        }));
  s.Post(api + "/scrape-proxy", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 201, svc.scrape(bearer(req), parse_body(req)));
         }));
  s.Get(api + R"(/files/(\d+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.get_file(bearer(req), path_id(req)));
        }));
  s.Post(api + R"(/files/(\d+)/invite)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.invite(bearer(req), path_id(req), parse_body(req)));
         }));
  s.Get(api + R"(/files/(\d+)/progress)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.progress(bearer(req), path_id(req)));
        }));
  s.Get(api + R"(/files/(\d+)/reviews)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          const auto category = req.has_param("category") ? req.get_param_value("category") : "";
          send_json(res, 200,
                    svc.reviews(bearer(req), path_id(req), query_size(req, "cursor", 0), query_size(req, "limit", 50),
                                category));
        }));
  s.Post(api + R"(/files/(\d+)/labels)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.submit_labels(bearer(req), path_id(req), parse_body(req)));
         }));
  s.Post(api + R"(/files/(\d+)/model-annotate)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.model_annotate(bearer(req), path_id(req), parse_body(req)));
         }));
  s.Post(api + R"(/files/(\d+)/feedback)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           res.status = 200;
           res.set_content(svc.submit_feedback(bearer(req), path_id(req), parse_body(req)), "text/csv");
         }));
  s.Get(api + R"(/files/(\d+)/export)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          const auto mode = req.has_param("mode") ? req.get_param_value("mode") : "";
          std::optional<std::int64_t> gen;
          if (req.has_param("generation")) gen = static_cast<std::int64_t>(query_size(req, "generation", 0));
          res.status = 200;
          res.set_content(svc.export_csv(bearer(req), path_id(req), mode, gen), "text/csv");
        }));
  s.Post(api + R"(/files/(\d+)/reassign)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
           send_json(res, 200, svc.reassign(bearer(req), path_id(req), parse_body(req)));
         }));
  s.Get(api + R"(/files/(\d+)/audit)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
          send_json(res, 200, svc.audit_log(bearer(req), path_id(req)));
        }));

  if (static_dir) {
    if (!s.set_mount_point("/app", static_dir->string())) {
      throw ValidationError("static directory does not exist: " + static_dir->string());
    }
  }

  s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty() && req.path.rfind("/api/", 0) == 0) {
      send_json(res, 404, ApiError(404, "not_found", "no route for " + req.method + " " + req.path).body());
    }
  });
}

HttpApi::~HttpApi() { stop(); }

int HttpApi::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw RuntimeError("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw RuntimeError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpApi::run() {
  impl_->running = true;
  impl_->server.listen_after_bind();
  impl_->running = false;
}

void HttpApi::stop() {
  if (impl_) impl_->server.stop();
}

bool HttpApi::running() const { return impl_->running && impl_->server.is_running(); }

}  // namespace sensor::service
