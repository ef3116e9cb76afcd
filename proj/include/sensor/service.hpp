#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sensor/config.hpp"

namespace sensor::service {

using Json = nlohmann::json;

// Carries the HTTP status and the {code, message, details} body.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message, Json details = Json::object())
      : std::runtime_error(message), status(status), code(std::move(code)), details(std::move(details)) {}

  Json body() const { return Json{{"code", code}, {"message", what()}, {"details", details}}; }

  int status;
  std::string code;
  Json details;
};

struct MailMessage {
  std::string to;
  std::string subject;
  std::string body;
};

class MailSender {
 public:
  virtual ~MailSender() = default;
  virtual void send(const MailMessage& message) = 0;
};

// Dev-mode sender: writes every message to a log stream.
class ConsoleMailSender : public MailSender {
 public:
  explicit ConsoleMailSender(std::ostream& out) : out_(out) {}
  void send(const MailMessage& message) override;

 private:
  std::ostream& out_;
  std::mutex mu_;
};

// Keeps messages in memory; tests read OTP codes and invitations from it.
class RecordingMailSender : public MailSender {
 public:
  void send(const MailMessage& message) override;
  std::vector<MailMessage> messages() const;
  std::optional<MailMessage> last_to(const std::string& email) const;

 private:
  mutable std::mutex mu_;
  std::vector<MailMessage> messages_;
};

// First 6-digit run after "code:" in a verification mail.
std::optional<std::string> extract_otp(const std::string& mail_body);

const std::string& annotation_guidelines();

enum class PasswordCost { Interactive, Minimum };

struct ServiceOptions {
  std::filesystem::path store_path = "sensor.db";
  std::string public_url = "http://localhost:8080";
  std::filesystem::path model_path;  // default model for model-annotate
  std::filesystem::path model_dir;   // request-selected models must live here
  std::filesystem::path prep_dir;    // text pre-processing resources
  std::string scrape_source;         // "fixture:<csv>", "live", or empty
  std::optional<std::uint64_t> expected_vocab_hash;
  std::int64_t otp_ttl_seconds = 600;
  int otp_attempts = 5;
  std::int64_t session_idle_seconds = 24 * 3600;
  PasswordCost password_cost = PasswordCost::Interactive;
  std::shared_ptr<MailSender> mail;
  std::function<std::int64_t()> clock;  // unix seconds; defaults to the system clock

  static ServiceOptions from_config(const KeyValueConfig& config);
  static const std::vector<std::string>& config_keys();
};

// Workflow core. Every call taking a token authenticates it first; errors
// surface as ApiError with the HTTP status the route returns.
class AnnotationService {
 public:
  explicit AnnotationService(ServiceOptions options);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  Json register_user(const Json& body);
  Json verify_otp(const Json& body);
  Json resend_otp(const Json& body);
  Json login(const Json& body);
  void logout(const std::string& token);
  Json me(const std::string& token);

  Json upload_file(const std::string& token, const std::string& name, const std::string& csv_text);
  Json scrape(const std::string& token, const Json& body);
  Json list_files(const std::string& token);
  Json get_file(const std::string& token, std::int64_t file_id);
  Json invite(const std::string& token, std::int64_t file_id, const Json& body);
  Json progress(const std::string& token, std::int64_t file_id);
  // category: "", "privacy_related" or "privacy_irrelevant" (model labels).
  Json reviews(const std::string& token, std::int64_t file_id, std::size_t cursor, std::size_t limit,
               const std::string& category = "");
  Json submit_labels(const std::string& token, std::int64_t file_id, const Json& body);
  Json model_annotate(const std::string& token, std::int64_t file_id, const Json& body);
  // Returns the filtered CSV without the disagreed rows.
  std::string submit_feedback(const std::string& token, std::int64_t file_id, const Json& body);
  std::string export_csv(const std::string& token, std::int64_t file_id, const std::string& mode,
                         std::optional<std::int64_t> generation = {});
  Json reassign(const std::string& token, std::int64_t file_id, const Json& body);
  Json audit_log(const std::string& token, std::int64_t file_id);

  const ServiceOptions& options() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// JSON-over-HTTP front end under /api/v1; static assets under /app when
// static_dir is set.
class HttpApi {
 public:
  HttpApi(AnnotationService& service, std::optional<std::filesystem::path> static_dir = {});
  ~HttpApi();

  // Returns the bound port (an ephemeral one when port is 0).
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sensor::service
