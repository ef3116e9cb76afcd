#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sensor/corpus.hpp"

namespace sensor::acquisition {

struct ScrapeRequest {
  std::string app_id;
  Date start_date;
  Date end_date;
  std::size_t max_reviews = 100;
  std::string language = "en";
  // Opaque cursor returned by a previous page; empty for the first page.
  std::string continuation;

  void validate() const;
};

struct FetchPage {
  std::vector<corpus::Review> reviews;
  std::optional<std::string> continuation;  // absent = end marker
  std::size_t dropped_undated = 0;
};

// Throttling or transport failure; the caller may retry after the hint.
class RetryableError : public RuntimeError {
 public:
  RetryableError(const std::string& what, std::chrono::milliseconds backoff)
      : RuntimeError(what), backoff_hint(backoff) {}
  std::chrono::milliseconds backoff_hint;
};

// Unknown app id or an unrecoverable upstream response.
class TerminalError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

class ReviewSource {
 public:
  virtual ~ReviewSource() = default;
  virtual FetchPage fetch(const ScrapeRequest& request) = 0;
  virtual std::string describe() const = 0;
};

// Serves reviews from a canonical corpus CSV. Never touches the network.
// Reviews are ordered newest first (ties by review_id) like the store's
// "newest" sort; the continuation token is an offset into that order.
class FixtureSource : public ReviewSource {
 public:
  explicit FixtureSource(std::filesystem::path path);
  explicit FixtureSource(std::vector<corpus::Review> reviews, std::string label = "memory");

  FetchPage fetch(const ScrapeRequest& request) override;
  std::string describe() const override { return "fixture:" + label_; }

 private:
  std::vector<corpus::Review> reviews_;
  std::string label_;
};

// ---------------------------------------------------------------------------
// Live Play Store client

struct HttpResponse {
  int status = 0;
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  // Throws RuntimeError on connection failure.
  virtual HttpResponse post_form(const std::string& url, const std::string& form_body) = 0;
};

// HTTPS transport; throws TerminalError unless built with SENSOR_LIVE_SCRAPER.
std::unique_ptr<HttpTransport> make_https_transport();

struct RetryPolicy {
  double requests_per_second = 1.0;
  std::chrono::milliseconds base_backoff{1000};  // doubled per retry
  int max_retries = 5;
  std::size_t page_size = 100;  // upstream reviews per request
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

// Builds the batchexecute form body for one upstream page.
std::string build_reviews_request(const std::string& app_id, const std::string& language,
                                  std::size_t count, const std::string& token);

struct UpstreamPage {
  std::vector<corpus::Review> reviews;
  std::optional<std::string> token;
  std::size_t dropped_undated = 0;
};
// Parses a batchexecute response. Throws TerminalError when the payload
// carries no review data (unknown app id).
UpstreamPage parse_reviews_response(const std::string& body, const std::string& app_id);

class PlayStoreSource : public ReviewSource {
 public:
  PlayStoreSource(std::unique_ptr<HttpTransport> transport, RetryPolicy policy = {},
                  Sleeper sleeper = {});

  FetchPage fetch(const ScrapeRequest& request) override;
  std::string describe() const override { return "live"; }

  std::size_t requests_made() const { return requests_made_; }

 private:
  HttpResponse send_with_retry(const std::string& body);

  std::unique_ptr<HttpTransport> transport_;
  RetryPolicy policy_;
  Sleeper sleep_;
  std::size_t requests_made_ = 0;
};

// ---------------------------------------------------------------------------

FetchPage fetch_reviews(ReviewSource& source, const ScrapeRequest& request);

// Follows continuation tokens until the end marker. Each page is capped at
// request.max_reviews; `max_total` bounds the overall result (0 = unbounded).
FetchPage fetch_all(ReviewSource& source, ScrapeRequest request, std::size_t max_total = 0);

struct ScrapeManifest {
  std::string app_id;
  Date start_date;
  Date end_date;
  std::string source;
  std::string fetched_at;  // ISO-8601 UTC timestamp
  std::size_t count = 0;
  std::size_t dropped_undated = 0;

  std::string to_text() const;
  static ScrapeManifest parse(std::string_view text);
};

std::filesystem::path manifest_path_for(const std::filesystem::path& csv_path);

// Writes the CSV and a "<csv>.manifest" key-value sidecar. Returns the manifest.
ScrapeManifest export_scrape(const std::vector<corpus::Review>& reviews, const ScrapeRequest& request,
                             const std::filesystem::path& path, const std::string& source_name,
                             std::size_t dropped_undated = 0);

std::string utc_timestamp_now();

}  // namespace sensor::acquisition
