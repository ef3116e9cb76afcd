#include "sensor/acquisition.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "json.hpp"

#ifdef SENSOR_LIVE_SCRAPER
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#endif

namespace sensor::acquisition {

using nlohmann::json;

void ScrapeRequest::validate() const {
  if (app_id.empty()) throw ValidationError("app_id is required");
  if (!start_date.ok() || !end_date.ok()) throw ValidationError("invalid date in scrape request");
  if (start_date > end_date) throw ValidationError("start_date must not be after end_date");
  if (max_reviews < 1) throw ValidationError("max_reviews must be at least 1");
}

namespace {

bool newer_first(const corpus::Review& a, const corpus::Review& b) {
  if (a.posted_at != b.posted_at) return *a.posted_at > *b.posted_at;
  return a.review_id < b.review_id;
}

std::size_t parse_offset(const std::string& token) {
  if (token.empty()) return 0;
  try {
    std::size_t used = 0;
    auto v = std::stoull(token, &used);
    if (used != token.size()) throw ValidationError("bad continuation token");
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw ValidationError("bad continuation token: " + token);
  }
}

std::string url_encode(std::string_view s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fixture source

FixtureSource::FixtureSource(std::filesystem::path path) : label_(path.string()) {
  auto loaded = corpus::load_csv(path);
  if (!loaded.errors.empty()) {
    throw ValidationError(path.string() + ": line " + std::to_string(loaded.errors.front().line) + ": " +
                          loaded.errors.front().message);
  }
  reviews_ = std::move(loaded.reviews);
}

FixtureSource::FixtureSource(std::vector<corpus::Review> reviews, std::string label)
    : reviews_(std::move(reviews)), label_(std::move(label)) {}

FetchPage FixtureSource::fetch(const ScrapeRequest& request) {
  request.validate();
  bool known_app = false;
  FetchPage page;
  std::vector<corpus::Review> matching;
  for (const auto& r : reviews_) {
    if (r.app_id != request.app_id) continue;
    known_app = true;
    if (!r.posted_at) {
      ++page.dropped_undated;
      continue;
    }
    if (*r.posted_at < request.start_date || *r.posted_at > request.end_date) continue;
    corpus::Review out = r;
    out.source = corpus::Source::Scraped;
    matching.push_back(std::move(out));
  }
  if (!known_app) throw TerminalError("unknown app id: " + request.app_id);
  std::sort(matching.begin(), matching.end(), newer_first);

  const std::size_t offset = parse_offset(request.continuation);
  const std::size_t end = std::min(matching.size(), offset + request.max_reviews);
  for (std::size_t i = std::min(offset, matching.size()); i < end; ++i) page.reviews.push_back(matching[i]);
  if (end < matching.size()) page.continuation = std::to_string(end);
  return page;
}

// ---------------------------------------------------------------------------
// Live client

std::unique_ptr<HttpTransport> make_https_transport() {
#ifdef SENSOR_LIVE_SCRAPER
  class HttpsTransport : public HttpTransport {
   public:
    HttpResponse post_form(const std::string& url, const std::string& form_body) override {
      const std::string prefix = "https://";
      if (url.rfind(prefix, 0) != 0) throw RuntimeError("https URL expected: " + url);
      auto slash = url.find('/', prefix.size());
      std::string host = url.substr(prefix.size(), slash - prefix.size());
      std::string path = slash == std::string::npos ? "/" : url.substr(slash);
      httplib::SSLClient cli(host);
      cli.set_connection_timeout(10);
      cli.set_read_timeout(30);
      auto res = cli.Post(path, form_body, "application/x-www-form-urlencoded;charset=UTF-8");
      if (!res) throw RuntimeError("request to " + host + " failed: " + httplib::to_string(res.error()));
      return {res->status, res->body};
    }
  };
  return std::make_unique<HttpsTransport>();
#else
  throw TerminalError("live scraping is disabled in this build (configure with -DSENSOR_LIVE_SCRAPER=ON)");
#endif
}

std::string build_reviews_request(const std::string& app_id, const std::string& language,
                                  std::size_t count, const std::string& token) {
  // Inner request: [null,null,[2,<sort newest=2>,[count,null,token?],null,[]],[app_id,7]]
  json page = json::array({count, nullptr});
  if (!token.empty()) page.push_back(token);
  json inner = json::array({nullptr, nullptr, json::array({2, 2, page, nullptr, json::array()}),
                            json::array({app_id, 7})});
  json outer = json::array({json::array({json::array({"UsvDTd", inner.dump(), nullptr, "generic"})})});
  (void)language;
  return "f.req=" + url_encode(outer.dump());
}

UpstreamPage parse_reviews_response(const std::string& body, const std::string& app_id) {
  auto start = body.find('[');
  if (start == std::string::npos) throw TerminalError("unrecognized upstream response");
  json envelope;
  try {
    // The body may carry several length-prefixed chunks; the first array is enough.
    std::size_t depth = 0, end = start;
    bool in_string = false, escape = false;
    for (; end < body.size(); ++end) {
      char c = body[end];
      if (in_string) {
        if (escape) escape = false;
        else if (c == '\\') escape = true;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '[') ++depth;
      else if (c == ']' && --depth == 0) break;
    }
    envelope = json::parse(body.substr(start, end - start + 1));
  } catch (const json::exception& e) {
    throw TerminalError(std::string("malformed upstream response: ") + e.what());
  }

  UpstreamPage page;
  for (const auto& entry : envelope) {
    if (!entry.is_array() || entry.size() < 3 || entry[0] != "wrb.fr" || entry[1] != "UsvDTd") continue;
    if (!entry[2].is_string()) throw TerminalError("no review data for app id: " + app_id);
    json data = json::parse(entry[2].get<std::string>());
    if (!data.is_array() || data.empty()) throw TerminalError("no review data for app id: " + app_id);
    if (data[0].is_array()) {
      for (const auto& item : data[0]) {
        if (!item.is_array() || item.size() < 6 || !item[0].is_string() || !item[4].is_string()) continue;
        corpus::Review r;
        r.review_id = item[0].get<std::string>();
        r.app_id = app_id;
        r.raw_text = item[4].get<std::string>();
        r.source = corpus::Source::Scraped;
        if (item[2].is_number_integer()) {
          int score = item[2].get<int>();
          if (score >= 1 && score <= 5) r.rating = score;
        }
        if (item[5].is_array() && !item[5].empty() && item[5][0].is_number()) {
          auto secs = std::chrono::seconds(item[5][0].get<std::int64_t>());
          r.posted_at = Date{std::chrono::floor<std::chrono::days>(std::chrono::sys_seconds(secs))};
        }
        if (!r.posted_at) {
          ++page.dropped_undated;
          continue;
        }
        if (trim(r.raw_text).empty()) continue;
        page.reviews.push_back(std::move(r));
      }
    }
    if (data.size() > 1 && data[1].is_array() && data[1].size() > 1 && data[1][1].is_string()) {
      page.token = data[1][1].get<std::string>();
    }
    return page;
  }
  throw TerminalError("no review data for app id: " + app_id);
}

PlayStoreSource::PlayStoreSource(std::unique_ptr<HttpTransport> transport, RetryPolicy policy, Sleeper sleeper)
    : transport_(std::move(transport)), policy_(policy), sleep_(std::move(sleeper)) {
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

HttpResponse PlayStoreSource::send_with_retry(const std::string& body) {
  static const std::string url =
      "https://play.google.com/_/PlayStoreUi/data/batchexecute?hl=en&gl=us";
  if (requests_made_ > 0 && policy_.requests_per_second > 0) {
    sleep_(std::chrono::milliseconds(static_cast<long>(1000.0 / policy_.requests_per_second)));
  }
  std::chrono::milliseconds backoff = policy_.base_backoff;
  for (int attempt = 0;; ++attempt) {
    ++requests_made_;
    std::string failure;
    try {
      HttpResponse res = transport_->post_form(url, body);
      if (res.status == 200) return res;
      if (res.status == 404) throw TerminalError("upstream returned 404 (unknown app id?)");
      if (res.status != 429 && res.status < 500) {
        throw TerminalError("upstream returned status " + std::to_string(res.status));
      }
      failure = "upstream returned status " + std::to_string(res.status);
    } catch (const TerminalError&) {
      throw;
    } catch (const RuntimeError& e) {
      failure = e.what();
    }
    if (attempt >= policy_.max_retries) {
      throw RetryableError(failure + " after " + std::to_string(attempt) + " retries", backoff);
    }
    sleep_(backoff);
    backoff *= 2;
  }
}

FetchPage PlayStoreSource::fetch(const ScrapeRequest& request) {
  request.validate();
  // Our cursor is "<skip>|<upstream token>": re-request that upstream page and
  // skip reviews already handed out.
  std::size_t skip = 0;
  std::string upstream_token;
  if (!request.continuation.empty()) {
    auto bar = request.continuation.find('|');
    if (bar == std::string::npos) throw ValidationError("bad continuation token");
    skip = parse_offset(request.continuation.substr(0, bar));
    upstream_token = request.continuation.substr(bar + 1);
  }

  FetchPage out;
  while (true) {
    auto res = send_with_retry(build_reviews_request(request.app_id, request.language, policy_.page_size,
                                                     upstream_token));
    UpstreamPage page = parse_reviews_response(res.body, request.app_id);
    out.dropped_undated += page.dropped_undated;
    bool reached_start = false;
    for (std::size_t i = skip; i < page.reviews.size(); ++i) {
      const auto& r = page.reviews[i];
      if (*r.posted_at > request.end_date) continue;
      if (*r.posted_at < request.start_date) {
        reached_start = true;
        break;
      }
      out.reviews.push_back(r);
      if (out.reviews.size() == request.max_reviews) {
        bool more_here = i + 1 < page.reviews.size();
        if (more_here) out.continuation = std::to_string(i + 1) + "|" + upstream_token;
        else if (page.token) out.continuation = "0|" + *page.token;
        return out;
      }
    }
    skip = 0;
    if (reached_start || !page.token) return out;
    upstream_token = *page.token;
  }
}

// ---------------------------------------------------------------------------

FetchPage fetch_reviews(ReviewSource& source, const ScrapeRequest& request) {
  request.validate();
  FetchPage page = source.fetch(request);
  if (page.reviews.size() > request.max_reviews) page.reviews.resize(request.max_reviews);
  return page;
}

FetchPage fetch_all(ReviewSource& source, ScrapeRequest request, std::size_t max_total) {
  FetchPage all;
  std::unordered_set<std::string> seen;
  while (true) {
    FetchPage page = fetch_reviews(source, request);
    all.dropped_undated = std::max(all.dropped_undated, page.dropped_undated);
    for (auto& r : page.reviews) {
      if (max_total && all.reviews.size() >= max_total) break;
      if (seen.insert(r.review_id).second) all.reviews.push_back(std::move(r));
    }
    if (!page.continuation || (max_total && all.reviews.size() >= max_total)) break;
    request.continuation = *page.continuation;
  }
  return all;
}

std::string ScrapeManifest::to_text() const {
  std::ostringstream out;
  out << "app_id=" << app_id << '\n'
      << "from=" << format_date(start_date) << '\n'
      << "to=" << format_date(end_date) << '\n'
      << "source=" << source << '\n'
      << "fetched_at=" << fetched_at << '\n'
      << "count=" << count << '\n'
      << "dropped_undated=" << dropped_undated << '\n';
  return out.str();
}

ScrapeManifest ScrapeManifest::parse(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ScrapeManifest m;
  auto date = [&](const char* key) {
    auto d = parse_date(kv[key]);
    if (!d) throw ValidationError(std::string("manifest missing ") + key);
    return *d;
  };
  m.app_id = kv["app_id"];
  m.start_date = date("from");
  m.end_date = date("to");
  m.source = kv["source"];
  m.fetched_at = kv["fetched_at"];
  m.count = kv.count("count") ? std::stoull(kv["count"]) : 0;
  m.dropped_undated = kv.count("dropped_undated") ? std::stoull(kv["dropped_undated"]) : 0;
  return m;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& csv_path) {
  return csv_path.string() + ".manifest";
}

std::string utc_timestamp_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ScrapeManifest export_scrape(const std::vector<corpus::Review>& reviews, const ScrapeRequest& request,
                             const std::filesystem::path& path, const std::string& source_name,
                             std::size_t dropped_undated) {
  corpus::save_csv(reviews, path);
  ScrapeManifest m;
  m.app_id = request.app_id;
  m.start_date = request.start_date;
  m.end_date = request.end_date;
  m.source = source_name;
  m.fetched_at = utc_timestamp_now();
  m.count = reviews.size();
  m.dropped_undated = dropped_undated;
  const auto mpath = manifest_path_for(path);
  std::ofstream out(mpath, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + mpath.string());
  out << m.to_text();
  return m;
}

}  // namespace sensor::acquisition
