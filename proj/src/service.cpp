#include "sensor/service.hpp"

#include <sodium.h>

#include <algorithm>
#include <chrono>
#include <iostream>
#include <map>
#include <set>
#include <shared_mutex>

#include "sensor/acquisition.hpp"
#include "sensor/corpus.hpp"
#include "sensor/grace.hpp"
#include "sensor/metrics.hpp"
#include "sensor/textprep.hpp"
#include "sqlite_db.hpp"

namespace sensor::service {

namespace {

using db::Database;
using db::Statement;
using db::Transaction;

const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS users(
  id INTEGER PRIMARY KEY,
  email TEXT NOT NULL UNIQUE,
  pw_hash TEXT NOT NULL,
  role TEXT NOT NULL CHECK(role IN ('developer', 'annotator')),
  verified INTEGER NOT NULL DEFAULT 0,
  created_at INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS otp(
  email TEXT PRIMARY KEY,
  code_hash TEXT NOT NULL,
  expires_at INTEGER NOT NULL,
  attempts_left INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS sessions(
  token_hash TEXT PRIMARY KEY,
  user_id INTEGER NOT NULL REFERENCES users(id),
  created_at INTEGER NOT NULL,
  last_seen INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS files(
  id INTEGER PRIMARY KEY,
  owner INTEGER NOT NULL REFERENCES users(id),
  name TEXT NOT NULL,
  created_at INTEGER NOT NULL,
  generation INTEGER NOT NULL DEFAULT 1,
  model_run INTEGER NOT NULL DEFAULT 0,
  extra_columns TEXT NOT NULL DEFAULT '[]');
CREATE TABLE IF NOT EXISTS reviews(
  file_id INTEGER NOT NULL REFERENCES files(id),
  ordinal INTEGER NOT NULL,
  review_id TEXT NOT NULL,
  data TEXT NOT NULL,
  model_label INTEGER,
  model_probs TEXT,
  PRIMARY KEY(file_id, review_id));
CREATE TABLE IF NOT EXISTS assignments(
  file_id INTEGER NOT NULL REFERENCES files(id),
  generation INTEGER NOT NULL,
  slot INTEGER NOT NULL CHECK(slot IN (0, 1)),
  annotator INTEGER NOT NULL REFERENCES users(id),
  invitation TEXT NOT NULL,
  invited_at INTEGER NOT NULL,
  completed INTEGER NOT NULL DEFAULT 0,
  PRIMARY KEY(file_id, generation, slot),
  UNIQUE(file_id, generation, annotator));
CREATE TABLE IF NOT EXISTS annotations(
  file_id INTEGER NOT NULL REFERENCES files(id),
  generation INTEGER NOT NULL,
  review_id TEXT NOT NULL,
  annotator INTEGER NOT NULL REFERENCES users(id),
  label INTEGER NOT NULL CHECK(label BETWEEN 0 AND 2),
  labeled_at INTEGER NOT NULL,
  PRIMARY KEY(file_id, generation, review_id, annotator));
CREATE TABLE IF NOT EXISTS feedback(
  file_id INTEGER NOT NULL REFERENCES files(id),
  review_id TEXT NOT NULL,
  developer INTEGER NOT NULL REFERENCES users(id),
  disagree INTEGER NOT NULL,
  recorded_at INTEGER NOT NULL,
  PRIMARY KEY(file_id, review_id, developer));
CREATE TABLE IF NOT EXISTS audit_log(
  id INTEGER PRIMARY KEY,
  at INTEGER NOT NULL,
  user_id INTEGER,
  file_id INTEGER,
  action TEXT NOT NULL,
  details TEXT NOT NULL);
)sql";

enum class Role { Developer, Annotator };

std::string role_name(Role r) { return r == Role::Developer ? "developer" : "annotator"; }

struct Actor {
  std::int64_t id = 0;
  std::string email;
  Role role = Role::Annotator;
};

struct FileRow {
  std::int64_t id = 0;
  std::int64_t owner = 0;
  std::string name;
  std::int64_t created_at = 0;
  std::int64_t generation = 1;
  bool model_run = false;
  std::vector<std::string> extra_columns;
};

struct Slot {
  int slot = 0;
  std::int64_t annotator = 0;
  std::string email;
  std::string invitation;
  bool completed = false;
};

struct StoredReview {
  corpus::Review review;
  std::int64_t ordinal = 0;
};

ApiError bad_request(const std::string& msg, Json details = Json::object()) {
  return ApiError(400, "validation_error", msg, std::move(details));
}
ApiError forbidden(const std::string& msg) { return ApiError(403, "forbidden", msg); }
ApiError conflict(const std::string& msg, Json details = Json::object()) {
  return ApiError(409, "conflict", msg, std::move(details));
}
ApiError unauthorized(const std::string& msg) { return ApiError(401, "unauthorized", msg); }

std::string hex(const unsigned char* p, std::size_t n) {
  std::string out(n * 2 + 1, '\0');
  sodium_bin2hex(out.data(), out.size(), p, n);
  out.pop_back();
  return out;
}

std::string digest(const std::string& s) {
  unsigned char h[crypto_generichash_BYTES];
  crypto_generichash(h, sizeof h, reinterpret_cast<const unsigned char*>(s.data()), s.size(), nullptr, 0);
  return hex(h, sizeof h);
}

std::string random_token() {
  unsigned char b[16];
  randombytes_buf(b, sizeof b);
  return hex(b, sizeof b);
}

std::string string_field(const Json& body, const std::string& key) {
  if (!body.is_object() || !body.contains(key) || !body[key].is_string()) {
    throw bad_request("field '" + key + "' must be a string", Json{{"field", key}});
  }
  return body[key].get<std::string>();
}

std::vector<std::string> string_list(const Json& body, const std::string& key, bool required) {
  if (!body.is_object() || !body.contains(key)) {
    if (required) throw bad_request("field '" + key + "' is required", Json{{"field", key}});
    return {};
  }
  const auto& v = body[key];
  if (!v.is_array()) throw bad_request("field '" + key + "' must be a list of strings", Json{{"field", key}});
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw bad_request("field '" + key + "' must be a list of strings", Json{{"field", key}});
    out.push_back(e.get<std::string>());
  }
  return out;
}

std::string normalize_email(std::string_view raw) {
  auto e = to_lower_ascii(trim(raw));
  const auto at = e.find('@');
  const bool ok = at != std::string::npos && at > 0 && e.find('@', at + 1) == std::string::npos &&
                  e.find('.', at) != std::string::npos && e.back() != '.' &&
                  std::none_of(e.begin(), e.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
  if (!ok) throw bad_request("invalid email address", Json{{"field", "email"}});
  return e;
}

Json review_json(const corpus::Review& r) {
  Json j;
  j["review_id"] = r.review_id;
  j["app_id"] = r.app_id;
  j["posted_at"] = r.posted_at ? Json(format_date(*r.posted_at)) : Json(nullptr);
  j["rating"] = r.rating ? Json(*r.rating) : Json(nullptr);
  j["raw_text"] = r.raw_text;
  j["processed_text"] = r.processed_text ? Json(*r.processed_text) : Json(nullptr);
  j["source"] = std::string(corpus::source_name(r.source));
  j["parent_id"] = r.parent_id ? Json(*r.parent_id) : Json(nullptr);
  j["gold_label"] = r.gold_label ? Json(label_code(*r.gold_label)) : Json(nullptr);
  j["extra"] = r.extra;
  return j;
}

corpus::Review review_from_json(const Json& j) {
  corpus::Review r;
  r.review_id = j.at("review_id").get<std::string>();
  r.app_id = j.at("app_id").get<std::string>();
  if (!j.at("posted_at").is_null()) r.posted_at = parse_date(j["posted_at"].get<std::string>());
  if (!j.at("rating").is_null()) r.rating = j["rating"].get<int>();
  r.raw_text = j.at("raw_text").get<std::string>();
  if (!j.at("processed_text").is_null()) r.processed_text = j["processed_text"].get<std::string>();
  r.source = corpus::parse_source(j.at("source").get<std::string>()).value_or(corpus::Source::Uploaded);
  if (!j.at("parent_id").is_null()) r.parent_id = j["parent_id"].get<std::string>();
  if (!j.at("gold_label").is_null()) r.gold_label = label_from_code(j["gold_label"].get<int>());
  r.extra = j.at("extra").get<std::map<std::string, std::string>>();
  return r;
}

bool in_category(Label l, const std::string& category) {
  if (category == "privacy_related") return l == Label::PFR || l == Label::PB;
  if (category == "privacy_irrelevant") return l == Label::PIR;
  return true;
}

void check_category(const std::string& category, bool allow_empty) {
  if (category == "privacy_related" || category == "privacy_irrelevant") return;
  if (allow_empty && category.empty()) return;
  throw bad_request("category must be privacy_related or privacy_irrelevant", Json{{"field", "category"}});
}

// Small pool so concurrent readers get their own connection.
class Pool {
 public:
  explicit Pool(std::filesystem::path path) : path_(std::move(path)) {}

  class Lease {
   public:
    Lease(Pool& p, std::unique_ptr<Database> d) : pool_(p), db_(std::move(d)) {}
    ~Lease() { pool_.release(std::move(db_)); }
    Lease(const Lease&) = delete;
    Database& operator*() { return *db_; }
    Database* operator->() { return db_.get(); }

   private:
    Pool& pool_;
    std::unique_ptr<Database> db_;
  };

  Lease acquire() {
    {
      std::lock_guard lock(mu_);
      if (!free_.empty()) {
        auto d = std::move(free_.back());
        free_.pop_back();
        return Lease(*this, std::move(d));
      }
    }
    return Lease(*this, std::make_unique<Database>(path_));
  }

 private:
  void release(std::unique_ptr<Database> d) {
    std::lock_guard lock(mu_);
    if (free_.size() < 8) free_.push_back(std::move(d));
  }

  std::filesystem::path path_;
  std::mutex mu_;
  std::vector<std::unique_ptr<Database>> free_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Mail

void ConsoleMailSender::send(const MailMessage& m) {
  std::lock_guard lock(mu_);
  out_ << "[mail] to=" << m.to << " subject=" << m.subject << "\n" << m.body << "\n[/mail]" << std::endl;
}

void RecordingMailSender::send(const MailMessage& m) {
  std::lock_guard lock(mu_);
  messages_.push_back(m);
}

std::vector<MailMessage> RecordingMailSender::messages() const {
  std::lock_guard lock(mu_);
  return messages_;
}

std::optional<MailMessage> RecordingMailSender::last_to(const std::string& email) const {
  std::lock_guard lock(mu_);
  for (auto it = messages_.rbegin(); it != messages_.rend(); ++it)
    if (it->to == email) return *it;
  return std::nullopt;
}

std::optional<std::string> extract_otp(const std::string& body) {
  auto pos = body.find("code:");
  if (pos == std::string::npos) return std::nullopt;
  for (std::size_t i = pos + 5; i + 6 <= body.size(); ++i) {
    if (std::all_of(body.begin() + static_cast<long>(i), body.begin() + static_cast<long>(i + 6),
                    [](char c) { return c >= '0' && c <= '9'; })) {
      return body.substr(i, 6);
    }
    if (body[i] != ' ') break;
  }
  return std::nullopt;
}

const std::string& annotation_guidelines() {
  static const std::string text =
      "Label each review with exactly one category.\n"
      "\n"
      "PFR - privacy-related feature request. The user asks for a missing privacy feature or suggests one "
      "that would protect their privacy.\n"
      "  e.g. \"Why remove the edit button? It's our post, and we should have the freedom to edit or delete it. "
      "Give us back the choice!\"\n"
      "  e.g. \"Add who saw your note that would make the app a little better!\"\n"
      "\n"
      "PB - privacy-related bug report. The user reports a privacy-related flaw in how a feature works.\n"
      "  e.g. \"After the new IOS update they keep logging me out after I chose for the app not to track me\"\n"
      "\n"
      "PIR - privacy-irrelevant. Neither of the above, including generic complaints about tracking or "
      "privacy policies.\n"
      "  e.g. \"The app keeps crashing and kicking me off!! It's so annoying!\"\n"
      "  e.g. \"A garbage app that is not capable of anything but tracking you and your interests so they can "
      "sell your info\"\n";
  return text;
}

// ---------------------------------------------------------------------------
// Options

const std::vector<std::string>& ServiceOptions::config_keys() {
  static const std::vector<std::string> keys{
      "listen",          "port",         "store",           "public_url",       "model",
      "model_dir",       "prep_dir",     "scrape_source",   "expected_vocab_hash", "otp.ttl_seconds",
      "otp.attempts",    "session.idle_seconds", "password_cost", "mail",          "static_dir"};
  return keys;
}

ServiceOptions ServiceOptions::from_config(const KeyValueConfig& c) {
  ServiceOptions o;
  o.store_path = c.get_or("store", o.store_path.string());
  o.public_url = c.get_or("public_url", o.public_url);
  o.model_path = c.get_or("model", "");
  o.model_dir = c.get_or("model_dir", "");
  o.prep_dir = c.get_or("prep_dir", "");
  o.scrape_source = c.get_or("scrape_source", "");
  if (auto h = c.get("expected_vocab_hash")) o.expected_vocab_hash = static_cast<std::uint64_t>(std::stoull(*h));
  o.otp_ttl_seconds = c.get_int("otp.ttl_seconds", o.otp_ttl_seconds);
  o.otp_attempts = static_cast<int>(c.get_int("otp.attempts", o.otp_attempts));
  o.session_idle_seconds = c.get_int("session.idle_seconds", o.session_idle_seconds);
  const auto cost = c.get_or("password_cost", "interactive");
  if (cost == "interactive") o.password_cost = PasswordCost::Interactive;
  else if (cost == "minimum") o.password_cost = PasswordCost::Minimum;
  else throw ValidationError("password_cost must be interactive or minimum");
  const auto mail = c.get_or("mail", "console");
  if (mail != "console") throw ValidationError("mail provider '" + mail + "' is not available (console only)");
  o.mail = std::make_shared<ConsoleMailSender>(std::clog);
  if (o.otp_ttl_seconds <= 0 || o.otp_attempts <= 0 || o.session_idle_seconds <= 0) {
    throw ValidationError("otp and session limits must be positive");
  }
  return o;
}

// ---------------------------------------------------------------------------

struct AnnotationService::Impl {
  ServiceOptions opt;
  Pool pool;
  std::string dummy_hash;

  std::mutex locks_mu;
  std::map<std::int64_t, std::shared_ptr<std::shared_mutex>> file_locks;

  std::mutex cache_mu;
  std::optional<textprep::PrepConfig> prep;
  std::map<std::string, std::pair<std::filesystem::file_time_type, std::shared_ptr<grace::GraceModel>>> models;

  explicit Impl(ServiceOptions o) : opt(std::move(o)), pool(opt.store_path) {
    if (sodium_init() < 0) throw RuntimeError("libsodium failed to initialize");
    if (!opt.clock) {
      opt.clock = [] {
        return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
            .count();
      };
    }
    if (!opt.mail) opt.mail = std::make_shared<ConsoleMailSender>(std::clog);
    auto conn = pool.acquire();
    conn->exec(kSchema);
    dummy_hash = hash_password("not-a-real-password");
  }

  std::int64_t now() const { return opt.clock(); }

  std::shared_ptr<std::shared_mutex> file_lock(std::int64_t id) {
    std::lock_guard lock(locks_mu);
    auto& l = file_locks[id];
    if (!l) l = std::make_shared<std::shared_mutex>();
    return l;
  }

  std::string hash_password(const std::string& pw) const {
    char out[crypto_pwhash_STRBYTES];
    const auto ops = opt.password_cost == PasswordCost::Interactive ? crypto_pwhash_OPSLIMIT_INTERACTIVE
                                                                    : crypto_pwhash_OPSLIMIT_MIN;
    const auto mem = opt.password_cost == PasswordCost::Interactive ? crypto_pwhash_MEMLIMIT_INTERACTIVE
                                                                    : crypto_pwhash_MEMLIMIT_MIN;
    if (crypto_pwhash_str(out, pw.data(), pw.size(), ops, mem) != 0) throw RuntimeError("password hashing failed");
    return out;
  }

  static bool check_password(const std::string& hash, const std::string& pw) {
    return crypto_pwhash_str_verify(hash.c_str(), pw.data(), pw.size()) == 0;
  }

  void audit(Database& d, std::optional<std::int64_t> user, std::optional<std::int64_t> file, const std::string& action,
             const Json& details) {
    auto st = d.prepare("INSERT INTO audit_log(at, user_id, file_id, action, details) VALUES(?, ?, ?, ?, ?)");
    st.bind(1, now());
    if (user) st.bind(2, *user);
    else st.bind(2, std::nullopt);
    if (file) st.bind(3, *file);
    else st.bind(3, std::nullopt);
    st.bind(4, action).bind(5, details.dump());
    st.run();
  }

  void issue_otp(Database& d, const std::string& email) {
    const auto code = randombytes_uniform(1000000);
    char buf[8];
    std::snprintf(buf, sizeof buf, "%06u", code);
    d.prepare("INSERT OR REPLACE INTO otp(email, code_hash, expires_at, attempts_left) VALUES(?, ?, ?, ?)")
        .bind(1, email)
        .bind(2, digest(email + ":" + buf))
        .bind(3, now() + opt.otp_ttl_seconds)
        .bind(4, static_cast<std::int64_t>(opt.otp_attempts))
        .run();
    opt.mail->send({email, "SENSOR verification code",
                    std::string("Your verification code: ") + buf + "\nIt expires in " +
                        std::to_string(opt.otp_ttl_seconds / 60) + " minutes."});
  }

  Actor authenticate(Database& d, const std::string& token) {
    if (token.empty()) throw unauthorized("missing session token");
    const auto h = digest(token);
    auto st = d.prepare(
        "SELECT s.user_id, s.last_seen, u.email, u.role FROM sessions s JOIN users u ON u.id = s.user_id "
        "WHERE s.token_hash = ?");
    st.bind(1, h);
    if (!st.step()) throw unauthorized("invalid or expired session");
    Actor a;
    a.id = st.int_at(0);
    const auto last = st.int_at(1);
    a.email = st.text_at(2);
    a.role = st.text_at(3) == "developer" ? Role::Developer : Role::Annotator;
    const auto t = now();
    if (t - last > opt.session_idle_seconds) {
      d.prepare("DELETE FROM sessions WHERE token_hash = ?").bind(1, h).run();
      throw unauthorized("invalid or expired session");
    }
    if (t - last >= 60) d.prepare("UPDATE sessions SET last_seen = ? WHERE token_hash = ?").bind(1, t).bind(2, h).run();
    return a;
  }

  static void require(const Actor& a, Role r) {
    if (a.role != r) throw forbidden("this action requires the " + role_name(r) + " role");
  }

  static FileRow load_file(Database& d, std::int64_t id) {
    auto st = d.prepare("SELECT id, owner, name, created_at, generation, model_run, extra_columns FROM files WHERE id = ?");
    st.bind(1, id);
    if (!st.step()) throw ApiError(404, "not_found", "no file " + std::to_string(id));
    FileRow f;
    f.id = st.int_at(0);
    f.owner = st.int_at(1);
    f.name = st.text_at(2);
    f.created_at = st.int_at(3);
    f.generation = st.int_at(4);
    f.model_run = st.int_at(5) != 0;
    f.extra_columns = Json::parse(st.text_at(6)).get<std::vector<std::string>>();
    return f;
  }

  static void require_owner(const Actor& a, const FileRow& f) {
    require(a, Role::Developer);
    if (f.owner != a.id) throw forbidden("file belongs to another developer");
  }

  static std::vector<Slot> slots(Database& d, std::int64_t file, std::int64_t generation) {
    auto st = d.prepare(
        "SELECT a.slot, a.annotator, u.email, a.invitation, a.completed FROM assignments a "
        "JOIN users u ON u.id = a.annotator WHERE a.file_id = ? AND a.generation = ? ORDER BY a.slot");
    st.bind(1, file).bind(2, generation);
    std::vector<Slot> out;
    while (st.step()) out.push_back({static_cast<int>(st.int_at(0)), st.int_at(1), st.text_at(2), st.text_at(3), st.int_at(4) != 0});
    return out;
  }

  static std::optional<Slot> slot_of(Database& d, const FileRow& f, std::int64_t user) {
    for (auto& s : slots(d, f.id, f.generation))
      if (s.annotator == user) return s;
    return std::nullopt;
  }

  static std::int64_t review_count(Database& d, std::int64_t file) {
    auto st = d.prepare("SELECT COUNT(*) FROM reviews WHERE file_id = ?");
    st.bind(1, file);
    st.step();
    return st.int_at(0);
  }

  static std::vector<StoredReview> load_reviews(Database& d, std::int64_t file) {
    auto st = d.prepare("SELECT ordinal, data, model_label, model_probs FROM reviews WHERE file_id = ? ORDER BY ordinal");
    st.bind(1, file);
    std::vector<StoredReview> out;
    while (st.step()) {
      StoredReview s;
      s.ordinal = st.int_at(0);
      s.review = review_from_json(Json::parse(st.text_at(1)));
      if (!st.null_at(2)) s.review.model_label = label_from_code(static_cast<int>(st.int_at(2)));
      if (!st.null_at(3)) s.review.model_probs = Json::parse(st.text_at(3)).get<std::array<double, kNumClasses>>();
      out.push_back(std::move(s));
    }
    return out;
  }

  static std::map<std::string, Label> labels_of(Database& d, std::int64_t file, std::int64_t generation,
                                                std::int64_t annotator) {
    auto st = d.prepare("SELECT review_id, label FROM annotations WHERE file_id = ? AND generation = ? AND annotator = ?");
    st.bind(1, file).bind(2, generation).bind(3, annotator);
    std::map<std::string, Label> out;
    while (st.step()) out[st.text_at(0)] = label_from_code(static_cast<int>(st.int_at(1)));
    return out;
  }

  static std::string status_of(const FileRow& f, const std::vector<Slot>& s) {
    if (f.model_run) return "model_annotated";
    if (s.size() == 2 && s[0].completed && s[1].completed) return "human_complete";
    if (!s.empty()) return "in_progress";
    return "unassigned";
  }

  Json progress_json(Database& d, const FileRow& f) {
    const auto total = review_count(d, f.id);
    const auto s = slots(d, f.id, f.generation);
    Json ann = Json::array();
    std::vector<std::map<std::string, Label>> labels;
    for (const auto& slot : s) {
      labels.push_back(labels_of(d, f.id, f.generation, slot.annotator));
      ann.push_back({{"slot", slot.slot == 0 ? "A" : "B"},
                     {"email", slot.email},
                     {"invitation", slot.invitation},
                     {"labeled", labels.back().size()},
                     {"completed", slot.completed}});
    }
    std::size_t co = 0;
    metrics::AgreementTable table;
    if (labels.size() == 2) {
      for (const auto& [rid, la] : labels[0]) {
        auto it = labels[1].find(rid);
        if (it == labels[1].end()) continue;
        ++co;
        ++table.at(label_code(la), label_code(it->second));
      }
    }
    Json out{{"file_id", f.id},
             {"name", f.name},
             {"generation", f.generation},
             {"status", status_of(f, s)},
             {"total", total},
             {"fully_annotated", co},
             {"percent", total ? 100.0 * static_cast<double>(co) / static_cast<double>(total) : 0.0},
             {"annotators", ann},
             {"human_complete", s.size() == 2 && s[0].completed && s[1].completed},
             {"model_annotated", f.model_run},
             {"kappa", nullptr},
             {"kappa_degenerate", false}};
    if (co > 0) {
      auto k = metrics::cohens_kappa(table);
      out["kappa"] = k.kappa;
      out["kappa_degenerate"] = k.degenerate;
    }
    if (f.model_run) {
      Json dist{{"PFR", 0}, {"PB", 0}, {"PIR", 0}};
      auto st = d.prepare("SELECT model_label, COUNT(*) FROM reviews WHERE file_id = ? GROUP BY model_label");
      st.bind(1, f.id);
      while (st.step()) {
        if (st.null_at(0)) continue;
        dist[std::string(label_name(label_from_code(static_cast<int>(st.int_at(0)))))] = st.int_at(1);
      }
      out["distribution"] = dist;
    }
    return out;
  }

  Json annotator_view(Database& d, const FileRow& f, const Slot& slot) {
    const auto total = review_count(d, f.id);
    const auto mine = labels_of(d, f.id, f.generation, slot.annotator);
    return Json{{"file_id", f.id},       {"name", f.name},           {"generation", f.generation},
                {"total", total},        {"labeled", mine.size()},   {"completed", slot.completed},
                {"slot", slot.slot == 0 ? "A" : "B"}};
  }

  // Validates two distinct annotator emails and returns their user ids.
  std::vector<std::pair<std::int64_t, std::string>> resolve_pair(Database& d, const Json& body) {
    auto emails = string_list(body, "emails", true);
    if (emails.size() != 2) throw bad_request("exactly two annotator emails are required", Json{{"field", "emails"}});
    std::vector<std::pair<std::int64_t, std::string>> out;
    for (const auto& raw : emails) {
      const auto e = normalize_email(raw);
      auto st = d.prepare("SELECT id, role, verified FROM users WHERE email = ?");
      st.bind(1, e);
      if (!st.step()) throw bad_request("no account for " + e, Json{{"email", e}});
      if (st.text_at(1) != "annotator") throw bad_request(e + " is not an annotator account", Json{{"email", e}});
      if (st.int_at(2) == 0) throw bad_request(e + " has not verified the account", Json{{"email", e}});
      out.emplace_back(st.int_at(0), e);
    }
    if (out[0].first == out[1].first) throw bad_request("the two annotators must be different", Json{{"field", "emails"}});
    return out;
  }

  void assign(Database& d, const FileRow& f, std::int64_t generation,
              const std::vector<std::pair<std::int64_t, std::string>>& pair) {
    for (int slot = 0; slot < 2; ++slot) {
      d.prepare("INSERT INTO assignments(file_id, generation, slot, annotator, invitation, invited_at) VALUES(?, ?, ?, ?, 'sent', ?)")
          .bind(1, f.id)
          .bind(2, generation)
          .bind(3, static_cast<std::int64_t>(slot))
          .bind(4, pair[static_cast<std::size_t>(slot)].first)
          .bind(5, now())
          .run();
    }
  }

  void send_invitations(const FileRow& f, const std::vector<std::pair<std::int64_t, std::string>>& pair) {
    const auto link = opt.public_url + "/app/#/files/" + std::to_string(f.id) + "/annotate";
    for (const auto& [id, email] : pair) {
      opt.mail->send({email, "SENSOR: you are invited to annotate \"" + f.name + "\"",
                      "You have been assigned the review file \"" + f.name + "\".\nOpen it here: " + link +
                          "\n\nGuidelines\n\n" + annotation_guidelines()});
    }
  }

  std::int64_t create_file(Database& d, const Actor& a, const std::string& name, const corpus::LoadResult& parsed,
                           const std::string& origin) {
    Transaction tx(d);
    d.prepare("INSERT INTO files(owner, name, created_at, extra_columns) VALUES(?, ?, ?, ?)")
        .bind(1, a.id)
        .bind(2, name)
        .bind(3, now())
        .bind(4, Json(parsed.extra_columns).dump())
        .run();
    const auto id = d.last_insert_id();
    std::int64_t ordinal = 0;
    for (auto r : parsed.reviews) {
      r.label_a.reset();
      r.label_b.reset();
      r.model_label.reset();
      r.model_probs.reset();
      r.tokens.reset();
      d.prepare("INSERT INTO reviews(file_id, ordinal, review_id, data) VALUES(?, ?, ?, ?)")
          .bind(1, id)
          .bind(2, ordinal++)
          .bind(3, r.review_id)
          .bind(4, review_json(r).dump())
          .run();
    }
    audit(d, a.id, id, origin, Json{{"name", name}, {"rows", parsed.reviews.size()}, {"skipped", parsed.errors.size()}});
    tx.commit();
    return id;
  }

  Json created_file_json(Database& d, std::int64_t id, const corpus::LoadResult& parsed) {
    auto out = progress_json(d, load_file(d, id));
    Json skipped = Json::array();
    for (const auto& e : parsed.errors) skipped.push_back({{"line", e.line}, {"message", e.message}});
    out["skipped_rows"] = skipped;
    return out;
  }

  static void check_reviews(const corpus::LoadResult& parsed) {
    if (parsed.reviews.empty()) {
      Json details = Json::array();
      for (const auto& e : parsed.errors) details.push_back({{"line", e.line}, {"message", e.message}});
      throw bad_request("file contains no usable reviews", Json{{"rows", details}});
    }
    std::set<std::string> seen, dups;
    for (const auto& r : parsed.reviews)
      if (!seen.insert(r.review_id).second) dups.insert(r.review_id);
    if (!dups.empty()) throw bad_request("duplicate review ids", Json{{"review_ids", dups}});
  }

  const textprep::PrepConfig& prep_config() {
    std::lock_guard lock(cache_mu);
    if (!prep) {
      if (opt.prep_dir.empty()) throw ApiError(503, "unavailable", "text pre-processing resources are not configured");
      prep = textprep::PrepConfig::load(opt.prep_dir);
    }
    return *prep;
  }

  std::shared_ptr<grace::GraceModel> model_at(const std::filesystem::path& path) {
    std::error_code ec;
    const auto mtime = std::filesystem::last_write_time(path, ec);
    if (ec) throw bad_request("model file not found: " + path.filename().string(), Json{{"model", path.filename().string()}});
    std::lock_guard lock(cache_mu);
    auto it = models.find(path.string());
    if (it != models.end() && it->second.first == mtime) return it->second.second;
    std::shared_ptr<grace::GraceModel> m;
    try {
      m = std::make_shared<grace::GraceModel>(grace::load_model(path, opt.expected_vocab_hash));
    } catch (const ValidationError& e) {
      throw bad_request(std::string("model cannot be used: ") + e.what(), Json{{"model", path.filename().string()}});
    }
    models[path.string()] = {mtime, m};
    return m;
  }

  std::filesystem::path choose_model(const Json& body) {
    if (body.is_object() && body.contains("model")) {
      const auto name = string_field(body, "model");
      if (name.empty() || name.find('/') != std::string::npos || name.find('\\') != std::string::npos || name == "." ||
          name == "..") {
        throw bad_request("model must be a file name inside the model directory", Json{{"field", "model"}});
      }
      if (opt.model_dir.empty()) throw bad_request("no model directory is configured", Json{{"field", "model"}});
      return opt.model_dir / name;
    }
    if (opt.model_path.empty()) throw bad_request("no model configured and none requested", Json{{"field", "model"}});
    return opt.model_path;
  }
};

AnnotationService::AnnotationService(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}
AnnotationService::~AnnotationService() = default;

const ServiceOptions& AnnotationService::options() const { return impl_->opt; }

Json AnnotationService::register_user(const Json& body) {
  const auto email = normalize_email(string_field(body, "email"));
  const auto password = string_field(body, "password");
  const auto role = string_field(body, "role");
  if (role != "developer" && role != "annotator") {
    throw bad_request("role must be developer or annotator", Json{{"field", "role"}});
  }
  if (password.size() < 8) throw bad_request("password must be at least 8 characters", Json{{"field", "password"}});
  const auto hash = impl_->hash_password(password);
  auto d = impl_->pool.acquire();
  Transaction tx(*d);
  {
    auto st = d->prepare("SELECT 1 FROM users WHERE email = ?");
    st.bind(1, email);
    if (st.step()) throw ApiError(409, "duplicate_email", "an account with this email already exists");
  }
  d->prepare("INSERT INTO users(email, pw_hash, role, created_at) VALUES(?, ?, ?, ?)")
      .bind(1, email)
      .bind(2, hash)
      .bind(3, role)
      .bind(4, impl_->now())
      .run();
  const auto id = d->last_insert_id();
  impl_->audit(*d, id, std::nullopt, "register", Json{{"role", role}});
  impl_->issue_otp(*d, email);
  tx.commit();
  return Json{{"user_id", id}, {"email", email}, {"role", role}, {"verified", false}};
}

Json AnnotationService::verify_otp(const Json& body) {
  const auto email = normalize_email(string_field(body, "email"));
  const auto code = std::string(trim(string_field(body, "code")));
  auto d = impl_->pool.acquire();
  Transaction tx(*d);
  auto st = d->prepare("SELECT code_hash, expires_at, attempts_left FROM otp WHERE email = ?");
  st.bind(1, email);
  if (!st.step()) throw ApiError(400, "otp_invalid", "no active verification challenge for this email");
  const auto want = st.text_at(0);
  const auto expires = st.int_at(1);
  const auto left = st.int_at(2);
  if (impl_->now() > expires) {
    d->prepare("DELETE FROM otp WHERE email = ?").bind(1, email).run();
    tx.commit();
    throw ApiError(400, "otp_expired", "verification code expired; request a new one");
  }
  if (digest(email + ":" + code) != want) {
    if (left <= 1) d->prepare("DELETE FROM otp WHERE email = ?").bind(1, email).run();
    else d->prepare("UPDATE otp SET attempts_left = ? WHERE email = ?").bind(1, left - 1).bind(2, email).run();
    tx.commit();
    throw ApiError(400, "otp_invalid", left <= 1 ? "too many wrong codes; challenge invalidated" : "wrong verification code",
                   Json{{"attempts_left", left - 1}});
  }
  d->prepare("DELETE FROM otp WHERE email = ?").bind(1, email).run();
  d->prepare("UPDATE users SET verified = 1 WHERE email = ?").bind(1, email).run();
  impl_->audit(*d, std::nullopt, std::nullopt, "verify", Json{{"email", email}});
  tx.commit();
  return Json{{"email", email}, {"verified", true}};
}

Json AnnotationService::resend_otp(const Json& body) {
  const auto email = normalize_email(string_field(body, "email"));
  auto d = impl_->pool.acquire();
  Transaction tx(*d);
  auto st = d->prepare("SELECT verified FROM users WHERE email = ?");
  st.bind(1, email);
  if (st.step() && st.int_at(0) == 0) impl_->issue_otp(*d, email);
  tx.commit();
  return Json{{"sent", true}};
}

Json AnnotationService::login(const Json& body) {
  const auto email = normalize_email(string_field(body, "email"));
  const auto password = string_field(body, "password");
  auto d = impl_->pool.acquire();
  std::int64_t id = 0;
  std::string role, hash = impl_->dummy_hash;
  bool verified = false, found = false;
  {
    auto st = d->prepare("SELECT id, role, pw_hash, verified FROM users WHERE email = ?");
    st.bind(1, email);
    if (st.step()) {
      found = true;
      id = st.int_at(0);
      role = st.text_at(1);
      hash = st.text_at(2);
      verified = st.int_at(3) != 0;
    }
  }
  const bool ok = Impl::check_password(hash, password) && found;
  if (!ok) throw ApiError(401, "invalid_credentials", "email or password is incorrect");
  if (!verified) throw ApiError(403, "unverified", "account is not verified");
  const auto token = random_token();
  const auto t = impl_->now();
  Transaction tx(*d);
  d->prepare("INSERT INTO sessions(token_hash, user_id, created_at, last_seen) VALUES(?, ?, ?, ?)")
      .bind(1, digest(token))
      .bind(2, id)
      .bind(3, t)
      .bind(4, t)
      .run();
  impl_->audit(*d, id, std::nullopt, "login", Json::object());
  tx.commit();
  return Json{{"token", token}, {"user_id", id}, {"email", email}, {"role", role},
              {"idle_timeout_seconds", impl_->opt.session_idle_seconds}};
}

void AnnotationService::logout(const std::string& token) {
  auto d = impl_->pool.acquire();
  impl_->authenticate(*d, token);
  d->prepare("DELETE FROM sessions WHERE token_hash = ?").bind(1, digest(token)).run();
}

Json AnnotationService::me(const std::string& token) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  return Json{{"user_id", a.id}, {"email", a.email}, {"role", role_name(a.role)}};
}

Json AnnotationService::upload_file(const std::string& token, const std::string& name, const std::string& csv_text) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  Impl::require(a, Role::Developer);
  if (trim(csv_text).empty()) throw bad_request("empty file");
  corpus::LoadResult parsed;
  try {
    parsed = corpus::parse_reviews(csv_text);
  } catch (const ValidationError& e) {
    throw bad_request(std::string("malformed CSV: ") + e.what());
  }
  for (auto& r : parsed.reviews) r.source = corpus::Source::Uploaded;
  Impl::check_reviews(parsed);
  const auto file_name = trim(name).empty() ? std::string("upload") : std::string(trim(name));
  const auto id = impl_->create_file(*d, a, file_name, parsed, "upload");
  return impl_->created_file_json(*d, id, parsed);
}

Json AnnotationService::scrape(const std::string& token, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  Impl::require(a, Role::Developer);
  const auto& src = impl_->opt.scrape_source;
  if (src.empty()) throw ApiError(503, "unavailable", "no review source is configured");
  acquisition::ScrapeRequest req;
  req.app_id = string_field(body, "app_id");
  auto from = parse_date(string_field(body, "from"));
  auto to = parse_date(string_field(body, "to"));
  if (!from || !to) throw bad_request("from and to must be YYYY-MM-DD dates");
  req.start_date = *from;
  req.end_date = *to;
  if (body.contains("max_reviews")) {
    if (!body["max_reviews"].is_number_unsigned()) throw bad_request("max_reviews must be a positive integer");
    req.max_reviews = body["max_reviews"].get<std::size_t>();
  }
  try {
    req.validate();
  } catch (const ValidationError& e) {
    throw bad_request(e.what());
  }
  std::unique_ptr<acquisition::ReviewSource> source;
  if (src.rfind("fixture:", 0) == 0) source = std::make_unique<acquisition::FixtureSource>(src.substr(8));
  else if (src == "live") source = std::make_unique<acquisition::PlayStoreSource>(acquisition::make_https_transport());
  else throw ApiError(503, "unavailable", "unknown review source '" + src + "'");
  acquisition::FetchPage page;
  try {
    page = acquisition::fetch_all(*source, req, req.max_reviews);
  } catch (const RuntimeError& e) {
    throw ApiError(502, "upstream_error", e.what());
  }
  corpus::LoadResult parsed;
  parsed.reviews = std::move(page.reviews);
  for (auto& r : parsed.reviews) r.source = corpus::Source::Scraped;
  Impl::check_reviews(parsed);
  const auto name = body.contains("name") ? string_field(body, "name")
                                          : req.app_id + " " + format_date(req.start_date) + ".." + format_date(req.end_date);
  const auto id = impl_->create_file(*d, a, name, parsed, "scrape");
  auto out = impl_->created_file_json(*d, id, parsed);
  out["dropped_undated"] = page.dropped_undated;
  return out;
}

Json AnnotationService::list_files(const std::string& token) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  Json files = Json::array();
  if (a.role == Role::Developer) {
    std::vector<std::int64_t> ids;
    auto st = d->prepare("SELECT id FROM files WHERE owner = ? ORDER BY id");
    st.bind(1, a.id);
    while (st.step()) ids.push_back(st.int_at(0));
    for (auto id : ids) {
      auto lock = impl_->file_lock(id);
      std::shared_lock read(*lock);
      files.push_back(impl_->progress_json(*d, Impl::load_file(*d, id)));
    }
  } else {
    std::vector<std::int64_t> ids;
    auto st = d->prepare(
        "SELECT f.id FROM files f JOIN assignments a ON a.file_id = f.id AND a.generation = f.generation "
        "WHERE a.annotator = ? ORDER BY f.id");
    st.bind(1, a.id);
    while (st.step()) ids.push_back(st.int_at(0));
    for (auto id : ids) {
      auto lock = impl_->file_lock(id);
      std::shared_lock read(*lock);
      auto f = Impl::load_file(*d, id);
      if (auto s = Impl::slot_of(*d, f, a.id)) files.push_back(impl_->annotator_view(*d, f, *s));
    }
  }
  return Json{{"files", files}};
}

Json AnnotationService::get_file(const std::string& token, std::int64_t file_id) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::shared_lock read(*lock);
  auto f = Impl::load_file(*d, file_id);
  if (a.role == Role::Developer) {
    Impl::require_owner(a, f);
    return impl_->progress_json(*d, f);
  }
  auto s = Impl::slot_of(*d, f, a.id);
  if (!s) throw forbidden("you are not assigned to this file");
  auto out = impl_->annotator_view(*d, f, *s);
  out["guidelines"] = annotation_guidelines();
  return out;
}

Json AnnotationService::invite(const std::string& token, std::int64_t file_id, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::unique_lock write(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  auto pair = impl_->resolve_pair(*d, body);
  Transaction tx(*d);
  if (!Impl::slots(*d, f.id, f.generation).empty()) throw conflict("file already has annotators; use reassign");
  impl_->assign(*d, f, f.generation, pair);
  impl_->audit(*d, a.id, f.id, "invite", Json{{"emails", {pair[0].second, pair[1].second}}, {"generation", f.generation}});
  tx.commit();
  impl_->send_invitations(f, pair);
  return impl_->progress_json(*d, f);
}

Json AnnotationService::progress(const std::string& token, std::int64_t file_id) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::shared_lock read(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  return impl_->progress_json(*d, f);
}

Json AnnotationService::reviews(const std::string& token, std::int64_t file_id, std::size_t cursor, std::size_t limit,
                                const std::string& category) {
  check_category(category, true);
  if (limit == 0) limit = 50;
  limit = std::min<std::size_t>(limit, 500);
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::shared_lock read(*lock);
  auto f = Impl::load_file(*d, file_id);
  std::optional<Slot> slot;
  if (a.role == Role::Developer) Impl::require_owner(a, f);
  else if (!(slot = Impl::slot_of(*d, f, a.id))) throw forbidden("you are not assigned to this file");
  if (slot && !category.empty()) throw bad_request("category filtering is for model-annotated views");

  auto all = Impl::load_reviews(*d, f.id);
  std::map<std::string, Label> mine;
  std::map<std::string, bool> disagree;
  if (slot) {
    mine = Impl::labels_of(*d, f.id, f.generation, a.id);
  } else {
    auto st = d->prepare("SELECT review_id, disagree FROM feedback WHERE file_id = ? AND developer = ?");
    st.bind(1, f.id).bind(2, a.id);
    while (st.step()) disagree[st.text_at(0)] = st.int_at(1) != 0;
  }
  std::vector<const StoredReview*> view;
  for (const auto& r : all) {
    if (!category.empty() && (!r.review.model_label || !in_category(*r.review.model_label, category))) continue;
    view.push_back(&r);
  }
  Json items = Json::array();
  for (std::size_t i = cursor; i < view.size() && i < cursor + limit; ++i) {
    const auto& r = view[i]->review;
    Json item{{"review_id", r.review_id}, {"raw_text", r.raw_text}, {"index", i}};
    if (slot) {
      auto it = mine.find(r.review_id);
      item["label"] = it == mine.end() ? Json(nullptr) : Json(std::string(label_name(it->second)));
    } else {
      item["model_label"] = r.model_label ? Json(std::string(label_name(*r.model_label))) : Json(nullptr);
      item["model_probs"] = r.model_probs ? Json(*r.model_probs) : Json(nullptr);
      auto it = disagree.find(r.review_id);
      item["disagree"] = it != disagree.end() && it->second;
    }
    items.push_back(item);
  }
  Json out{{"items", items}, {"total", view.size()}};
  out["next_cursor"] = cursor + limit < view.size() ? Json(cursor + limit) : Json(nullptr);
  if (slot) {
    Json first = nullptr;
    for (std::size_t i = 0; i < view.size(); ++i) {
      if (!mine.count(view[i]->review.review_id)) {
        first = i;
        break;
      }
    }
    out["first_unlabeled"] = first;
    out["labeled"] = mine.size();
    out["completed"] = slot->completed;
  }
  return out;
}

Json AnnotationService::submit_labels(const std::string& token, std::int64_t file_id, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  Impl::require(a, Role::Annotator);
  auto lock = impl_->file_lock(file_id);
  std::unique_lock write(*lock);
  auto f = Impl::load_file(*d, file_id);
  auto slot = Impl::slot_of(*d, f, a.id);
  if (!slot) throw forbidden("you are not assigned to this file");
  if (slot->completed) throw conflict("you have already completed this file");
  if (!body.is_object() || !body.contains("labels") || !body["labels"].is_array()) {
    throw bad_request("field 'labels' must be a list", Json{{"field", "labels"}});
  }
  std::set<std::string> known;
  {
    auto st = d->prepare("SELECT review_id FROM reviews WHERE file_id = ?");
    st.bind(1, f.id);
    while (st.step()) known.insert(st.text_at(0));
  }
  std::vector<std::pair<std::string, Label>> items;
  Json unknown = Json::array(), bad = Json::array();
  for (const auto& e : body["labels"]) {
    if (!e.is_object() || !e.contains("review_id") || !e["review_id"].is_string() || !e.contains("label") ||
        !e["label"].is_string()) {
      throw bad_request("each label needs string review_id and label");
    }
    const auto rid = e["review_id"].get<std::string>();
    const auto text = e["label"].get<std::string>();
    auto l = parse_label(text);
    if (!known.count(rid)) unknown.push_back(rid);
    else if (!l) bad.push_back({{"review_id", rid}, {"label", text}});
    else items.emplace_back(rid, *l);
  }
  if (!unknown.empty()) throw bad_request("unknown review ids", Json{{"review_ids", unknown}});
  if (!bad.empty()) throw bad_request("labels must be one of PFR, PB, PIR", Json{{"labels", bad}});

  Transaction tx(*d);
  const auto t = impl_->now();
  for (const auto& [rid, l] : items) {
    d->prepare(
         "INSERT INTO annotations(file_id, generation, review_id, annotator, label, labeled_at) VALUES(?, ?, ?, ?, ?, ?) "
         "ON CONFLICT(file_id, generation, review_id, annotator) DO UPDATE SET label = excluded.label, "
         "labeled_at = excluded.labeled_at")
        .bind(1, f.id)
        .bind(2, f.generation)
        .bind(3, rid)
        .bind(4, a.id)
        .bind(5, static_cast<std::int64_t>(label_code(l)))
        .bind(6, t)
        .run();
  }
  const auto labeled = Impl::labels_of(*d, f.id, f.generation, a.id).size();
  const auto total = static_cast<std::size_t>(Impl::review_count(*d, f.id));
  const bool done = labeled == total;
  if (done) {
    d->prepare("UPDATE assignments SET completed = 1 WHERE file_id = ? AND generation = ? AND annotator = ?")
        .bind(1, f.id)
        .bind(2, f.generation)
        .bind(3, a.id)
        .run();
  }
  impl_->audit(*d, a.id, f.id, "labels", Json{{"count", items.size()}, {"generation", f.generation}, {"completed", done}});
  tx.commit();
  return Json{{"file_id", f.id}, {"labeled", labeled}, {"total", total}, {"completed", done}};
}

Json AnnotationService::model_annotate(const std::string& token, std::int64_t file_id, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::unique_lock write(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  const auto path = impl_->choose_model(body);
  auto model = impl_->model_at(path);
  const auto& prep = impl_->prep_config();

  auto stored = Impl::load_reviews(*d, f.id);
  if (stored.empty()) throw bad_request("file has no reviews");
  std::vector<std::vector<std::string>> docs;
  Json empty = Json::array();
  for (const auto& s : stored) {
    docs.push_back(textprep::postprocess(textprep::preprocess(s.review.raw_text, prep), prep));
    if (docs.back().empty()) empty.push_back(s.review.review_id);
  }
  if (!empty.empty()) throw bad_request("reviews are empty after text processing", Json{{"review_ids", empty}});
  auto preds = grace::predict(*model, docs);

  Transaction tx(*d);
  Json dist{{"PFR", 0}, {"PB", 0}, {"PIR", 0}};
  for (std::size_t i = 0; i < stored.size(); ++i) {
    d->prepare("UPDATE reviews SET model_label = ?, model_probs = ? WHERE file_id = ? AND review_id = ?")
        .bind(1, static_cast<std::int64_t>(label_code(preds[i].label)))
        .bind(2, Json(preds[i].probs).dump())
        .bind(3, f.id)
        .bind(4, stored[i].review.review_id)
        .run();
    auto key = std::string(label_name(preds[i].label));
    dist[key] = dist[key].get<int>() + 1;
  }
  d->prepare("UPDATE files SET model_run = 1 WHERE id = ?").bind(1, f.id).run();
  impl_->audit(*d, a.id, f.id, "model_annotate",
               Json{{"model", path.filename().string()}, {"overwrite", f.model_run}, {"distribution", dist}});
  tx.commit();
  return Json{{"file_id", f.id}, {"total", stored.size()}, {"distribution", dist}, {"overwritten", f.model_run}};
}

std::string AnnotationService::submit_feedback(const std::string& token, std::int64_t file_id, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::unique_lock write(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  if (!f.model_run) throw conflict("feedback needs a model-annotated file");
  const auto category = string_field(body, "category");
  check_category(category, false);
  const auto disagree_list = string_list(body, "disagree", false);
  const std::set<std::string> disagree(disagree_list.begin(), disagree_list.end());

  auto stored = Impl::load_reviews(*d, f.id);
  std::vector<corpus::Review> filtered;
  std::set<std::string> in_filter;
  for (auto& s : stored) {
    if (s.review.model_label && in_category(*s.review.model_label, category)) {
      in_filter.insert(s.review.review_id);
      filtered.push_back(std::move(s.review));
    }
  }
  Json outside = Json::array();
  for (const auto& id : disagree)
    if (!in_filter.count(id)) outside.push_back(id);
  if (!outside.empty()) throw bad_request("disagreements must name reviews in the selected category", Json{{"review_ids", outside}});

  Transaction tx(*d);
  const auto t = impl_->now();
  for (const auto& r : filtered) {
    d->prepare(
         "INSERT INTO feedback(file_id, review_id, developer, disagree, recorded_at) VALUES(?, ?, ?, ?, ?) "
         "ON CONFLICT(file_id, review_id, developer) DO UPDATE SET disagree = excluded.disagree, "
         "recorded_at = excluded.recorded_at")
        .bind(1, f.id)
        .bind(2, r.review_id)
        .bind(3, a.id)
        .bind(4, static_cast<std::int64_t>(disagree.count(r.review_id) ? 1 : 0))
        .bind(5, t)
        .run();
  }
  impl_->audit(*d, a.id, f.id, "feedback", Json{{"category", category}, {"disagree", disagree.size()}, {"filtered", filtered.size()}});
  tx.commit();

  std::vector<corpus::Review> keep;
  for (auto& r : filtered)
    if (!disagree.count(r.review_id)) keep.push_back(std::move(r));
  return corpus::format_reviews(keep, true, f.extra_columns);
}

std::string AnnotationService::export_csv(const std::string& token, std::int64_t file_id, const std::string& mode,
                                          std::optional<std::int64_t> generation) {
  if (mode != "human" && mode != "model") throw bad_request("mode must be human or model", Json{{"field", "mode"}});
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::shared_lock read(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  auto stored = Impl::load_reviews(*d, f.id);
  std::vector<corpus::Review> out;
  if (mode == "model") {
    if (!f.model_run) throw conflict("file has not been model-annotated");
    for (auto& s : stored) out.push_back(std::move(s.review));
  } else {
    const auto gen = generation.value_or(f.generation);
    if (gen < 1 || gen > f.generation) throw ApiError(404, "not_found", "no generation " + std::to_string(gen));
    const auto s = Impl::slots(*d, f.id, gen);
    if (s.size() != 2 || !s[0].completed || !s[1].completed) {
      throw conflict("human annotation is not complete for generation " + std::to_string(gen));
    }
    const auto la = Impl::labels_of(*d, f.id, gen, s[0].annotator);
    const auto lb = Impl::labels_of(*d, f.id, gen, s[1].annotator);
    for (auto& st : stored) {
      auto r = std::move(st.review);
      r.model_label.reset();
      r.model_probs.reset();
      if (auto it = la.find(r.review_id); it != la.end()) r.label_a = it->second;
      if (auto it = lb.find(r.review_id); it != lb.end()) r.label_b = it->second;
      out.push_back(std::move(r));
    }
  }
  {
    auto conn = impl_->pool.acquire();
    impl_->audit(*conn, a.id, f.id, "export", Json{{"mode", mode}, {"generation", generation.value_or(f.generation)}});
  }
  return corpus::format_reviews(out, true, f.extra_columns);
}

Json AnnotationService::reassign(const std::string& token, std::int64_t file_id, const Json& body) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto lock = impl_->file_lock(file_id);
  std::unique_lock write(*lock);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  auto current = Impl::slots(*d, f.id, f.generation);
  if (current.empty()) throw conflict("file has no annotators yet; use invite");
  auto pair = impl_->resolve_pair(*d, body);
  const std::set<std::int64_t> old_ids{current[0].annotator, current.size() > 1 ? current[1].annotator : 0};
  if (old_ids == std::set<std::int64_t>{pair[0].first, pair[1].first}) {
    throw bad_request("reassignment needs a different pair of annotators");
  }
  Transaction tx(*d);
  const auto next = f.generation + 1;
  d->prepare("UPDATE files SET generation = ? WHERE id = ?").bind(1, next).bind(2, f.id).run();
  impl_->assign(*d, f, next, pair);
  impl_->audit(*d, a.id, f.id, "reassign",
               Json{{"from_generation", f.generation}, {"generation", next}, {"emails", {pair[0].second, pair[1].second}}});
  tx.commit();
  f.generation = next;
  impl_->send_invitations(f, pair);
  return impl_->progress_json(*d, f);
}

Json AnnotationService::audit_log(const std::string& token, std::int64_t file_id) {
  auto d = impl_->pool.acquire();
  auto a = impl_->authenticate(*d, token);
  auto f = Impl::load_file(*d, file_id);
  Impl::require_owner(a, f);
  auto st = d->prepare("SELECT at, user_id, action, details FROM audit_log WHERE file_id = ? ORDER BY id");
  st.bind(1, f.id);
  Json out = Json::array();
  while (st.step()) {
    out.push_back({{"at", st.int_at(0)},
                   {"user_id", st.null_at(1) ? Json(nullptr) : Json(st.int_at(1))},
                   {"action", st.text_at(2)},
                   {"details", Json::parse(st.text_at(3))}});
  }
  return Json{{"entries", out}};
}

}  // namespace sensor::service
