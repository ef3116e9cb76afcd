#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sensor::cli {

// Written beside a subcommand's primary output as "<output>.run.manifest".
struct RunManifest {
  std::string subcommand;
  std::string config_hash;  // hex FNV-1a of the effective config
  std::vector<std::pair<std::string, std::string>> inputs;
  std::vector<std::pair<std::string, std::string>> outputs;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::string tool_version;

  std::string to_text() const;
  static RunManifest parse(std::string_view text);
};

std::filesystem::path run_manifest_path(const std::filesystem::path& primary_output);

// Default resource directory (contractions, stopwords, keywords, synonyms).
std::filesystem::path default_data_dir();

// Exit codes: 0 ok, 1 usage or validation error, 2 runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sensor::cli
