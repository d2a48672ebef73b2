#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rvt {

/// Record of one command invocation, written next to its main output as
/// `<output>.manifest.json`.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  /// Resolved option values (after config file and flag overrides), as JSON.
  std::string config;
  std::uint64_t seed = 0;
  /// Input path -> SHA-256 (directories hash their sorted file listing).
  std::map<std::string, std::string> inputs;
  std::vector<std::string> outputs;
  double seconds = 0.0;

  std::string to_json() const;
  void write(const std::filesystem::path& output) const;
};

/// SHA-256 of a file, or of "relative-path<TAB>file-hash" lines for every
/// regular file under a directory in sorted order.
std::string hash_path(const std::filesystem::path& path);

/// Default data directory: $RATIONALE_VT_HOME, else "./data".
std::filesystem::path default_home();

/// Runs one subcommand. Returns 0 on success, 2 on usage errors and 1 on
/// validation or runtime failures; failures print one JSON object to stderr.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace rvt
