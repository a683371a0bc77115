#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace gibbscs {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestFormatVersion = 1;

// Record of one command invocation, kept as manifest.json in the output
// directory. `options` is the fully resolved option set as JSON text; replaying
// it reproduces every file listed in `outputs`.
struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::string options;                              // JSON object text
  std::uint64_t root_seed = 0;
  std::map<std::string, std::uint64_t> seeds;       // derived stream seeds
  std::map<std::string, std::string> inputs;        // path -> sha256
  std::map<std::string, std::string> outputs;       // path relative to out -> sha256
  std::map<std::string, std::string> facts;         // e.g. measurement lengths
  std::string status = "running";                   // running | complete | failed
  std::string error;
  double wall_time_s = 0.0;
};

std::string serialize_manifest(const RunManifest& manifest);
RunManifest parse_manifest(std::string_view text);
void save_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest load_manifest(const std::filesystem::path& path);

// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Directory holding the bundled images and trained models. GIBBSCS_DATA in
// the environment overrides the build-time location.
std::filesystem::path data_directory();

// Runs the tool on argv-style arguments (program name excluded) and returns
// the process exit code: 0 success, 1 replay mismatch, 2 argument error,
// 3 I/O error, 4 numerical or solver error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gibbscs
