#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "hat/model.hpp"
#include "json.hpp"

namespace hat {

/// SHA-1 of "blob <size>\0<content>", as printed by `git hash-object`.
std::string git_blob_sha1(std::string_view content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

/// Resolved description of one command invocation. `input_hash` covers the
/// content of every input file, so identical manifests imply identical runs.
struct RunManifest {
  std::string command;
  std::vector<std::filesystem::path> inputs;
  nlohmann::json settings = nlohmann::json::object();
  std::filesystem::path output_dir;

  std::string input_hash() const;
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

struct ParamCountReport {
  HatConfig hat;
  HatConfig plain;
  ParameterBreakdown hat_breakdown;
  ParameterBreakdown plain_breakdown;
  std::size_t hat_total = 0;
  std::size_t plain_total = 0;
  std::size_t delta = 0;
  std::size_t closed_form_delta = 0;

  nlohmann::json to_json() const;
};

/// Counts `config` in its hierarchical and plain forms.
ParamCountReport param_count(const HatConfig& config);

struct ParamPreset {
  std::string name;
  HatConfig config;
  double quoted_hat;    // totals quoted for the published models
  double quoted_plain;
};
const std::vector<ParamPreset>& param_presets();

/// Entry point of the `hat` binary. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hat
