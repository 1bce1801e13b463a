#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace mseg::cli {

/// Record of one command invocation, written as `<out>/run_manifest.json`.
struct RunManifest {
  std::string command;
  nlohmann::json config;  // resolved options; feed back through --config to rerun
  std::vector<std::string> inputs, outputs;
  std::uint64_t seed = 0;
  std::string tool_version;
  double wall_clock_s = 0;

  nlohmann::json to_json() const {
    return {{"command", command},   {"config", config},
            {"inputs", inputs},     {"outputs", outputs},
            {"seed", seed},         {"tool_version", tool_version},
            {"wall_clock_s", wall_clock_s}};
  }

  /// Writes to a sibling temp file, then renames over the target.
  void write(const std::filesystem::path& out_dir) const {
    std::filesystem::create_directories(out_dir);
    const auto final_path = out_dir / "run_manifest.json";
    const auto tmp = out_dir / ".run_manifest.json.tmp";
    {
      std::ofstream f(tmp);
      if (!f) throw std::runtime_error("cannot write " + tmp.string());
      f << to_json().dump(2) << '\n';
      if (!f) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, final_path);
  }
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace mseg::cli
