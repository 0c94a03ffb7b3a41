#pragma once

// Line-delimited JSON trace files and bit-exact replay.
//
// Each trace file holds, in order: one {"type":"config"} header, one
// {"type":"meta_step"} record per meta-step, and one {"type":"result"}
// record carrying the final trajectory.

#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "maxs/engine.hpp"

namespace maxs {

nlohmann::json to_json(const ToolInvocation& inv);
nlohmann::json to_json(const Step& step);
nlohmann::json to_json(const Trajectory& trajectory);
nlohmann::json to_json(const Rollout& rollout);
nlohmann::json to_json(const ValueBreakdown& breakdown);
nlohmann::json to_json(const MetaStepRecord& record);
nlohmann::json to_json(const SearchConfig& config);

ToolInvocation tool_invocation_from_json(const nlohmann::json& j);
Step step_from_json(const nlohmann::json& j);
Trajectory trajectory_from_json(const nlohmann::json& j);
Rollout rollout_from_json(const nlohmann::json& j);
ValueBreakdown breakdown_from_json(const nlohmann::json& j);
MetaStepRecord meta_step_from_json(const nlohmann::json& j);
/// Missing keys keep their defaults.
SearchConfig search_config_from_json(const nlohmann::json& j, SearchConfig base = {});

/// Appends and flushes one line per record.
class JsonlTraceWriter final : public TraceSink {
 public:
  JsonlTraceWriter(const std::filesystem::path& path, const SearchConfig& config);

  void meta_step(const MetaStepRecord& record) override;
  void result(std::string_view method, const Trajectory& trajectory, int runs) override;

 private:
  void write_line(const nlohmann::json& j);
  std::mutex mutex_;
  std::ofstream out_;
};

struct TraceFile {
  SearchConfig config;
  std::vector<MetaStepRecord> records;
  std::string method;
  int runs = 1;
  std::optional<Trajectory> result;
};

/// Throws ParseError with the offending line.
TraceFile read_trace(const std::filesystem::path& path);

struct ReplayReport {
  Trajectory reconstructed;
  bool trajectory_matches = false;
  bool breakdowns_match = false;
  bool usage_matches = false;
  std::vector<std::string> problems;

  bool ok() const noexcept { return problems.empty(); }
};

/// Re-scores every recorded meta-step, checks each commit against its
/// chosen candidate, and rebuilds the final trajectory from the commits.
ReplayReport replay(const TraceFile& trace);

}  // namespace maxs
