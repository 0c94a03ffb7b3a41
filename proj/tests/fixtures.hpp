#pragma once

// Scripted trees and tasks shared by the test binaries.

#include <memory>
#include <string>
#include <vector>

#include "maxs/core.hpp"
#include "maxs/policy.hpp"

namespace maxs::testing {

struct ChainStep {
  std::string text;
  std::vector<double> logprobs;
};

/// A single deterministic path: question, then each step in turn.
inline std::shared_ptr<ScriptedTree> chain_tree(const std::string& question, const std::vector<ChainStep>& steps) {
  auto tree = std::make_shared<ScriptedTree>();
  ScriptedTree::Path path{question};
  for (const auto& s : steps) {
    tree->add(path, {{s.text, s.logprobs, 1.0}});
    path.push_back(s.text);
  }
  return tree;
}

inline Task make_task(std::string id, std::string question, std::string gold = "",
                      Task::GradeMode mode = Task::GradeMode::Exact) {
  Task t;
  t.id = std::move(id);
  t.question = std::move(question);
  t.gold_answer = std::move(gold);
  t.grade_mode = mode;
  return t;
}

inline ValidatedConfig config_with(void (*tweak)(SearchConfig&)) {
  SearchConfig c;
  tweak(c);
  return validate_config(c);
}

}  // namespace maxs::testing
