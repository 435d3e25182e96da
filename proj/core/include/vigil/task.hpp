#pragma once

#include <string>
#include <vector>

#include "vigil/errors.hpp"

namespace vigil {

// The three session modes: event-level prediction, key-moment detection,
// and user-driven analysis.
enum class TaskMode { VAP, VAD, VAA };

inline const char* task_name(TaskMode mode) {
  switch (mode) {
    case TaskMode::VAP: return "vap";
    case TaskMode::VAD: return "vad";
    case TaskMode::VAA: return "vaa";
  }
  return "?";
}

inline TaskMode task_from_name(const std::string& name) {
  if (name == "vap") return TaskMode::VAP;
  if (name == "vad") return TaskMode::VAD;
  if (name == "vaa") return TaskMode::VAA;
  throw ConfigError("unknown task mode '" + name + "' (expected vap|vad|vaa)");
}

// The standing instruction issued at stream start.
inline std::vector<std::string> task_prompt(TaskMode mode) {
  switch (mode) {
    case TaskMode::VAP: return {"predict"};
    case TaskMode::VAD: return {"detect"};
    case TaskMode::VAA: return {"analyze"};
  }
  return {};
}

}  // namespace vigil
