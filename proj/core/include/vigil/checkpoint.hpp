#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vigil/matrix.hpp"

namespace vigil {

// Versioned binary weight dump: magic + a JSON meta header (kind, config
// hash, anything the stage wants to stamp) + named float64 tensors.
// Round-trips bit-exactly.
struct Checkpoint {
  std::string kind;
  std::string meta_json;  // serialized JSON object
  std::map<std::string, Matrix> tensors;

  std::string meta_value(const std::string& key) const;  // "" when missing
};

void save_checkpoint(const std::string& path, const std::string& kind,
                     const std::string& meta_json,
                     const std::vector<std::pair<std::string, const Matrix*>>& tensors);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace vigil
