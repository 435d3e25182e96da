#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vigil/errors.hpp"

namespace vigil {

// Closed toy vocabulary: role tokens, one token per anomaly category, and
// a small set of text tokens the response/query templates draw from. The
// streaming end-of-sequence token <silent> is the gate signal: high
// probability means "keep ingesting frames".
class Vocab {
 public:
  static Vocab standard(int categories);

  int size() const { return static_cast<int>(tokens_.size()); }
  int categories() const { return categories_; }

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  int bos() const { return bos_; }
  int stream_eos() const { return stream_eos_; }
  int query_start() const { return query_start_; }
  int query_end() const { return query_end_; }
  int response_end() const { return response_end_; }

  int category_id(int category) const;
  bool is_category(int id) const { return id >= first_category_ && id < first_category_ + categories_; }
  int category_of(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;
  std::string join(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int categories_ = 0;
  int first_category_ = 0;
  int bos_ = 0, stream_eos_ = 0, query_start_ = 0, query_end_ = 0, response_end_ = 0;
};

}  // namespace vigil
