#include "vigil/vocab.hpp"

namespace vigil {

Vocab Vocab::standard(int categories) {
  if (categories < 1) throw VocabError("vocab: need at least one category");
  Vocab v;
  v.categories_ = categories;
  auto push = [&v](const std::string& tok) {
    v.index_[tok] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(tok);
    return static_cast<int>(v.tokens_.size()) - 1;
  };
  v.bos_ = push("<bos>");
  v.stream_eos_ = push("<silent>");
  v.query_start_ = push("<q>");
  v.query_end_ = push("</q>");
  v.response_end_ = push("</r>");
  v.first_category_ = static_cast<int>(v.tokens_.size());
  for (int c = 0; c < categories; ++c) push("<cat" + std::to_string(c) + ">");
  for (const char* t : {"predict", "detect", "analyze", "warning", "expected", "detected", "now",
                        "ongoing", "anomaly", "since", "onset", "what", "is", "happening"}) {
    push(t);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw VocabError("vocab: unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw VocabError("vocab: token id " + std::to_string(id) + " outside [0," +
                     std::to_string(size()) + ")");
  }
  return tokens_[id];
}

int Vocab::category_id(int category) const {
  if (category < 0 || category >= categories_) {
    throw VocabError("vocab: category " + std::to_string(category) + " outside [0," +
                     std::to_string(categories_) + ")");
  }
  return first_category_ + category;
}

int Vocab::category_of(int id) const {
  if (!is_category(id)) throw VocabError("vocab: id " + std::to_string(id) + " is not a category");
  return id - first_category_;
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::string Vocab::join(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

}  // namespace vigil
