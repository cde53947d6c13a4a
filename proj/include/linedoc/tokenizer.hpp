#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "linedoc/rng.hpp"

namespace linedoc {

// Whitespace-free word tokenizer with per-character fallback.
// Reserved ids: 0 [CLS] (begin of sequence), 1 [PAD], 2 [MASK], 3 [UNK].
class Tokenizer {
 public:
  static constexpr int kCls = 0;
  static constexpr int kPad = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;

  static Tokenizer build(const std::vector<std::string>& corpus_words) {
    Tokenizer tk;
    tk.add("[CLS]");
    tk.add("[PAD]");
    tk.add("[MASK]");
    tk.add("[UNK]");
    for (char c = 'a'; c <= 'z'; ++c) tk.add(std::string(1, c));
    for (char c = '0'; c <= '9'; ++c) tk.add(std::string(1, c));
    for (const auto& w : corpus_words) tk.add(w);
    return tk;
  }

  // The canonical vocabulary of the synthetic corpus: word strings are a
  // pure function of (index), so the same tokenizer can be rebuilt from
  // just the word count stored in a checkpoint.
  static Tokenizer synthetic(int word_count) {
    std::vector<std::string> words;
    words.reserve(static_cast<size_t>(word_count));
    for (int i = 0; i < word_count; ++i) words.push_back(synthetic_word(i));
    return build(words);
  }

  static std::string synthetic_word(int index) {
    uint64_t s = mix_seed(0x776f7264U, static_cast<uint64_t>(index));
    uint64_t h = splitmix64(s);
    int len = 3 + static_cast<int>(h % 5);
    std::string w;
    for (int i = 0; i < len; ++i) {
      h = splitmix64(s);
      w += static_cast<char>('a' + (h % 26));
    }
    // suffix the index so every vocabulary word is distinct
    w += std::to_string(index);
    return w;
  }

  int size() const { return static_cast<int>(vocab_.size()); }
  const std::string& token(int id) const { return vocab_.at(static_cast<size_t>(id)); }

  int word_id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? -1 : it->second;
  }

  // full word if known, else per-character fallback, else [UNK]
  std::vector<int> encode_word(const std::string& w) const {
    if (w.empty()) throw std::invalid_argument("encode_word: empty word");
    int id = word_id(w);
    if (id >= 0) return {id};
    std::vector<int> out;
    for (char c : w) {
      int cid = word_id(std::string(1, c));
      out.push_back(cid >= 0 ? cid : kUnk);
    }
    return out;
  }

  bool is_special(int id) const { return id <= kUnk; }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) throw std::logic_error("duplicate vocab entry: " + w);
    index_[w] = static_cast<int>(vocab_.size());
    vocab_.push_back(w);
  }

  std::vector<std::string> vocab_;
  std::map<std::string, int> index_;
};

}  // namespace linedoc
