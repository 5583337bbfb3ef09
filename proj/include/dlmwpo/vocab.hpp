#pragma once

// Character-level vocabulary shared by every toy task. Three control tokens
// (pad, mask, eos) plus digits, lowercase letters, and the punctuation the
// task grammars need. Total stays under 64 ids.

#include <array>
#include <string>
#include <vector>

#include "common.hpp"

namespace dlmwpo {

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kEos = 2;

  Vocab() {
    chars_ = "0123456789abcdefghijklmnopqrstuvwxyz +-*/()=<>\\{}:.,?_\n";
    table_.fill(-1);
    for (std::size_t i = 0; i < chars_.size(); ++i)
      table_[static_cast<unsigned char>(chars_[i])] = static_cast<int>(i) + 3;
  }

  int size() const { return static_cast<int>(chars_.size()) + 3; }

  int id(char c) const {
    int v = table_[static_cast<unsigned char>(c)];
    return v >= 0 ? v : table_[static_cast<unsigned char>('?')];  // unknown maps to '?'
  }

  // Control ids decode to nothing; see decode_until_stop for reward parsing.
  char ch(int id) const {
    if (id < 3 || id >= size()) return '\0';
    return chars_[static_cast<std::size_t>(id - 3)];
  }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(id(c));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      char c = ch(t);
      if (c) out.push_back(c);
    }
    return out;
  }

  // Decodes up to the first pad or eos; completions are padded after their
  // content, so this recovers the intended text.
  std::string decode_until_stop(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      if (t == kPad || t == kEos) break;
      char c = ch(t);
      if (c) out.push_back(c);
    }
    return out;
  }

 private:
  std::string chars_;
  std::array<int, 256> table_;
};

inline const Vocab& task_vocab() {
  static const Vocab v;
  return v;
}

}  // namespace dlmwpo
