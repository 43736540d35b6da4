#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbvila/common.hpp"

namespace cbvila {

/// Closed word vocabulary. Stored on disk as one token per line, index =
/// line number; ids 0..4 are the special tokens.
struct Vocab {
  static constexpr int pad_id = 0;
  static constexpr int cls_id = 1;
  static constexpr int sep_id = 2;
  static constexpr int mask_id = 3;
  static constexpr int unk_id = 4;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(tokens.size()); }

  int id_of(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? unk_id : it->second;
  }

  bool is_special(int id) const { return id <= unk_id; }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    v.tokens = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
    for (const auto& w : words) v.tokens.push_back(w);
    for (int i = 0; i < v.size(); ++i) v.index[v.tokens[static_cast<std::size_t>(i)]] = i;
    return v;
  }

  static Vocab from_lines(const std::vector<std::string>& lines) {
    require_input(lines.size() >= 5, "vocab: needs at least the 5 special tokens");
    Vocab v;
    v.tokens = lines;
    for (int i = 0; i < v.size(); ++i) v.index[v.tokens[static_cast<std::size_t>(i)]] = i;
    require_input(v.tokens[0] == "[PAD]" && v.tokens[1] == "[CLS]" && v.tokens[2] == "[SEP]" &&
                      v.tokens[3] == "[MASK]" && v.tokens[4] == "[UNK]",
                  "vocab: special tokens must occupy ids 0..4");
    return v;
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("vocab: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
    return from_lines(lines);
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw InputError("vocab: cannot write " + path);
    for (const auto& t : tokens) f << t << "\n";
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens) {
      out += t;
      out += '\n';
    }
    return out;
  }
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

/// Lowercased whitespace tokenization wrapped with [CLS]/[SEP], padded or
/// truncated to max_len ids. Out-of-vocabulary words map to [UNK]. Total
/// function: never throws on caption content.
inline std::vector<int> tokenize(const std::string& caption, const Vocab& vocab, int max_len) {
  require_contract(max_len >= 2, "tokenize: max_len must fit [CLS] and [SEP]");
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  ids.push_back(Vocab::cls_id);
  for (const auto& w : split_words(caption)) {
    if (static_cast<int>(ids.size()) >= max_len - 1) break;
    ids.push_back(vocab.id_of(w));
  }
  ids.push_back(Vocab::sep_id);
  while (static_cast<int>(ids.size()) < max_len) ids.push_back(Vocab::pad_id);
  return ids;
}

/// Positions holding real words (maskable): everything but [CLS]/[SEP]/[PAD].
inline std::vector<int> maskable_positions(const std::vector<int>& ids) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id != Vocab::pad_id && id != Vocab::cls_id && id != Vocab::sep_id)
      out.push_back(i);
  }
  return out;
}

}  // namespace cbvila
