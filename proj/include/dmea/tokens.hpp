#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dmea/errors.hpp"

namespace dmea {

// One fixed word-level vocabulary shared by the backbone, every task family
// and the pretraining corpus. Ids below kReservedCount are structural.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kSep = 2;   // between X and Q
  static constexpr int kAns = 3;   // between Q and Y
  static constexpr int kGenBase = 4;
  static constexpr int kNumGen = 8;  // generation tokens <gen0>..<gen7>
  static constexpr int kReservedCount = kGenBase + kNumGen;

  static const Vocabulary& shared();

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  bool is_reserved(int id) const { return id >= 0 && id < kReservedCount; }
  static int generation_token(int index);

  std::vector<int> ids(const std::vector<std::string>& words) const;
  std::string render(const std::vector<int>& tokens) const;  // space-joined words

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

inline constexpr int kMaxSequenceLength = 64;

}  // namespace dmea
