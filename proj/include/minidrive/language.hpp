#pragma once
// Navigation-instruction tokenizer over a closed command grammar, plus the
// trainable embedding that produces the language token sequence.

#include <optional>
#include <string>
#include <vector>

#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace md::lang {

constexpr int kSeqLen = 16;
constexpr int kDistanceBucketMeters = 10;
constexpr int kMaxDistanceBucket = 150;

struct Vocabulary {
  std::vector<std::string> id_to_token;  // ids dense from 0
  int pad_id = 0, cls_id = 1, unk_id = 2, distance_id = 3;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const;  // unk_id when unknown
  const std::string& token_of(int id) const;

  static Vocabulary build_default();
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
};

struct Instruction {
  std::string text;
  std::optional<double> distance_m;
};

// Lowercase, strip punctuation, whitespace split, prepend [CLS], append
// [Distance] + bucket token when a distance argument is present, pad or
// truncate to kSeqLen.
std::vector<int> tokenize(const Instruction& instr, const Vocabulary& vocab);
Instruction detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

std::string distance_bucket_token(double meters);

struct InstructionEmbedding {
  Tensor table;      // [V, d]
  Tensor positions;  // [kSeqLen, d]
  InstructionEmbedding() = default;
  InstructionEmbedding(nn::ParamRegistry& reg, const std::string& name, int vocab_size, int d,
                       Rng& rng);
  Tensor forward(const std::vector<int>& ids) const;  // [kSeqLen, d]
};

}  // namespace md::lang
