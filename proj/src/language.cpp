#include "minidrive/language.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace md::lang {

namespace {

const char* kSpecials[] = {"[PAD]", "[CLS]", "[UNK]", "[Distance]"};

// Closed grammar of nine commands plus connective words seen in variants.
const char* kWords[] = {
    "follow", "the",  "lane",  "turn",   "left", "right", "go",     "straight",
    "change", "to",   "stop",  "speed",  "up",   "slow",  "down",   "at",
    "next",   "intersection", "ahead", "keep", "in", "meters",
};

}  // namespace

int Vocabulary::id_of(const std::string& token) const {
  for (int i = 0; i < size(); ++i)
    if (id_to_token[static_cast<std::size_t>(i)] == token) return i;
  return unk_id;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) throw VocabularyError("token_of: id out of range");
  return id_to_token[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::build_default() {
  Vocabulary v;
  for (const char* s : kSpecials) v.id_to_token.emplace_back(s);
  for (const char* w : kWords) v.id_to_token.emplace_back(w);
  for (int b = 0; b <= kMaxDistanceBucket; b += kDistanceBucketMeters)
    v.id_to_token.push_back("d" + std::to_string(b));
  return v;
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::json j;
  for (int i = 0; i < size(); ++i) j[id_to_token[static_cast<std::size_t>(i)]] = i;
  std::ofstream os(path);
  if (!os) throw ContractError("vocab: cannot open " + path);
  os << j.dump(2) << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("vocab: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  Vocabulary v;
  v.id_to_token.resize(j.size());
  for (auto it = j.begin(); it != j.end(); ++it) {
    const int id = it.value().get<int>();
    if (id < 0 || id >= static_cast<int>(j.size())) throw VocabularyError("vocab: ids not dense");
    v.id_to_token[static_cast<std::size_t>(id)] = it.key();
  }
  return v;
}

std::string distance_bucket_token(double meters) {
  int b = static_cast<int>(std::floor(meters / kDistanceBucketMeters)) * kDistanceBucketMeters;
  b = std::clamp(b, 0, kMaxDistanceBucket);
  return "d" + std::to_string(b);
}

std::vector<int> tokenize(const Instruction& instr, const Vocabulary& vocab) {
  std::string norm;
  norm.reserve(instr.text.size());
  for (char ch : instr.text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) norm.push_back(static_cast<char>(std::tolower(u)));
    else if (std::isspace(u)) norm.push_back(' ');
    // punctuation dropped
  }
  std::vector<int> out{vocab.cls_id};
  std::istringstream ss(norm);
  std::string word;
  while (ss >> word) out.push_back(vocab.id_of(word));
  if (instr.distance_m) {
    out.push_back(vocab.distance_id);
    out.push_back(vocab.id_of(distance_bucket_token(*instr.distance_m)));
  }
  out.resize(kSeqLen, vocab.pad_id);  // pad or truncate
  return out;
}

Instruction detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  Instruction instr;
  bool next_is_distance = false;
  for (int id : ids) {
    if (id == vocab.pad_id || id == vocab.cls_id || id == vocab.unk_id) continue;
    if (id == vocab.distance_id) {
      next_is_distance = true;
      continue;
    }
    const std::string& tok = vocab.token_of(id);
    if (next_is_distance && tok.size() > 1 && tok[0] == 'd') {
      instr.distance_m = std::stod(tok.substr(1));
      next_is_distance = false;
      continue;
    }
    if (!instr.text.empty()) instr.text += ' ';
    instr.text += tok;
  }
  return instr;
}

InstructionEmbedding::InstructionEmbedding(nn::ParamRegistry& reg, const std::string& name,
                                           int vocab_size, int d, Rng& rng) {
  table = reg.add(name + ".table", nn::embed_init({vocab_size, d}, rng));
  positions = reg.add(name + ".positions", nn::embed_init({kSeqLen, d}, rng));
}

Tensor InstructionEmbedding::forward(const std::vector<int>& ids) const {
  if (static_cast<int>(ids.size()) != kSeqLen)
    throw DimensionError("embed: expected fixed-length id sequence");
  return ops::add(ops::embedding_lookup(table, ids), positions);
}

}  // namespace md::lang
