#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmea/numerics.hpp"
#include "dmea/tokens.hpp"

namespace dmea {

struct Sample {
  std::vector<int> x;
  std::vector<int> y;
};

enum class TaskFamily { templated_nlg, copy, reverse, sort, arithmetic };

std::string family_name(TaskFamily f);

struct TaskSpec {
  std::string task_id;
  std::string name;
  std::vector<int> instruction;  // Q
  int generation_token = -1;     // G
  TaskFamily family = TaskFamily::copy;
  std::vector<Sample> train, valid, test;
  std::vector<int> domain_lexicon;  // content tokens specific to this task
};

// Token layout: [X, <sep>, Q, <ans>, Y, <eos>], optionally prefixed with G.
// answer_start is the index of the <ans> separator; the answer region is
// everything after it.
struct EncodedSample {
  std::vector<int> tokens;
  int answer_start = 0;
  int total_length() const { return static_cast<int>(tokens.size()); }
};

struct TaskgenConfig {
  int train_size = 200;
  int valid_size = 50;
  int test_size = 100;
  std::uint64_t suite_seed = 20240601;  // task data is fixed across run seeds
  void validate() const;
};

std::vector<TaskSpec> make_similar_suite(std::uint64_t seed, const TaskgenConfig& cfg = {});
std::vector<TaskSpec> make_random_suite(std::uint64_t seed, const TaskgenConfig& cfg = {});
std::vector<TaskSpec> make_long_suite(std::uint64_t seed, const TaskgenConfig& cfg = {});
std::vector<TaskSpec> make_suite(const std::string& suite_name, std::uint64_t seed,
                                 const TaskgenConfig& cfg = {});

// Normalized token counts over all X, Q and Y tokens of the train set,
// dense over the shared vocabulary.
Vector word_frequency(const TaskSpec& task);

EncodedSample encode(const Sample& s, const TaskSpec& task, bool with_generation_token);
EncodedSample encode_triple(const std::vector<int>& x, const std::vector<int>& q,
                            const std::vector<int>& y, int generation_token /* -1 = none */);

struct DecodedTriple {
  std::vector<int> x, q, y;
};
// Inverse of encode_triple on the body (G excluded); throws InvalidSample when
// the layout is malformed or a region is empty.
DecodedTriple decode(const std::vector<int>& body_tokens);

// Pretraining material: generic copy ("repeat the text") and cyclic
// next-token ("continue the text") triples over the shared vocabulary,
// instruction-disjoint from every task family above.
struct PretrainCorpus {
  std::vector<EncodedSample> train;
  std::vector<EncodedSample> heldout_copy;  // for the copy-accuracy check
};
PretrainCorpus make_pretrain_corpus(std::uint64_t seed, int train_samples = 4000,
                                    int heldout_samples = 200);

}  // namespace dmea
