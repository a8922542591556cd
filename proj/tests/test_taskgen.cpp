#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "dmea/taskgen.hpp"

using namespace dmea;

namespace {

std::set<std::string> sample_keys(const std::vector<Sample>& v) {
  std::set<std::string> keys;
  for (const auto& s : v) {
    std::string k;
    for (int t : s.x) k += std::to_string(t) + ",";
    k += "|";
    for (int t : s.y) k += std::to_string(t) + ",";
    keys.insert(k);
  }
  return keys;
}

bool suites_equal(const std::vector<TaskSpec>& a, const std::vector<TaskSpec>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].task_id != b[i].task_id) return false;
    if (a[i].train.size() != b[i].train.size()) return false;
    for (size_t j = 0; j < a[i].train.size(); ++j) {
      if (a[i].train[j].x != b[i].train[j].x || a[i].train[j].y != b[i].train[j].y) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("similar suite: determinism, sizes, lexicon disjointness") {
  auto s1 = make_similar_suite(11);
  auto s2 = make_similar_suite(11);
  CHECK(suites_equal(s1, s2));
  CHECK(s1.size() == 5);
  for (const auto& t : s1) {
    CHECK(t.family == TaskFamily::templated_nlg);
    CHECK(t.train.size() == 200);
    CHECK(t.valid.size() == 50);
    CHECK(t.test.size() == 100);
    CHECK(!t.instruction.empty());
    CHECK(t.generation_token >= Vocabulary::kGenBase);
  }
  // generation tokens unique
  std::set<int> gens;
  for (const auto& t : s1) gens.insert(t.generation_token);
  CHECK(gens.size() == s1.size());
  // content lexicons pairwise disjoint
  for (size_t i = 0; i < s1.size(); ++i) {
    for (size_t j = i + 1; j < s1.size(); ++j) {
      std::set<int> a(s1[i].domain_lexicon.begin(), s1[i].domain_lexicon.end());
      for (int tok : s1[j].domain_lexicon) CHECK(a.count(tok) == 0);
    }
  }
}

TEST_CASE("similar suite frequency cosines beat cross-family cosines") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    auto sim = make_similar_suite(seed);
    auto rnd = make_random_suite(seed);
    const TaskSpec* sort_task = nullptr;
    for (const auto& t : rnd) {
      if (t.family == TaskFamily::sort) sort_task = &t;
    }
    REQUIRE(sort_task != nullptr);
    Vector f0 = word_frequency(sim[0]);
    Vector f1 = word_frequency(sim[1]);
    Vector fs = word_frequency(*sort_task);
    CHECK(cosine_similarity(f0, f1) > cosine_similarity(f0, fs));
  }
}

TEST_CASE("random suite: determinism, family mix, split disjointness") {
  auto s1 = make_random_suite(3);
  auto s2 = make_random_suite(3);
  CHECK(suites_equal(s1, s2));
  CHECK(s1.size() == 5);
  std::set<TaskFamily> families;
  for (const auto& t : s1) families.insert(t.family);
  CHECK(families.size() >= 3);
  for (const auto& t : s1) {
    auto train = sample_keys(t.train);
    auto test = sample_keys(t.test);
    auto valid = sample_keys(t.valid);
    CHECK(train.size() == t.train.size());  // unique within split
    for (const auto& k : test) CHECK(train.count(k) == 0);
    for (const auto& k : valid) CHECK(train.count(k) == 0);
  }
}

TEST_CASE("word_frequency sums to one and counts directly") {
  auto suite = make_random_suite(9);
  for (const auto& t : suite) {
    Vector f = word_frequency(t);
    CHECK(std::abs(f.sum() - 1.0) <= 1e-9);
    CHECK(f.minCoeff() >= 0.0);
  }
  // direct count on a constructed single-sample task: x = "a a b"
  TaskSpec tiny;
  tiny.task_id = "tiny";
  tiny.instruction = {Vocabulary::shared().id("copy")};
  const int a = Vocabulary::shared().id("a");
  const int b = Vocabulary::shared().id("b");
  tiny.train.push_back({{a, a, b}, {a}});
  Vector f = word_frequency(tiny);
  CHECK(f[a] == doctest::Approx(3.0 / 5.0));
  CHECK(f[b] == doctest::Approx(1.0 / 5.0));
  // identical train sets → cosine 1
  TaskSpec tiny2 = tiny;
  CHECK(cosine_similarity(word_frequency(tiny), word_frequency(tiny2)) == doctest::Approx(1.0));
}

TEST_CASE("encode layout, generation-token shift and round trip") {
  auto suite = make_random_suite(17);
  const TaskSpec& copy_task = suite[0];
  const Sample& s = copy_task.train[0];

  EncodedSample plain = encode(s, copy_task, false);
  CHECK(plain.tokens[plain.answer_start] == Vocabulary::kAns);
  CHECK(plain.tokens[s.x.size()] == Vocabulary::kSep);
  CHECK(plain.tokens.back() == Vocabulary::kEos);
  CHECK(plain.answer_start ==
        static_cast<int>(s.x.size() + 1 + copy_task.instruction.size()));

  EncodedSample with_g = encode(s, copy_task, true);
  CHECK(with_g.tokens[0] == copy_task.generation_token);
  CHECK(with_g.answer_start == plain.answer_start + 1);
  CHECK(with_g.total_length() == plain.total_length() + 1);

  // round trip over full suites
  for (const auto& t : suite) {
    for (const auto& sample : t.train) {
      EncodedSample e = encode(sample, t, false);
      DecodedTriple d = decode(e.tokens);
      CHECK(d.x == sample.x);
      CHECK(d.q == t.instruction);
      CHECK(d.y == sample.y);
    }
  }
}

TEST_CASE("decode rejects malformed bodies") {
  const int a = Vocabulary::shared().id("a");
  CHECK_THROWS_AS(decode({a, a}), InvalidSample);                             // no sep
  CHECK_THROWS_AS(decode({Vocabulary::kSep, a, Vocabulary::kAns, a}), InvalidSample);  // empty x
  CHECK_THROWS_AS(decode({a, Vocabulary::kSep, a, Vocabulary::kAns}), InvalidSample);  // empty y
  std::vector<int> ok = {a, Vocabulary::kSep, a, Vocabulary::kAns, a, Vocabulary::kEos};
  CHECK_NOTHROW(decode(ok));
}

TEST_CASE("reserved tokens never appear inside bodies; encode length guard") {
  for (const std::string& name : {"similar", "random", "long"}) {
    auto suite = make_suite(name, 23);
    for (const auto& t : suite) {
      for (const auto* split : {&t.train, &t.valid, &t.test}) {
        for (const auto& s : *split) {
          for (int tok : s.x) CHECK(!Vocabulary::shared().is_reserved(tok));
          for (int tok : s.y) CHECK(!Vocabulary::shared().is_reserved(tok));
          CHECK(encode(s, t, true).total_length() <= kMaxSequenceLength);
        }
      }
    }
  }
  std::vector<int> longx(70, Vocabulary::shared().id("a"));
  CHECK_THROWS_AS(encode_triple(longx, {Vocabulary::shared().id("copy")},
                                {Vocabulary::shared().id("a")}, -1),
                  InvalidSample);
}

TEST_CASE("pretrain corpus is instruction-disjoint from task data") {
  PretrainCorpus corpus = make_pretrain_corpus(5, 200, 20);
  CHECK(corpus.train.size() == 200);
  CHECK(corpus.heldout_copy.size() == 20);
  const int repeat = Vocabulary::shared().id("repeat");
  const int cont = Vocabulary::shared().id("continue");
  for (const auto& e : corpus.train) {
    DecodedTriple d = decode(e.tokens);
    CHECK((d.q[0] == repeat || d.q[0] == cont));
  }
}
