// Scratch probe for tuning the pretraining recipe; not installed.
#include <chrono>
#include <cstdlib>
#include <iostream>

#include "dmea/model.hpp"
#include "dmea/taskgen.hpp"

using namespace dmea;

int main(int argc, char** argv) {
  const int steps = argc > 1 ? std::atoi(argv[1]) : 2000;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
  BackboneConfig cfg;
  PretrainCorpus corpus = make_pretrain_corpus(seed);
  const auto t0 = std::chrono::steady_clock::now();
  ModelState st = pretrain_backbone(cfg, corpus, steps, seed);
  const auto t1 = std::chrono::steady_clock::now();
  Routing routing = Routing::identity(cfg.num_layers);
  const double acc = answer_token_accuracy(st, corpus.heldout_copy, routing);
  std::cout << "steps=" << steps << " seed=" << seed << " copy_acc=" << acc << " time="
            << std::chrono::duration_cast<std::chrono::seconds>(t1 - t0).count() << "s\n";

  const auto& vocab = Vocabulary::shared();
  std::vector<int> xy = {vocab.id("a"), vocab.id("b"), vocab.id("c")};
  EncodedSample probe = encode_triple(xy, vocab.ids({"repeat", "the", "text"}), xy, -1);
  std::vector<int> prefix(probe.tokens.begin(), probe.tokens.begin() + probe.answer_start + 1);
  DecodeConfig greedy;
  auto out = generate(st, prefix, routing, greedy);
  std::cout << "generate([a b]) -> " << vocab.render(out) << "\n";
  return 0;
}
