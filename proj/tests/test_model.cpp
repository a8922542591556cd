#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dmea/model.hpp"
#include "test_support.hpp"

using namespace dmea;
using namespace dmea::testing;

namespace {

// Two adapters per layer, fused routing, everything trainable.
struct FusedFixture {
  ModelState state;
  Routing routing;
  TrainableSet trainable;

  explicit FusedFixture(std::uint64_t seed, bool identical_modules = false) {
    state = make_model(tiny_config(), seed);
    routing.layers.clear();
    for (int l = 0; l < state.config.num_layers; ++l) {
      const std::string a = "ma" + std::to_string(l), b = "mb" + std::to_string(l);
      state.adapters[a] = make_adapter(a, l, state.config, Rng::derive_seed(seed, {10, (unsigned)l}));
      state.adapters[b] = make_adapter(
          b, l, state.config,
          identical_modules ? Rng::derive_seed(seed, {10, (unsigned)l}) : Rng::derive_seed(seed, {20, (unsigned)l}));
      Vector coeffs(2);
      coeffs << 0.3, -0.2;
      routing.layers.push_back(LayerRouting::fusion({a, b}, coeffs));
      for (const auto& n : adapter_param_names(a)) trainable.params.insert(n);
      for (const auto& n : adapter_param_names(b)) trainable.params.insert(n);
    }
    trainable.coefficients = true;
  }
};

}  // namespace

TEST_CASE("fusion over one module matches direct single-module routing") {
  ModelState st = make_model(tiny_config(), 5);
  st.adapters["m0"] = make_adapter("m0", 0, st.config, 77);
  st.adapters["m1"] = make_adapter("m1", 1, st.config, 78);
  std::vector<int> tokens = {14, 15, 2, 16, 3, 15, 1};

  Routing single = Routing::single({"m0", "m1"});
  Routing fused;
  Vector c1(1);
  c1 << 2.7;  // any logit; softmax of a singleton is 1
  fused.layers.push_back(LayerRouting::fusion({"m0"}, c1));
  fused.layers.push_back(LayerRouting::fusion({"m1"}, c1));

  ForwardTrace a = forward(st, tokens, single);
  ForwardTrace b = forward(st, tokens, fused);
  CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("identical member parameters with equal coefficients reproduce the member output") {
  FusedFixture fx(9, /*identical_modules=*/true);
  for (auto& layer : fx.routing.layers) layer.coefficients = Vector::Constant(2, 0.7);
  std::vector<int> tokens = {14, 15, 2, 16, 3, 15, 1};
  ForwardTrace fused = forward(fx.state, tokens, fx.routing);

  Routing single = Routing::single({"ma0", "ma1"});
  ForwardTrace one = forward(fx.state, tokens, single);
  CHECK((fused.logits - one.logits).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("fused layer output equals the hand-computed convex combination") {
  ModelState st = make_model(tiny_config(), 21);
  st.adapters["p"] = make_adapter("p", 0, st.config, 31);
  st.adapters["q"] = make_adapter("q", 0, st.config, 32);
  st.adapters["r1"] = make_adapter("r1", 1, st.config, 33);
  std::vector<int> tokens = {14, 15, 17, 2, 16, 3, 15, 1};

  // Member outputs at layer 0 are functions of the same slot input, so they
  // can be reproduced by single-module runs.
  Routing rp = Routing::single({"p", "r1"});
  Routing rq = Routing::single({"q", "r1"});
  ForwardTrace tp = forward(st, tokens, rp);
  ForwardTrace tq = forward(st, tokens, rq);

  Vector coeffs(2);
  coeffs << std::log(2.0), 0.0;  // weights 2/3, 1/3
  Routing fused;
  fused.layers.push_back(LayerRouting::fusion({"p", "q"}, coeffs));
  fused.layers.push_back(LayerRouting::single("r1"));
  ForwardTrace tf = forward(st, tokens, fused);

  Matrix expected = (2.0 / 3.0) * tp.fused_outputs[0] + (1.0 / 3.0) * tq.fused_outputs[0];
  CHECK((tf.fused_outputs[0] - expected).cwiseAbs().maxCoeff() <= tol::kFusionLinearity);

  // and the trace-level convexity identity on every layer
  for (size_t l = 0; l < tf.fused_outputs.size(); ++l) {
    if (tf.module_outputs[l].empty()) continue;
    Vector w = softmax_weights(fused.layers[l].fused ? fused.layers[l].coefficients
                                                     : Vector::Ones(1));
    Matrix combo = Matrix::Zero(tf.fused_outputs[l].rows(), tf.fused_outputs[l].cols());
    for (size_t s = 0; s < tf.module_outputs[l].size(); ++s) {
      combo += w[static_cast<Eigen::Index>(s)] * tf.module_outputs[l][s];
    }
    CHECK((tf.fused_outputs[l] - combo).cwiseAbs().maxCoeff() <= tol::kFusionLinearity);
  }
}

TEST_CASE("loss_task: uniform logits give L*ln(V), near-one-hot goes to zero") {
  ModelState st = make_model(tiny_config(), 3);
  const int vocab = st.config.resolved_vocab_size();
  st.backbone["out.w"].setZero();
  st.backbone["out.b"].setZero();
  Routing routing = Routing::identity(st.config.num_layers);

  EncodedSample s = encode_triple({14, 15}, {16}, {17, 18, 19}, -1);
  const int answer_len = 4;  // three answer tokens plus <eos>
  CHECK(loss_task(st, s, routing) ==
        doctest::Approx(answer_len * std::log(static_cast<double>(vocab))).epsilon(1e-12));

  // push all probability onto one token and make it the whole answer region
  EncodedSample rep = encode_triple({14}, {16}, {15, 15, 15}, -1);
  rep.tokens.pop_back();  // drop <eos> so every target is token 15
  ModelState hot = st;
  hot.backbone["out.b"](0, 15) = 60.0;
  CHECK(loss_task(hot, rep, routing) <= 1e-6);
}

TEST_CASE("loss_task matches an independent log-softmax recomputation") {
  ModelState st = make_model(tiny_config(), 11);
  st.adapters["m0"] = make_adapter("m0", 0, st.config, 41);
  st.adapters["m1"] = make_adapter("m1", 1, st.config, 42);
  Routing routing = Routing::single({"m0", "m1"});
  EncodedSample s = encode_triple({14, 15, 13}, {16, 12}, {17, 18}, -1);

  ForwardTrace trace = forward(st, s.tokens, routing);
  double expected = 0.0;
  for (int j = s.answer_start + 1; j < s.total_length(); ++j) {
    Eigen::RowVectorXd row = trace.logits.row(j - 1);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    expected += lse - row[s.tokens[j]];
  }
  CHECK(loss_task(st, s, routing) == doctest::Approx(expected).epsilon(1e-10));
  CHECK(loss_task(st, s, routing) >= 0.0);

  EncodedSample empty_answer = s;
  empty_answer.tokens.resize(empty_answer.answer_start + 1);
  CHECK_THROWS_AS(loss_task(st, empty_answer, routing), InvalidSample);
}

TEST_CASE("loss_data: ln(V) single-token case, oracle, and precondition") {
  ModelState st = make_model(tiny_config(), 13);
  st.backbone["out.w"].setZero();
  st.backbone["out.b"].setZero();
  Routing routing = Routing::identity(st.config.num_layers);
  const int vocab = st.config.resolved_vocab_size();

  EncodedSample one;
  one.tokens = {4, 14};  // G then a single body token
  CHECK(loss_data(st, one, routing) == doctest::Approx(std::log(static_cast<double>(vocab))));

  EncodedSample empty;
  empty.tokens = {4};
  CHECK_THROWS_AS(loss_data(st, empty, routing), InvalidSample);
  EncodedSample no_g = encode_triple({14}, {16}, {17}, -1);
  CHECK_THROWS_AS(loss_data(st, no_g, routing), InvalidSample);

  ModelState real = make_model(tiny_config(), 14);
  EncodedSample with_g = encode_triple({14, 15}, {16}, {17}, 5);
  ForwardTrace trace = forward(real, with_g.tokens, routing);
  double expected = 0.0;
  for (int j = 1; j < with_g.total_length(); ++j) {
    Eigen::RowVectorXd row = trace.logits.row(j - 1);
    const double mx = row.maxCoeff();
    expected += mx + std::log((row.array() - mx).exp().sum()) - row[with_g.tokens[j]];
  }
  CHECK(loss_data(real, with_g, routing) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("loss_train decomposes as task + mu * data") {
  ModelState st = make_model(tiny_config(), 15);
  st.adapters["m0"] = make_adapter("m0", 0, st.config, 51);
  st.adapters["m1"] = make_adapter("m1", 1, st.config, 52);
  Routing routing = Routing::single({"m0", "m1"});
  TrainingSample ts = make_training_sample_from_triple({14, 15}, {16}, {17, 13}, 6);

  const double lt = loss_task(st, ts.task_view, routing);
  const double ld = loss_data(st, ts.data_view, routing);
  CHECK(loss_train(st, ts, routing, 0.0) == lt);
  for (double mu : {0.25, 1.0, 2.5}) {
    CHECK(std::abs(loss_train(st, ts, routing, mu) - (lt + mu * ld)) <= tol::kLossDecomposition * (1.0 + lt + ld));
  }
  CHECK_THROWS_AS(loss_train(st, ts, routing, -0.1), InvalidInput);
}

TEST_CASE("analytic gradients match central finite differences (5 seeds)") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    FusedFixture fx(seed);
    auto batch = tiny_batch();
    GradCheckReport rep =
        gradient_check(fx.state, fx.routing, batch, LossSelector::train, 0.25, fx.trainable);
    CHECK(rep.worst_param_rel < tol::kGradCheckRel);
    CHECK(rep.worst_coef_rel < tol::kGradCheckRel);
  }
}

TEST_CASE("backbone parameter gradients are also exact (pretraining path)") {
  FusedFixture fx(17);
  TrainableSet trainable;
  trainable.params = {"emb.tok",      "layer0.attn.wq", "layer0.ffn.w1", "layer1.ln2.g",
                      "layer0.ln1.b", "lnf.g",          "out.b"};
  auto batch = tiny_batch();
  GradCheckReport rep =
      gradient_check(fx.state, fx.routing, batch, LossSelector::task, 0.0, trainable);
  CHECK(rep.worst_param_rel < tol::kGradCheckRel);
}

TEST_CASE("gradient store respects the trainable mask") {
  FusedFixture fx(23);
  TrainableSet only_one;
  for (const auto& n : adapter_param_names("ma0")) only_one.params.insert(n);
  auto batch = tiny_batch();
  GradientStore g = gradients(fx.state, batch, fx.routing, LossSelector::train, 0.25, only_one);
  CHECK(g.params.size() == 4);
  for (const auto& [name, m] : g.params) CHECK(only_one.params.count(name) == 1);
  for (const auto& c : g.coefficients) CHECK(c.size() == 0);
}

TEST_CASE("singleton fusion coefficient has exactly zero gradient") {
  ModelState st = make_model(tiny_config(), 29);
  st.adapters["m0"] = make_adapter("m0", 0, st.config, 61);
  st.adapters["m1"] = make_adapter("m1", 1, st.config, 62);
  Routing routing;
  Vector c(1);
  c << 1.0;
  routing.layers.push_back(LayerRouting::fusion({"m0"}, c));
  routing.layers.push_back(LayerRouting::fusion({"m1"}, c));
  TrainableSet t;
  t.coefficients = true;
  auto batch = tiny_batch();
  GradientStore g = gradients(st, batch, routing, LossSelector::task, 0.0, t);
  for (const auto& cg : g.coefficients) {
    if (cg.size() > 0) CHECK(cg.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("causality: logits before p ignore tokens after p") {
  FusedFixture fx(31);
  std::vector<int> a = {14, 15, 16, 17, 18, 19};
  std::vector<int> b = {14, 15, 16, 12, 13, 15};
  ForwardTrace ta = forward(fx.state, a, fx.routing);
  ForwardTrace tb = forward(fx.state, b, fx.routing);
  CHECK((ta.logits.topRows(3) - tb.logits.topRows(3)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("last_token_representation handles padding") {
  FusedFixture fx(37);
  std::vector<int> plain = {14, 15, 16};
  std::vector<int> padded = {14, 15, 16, 0, 0, 0};
  ForwardTrace tp = forward(fx.state, plain, fx.routing);
  ForwardTrace tq = forward(fx.state, padded, fx.routing);
  Vector a = last_token_representation(tp, plain);
  Vector b = last_token_representation(tq, padded);
  CHECK((a - tp.final_representations.row(2).transpose()).norm() == 0.0);
  CHECK((b - tq.final_representations.row(2).transpose()).norm() == 0.0);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-9);

  std::vector<int> all_pad = {0, 0};
  ForwardTrace tr = forward(fx.state, all_pad, fx.routing);
  CHECK_THROWS_AS(last_token_representation(tr, all_pad), InvalidInput);
}

TEST_CASE("forward rejects unknown modules and bad tokens") {
  ModelState st = make_model(tiny_config(), 41);
  Routing bad = Routing::single({"nope", "nope"});
  CHECK_THROWS_AS(forward(st, {14, 15}, bad), RoutingError);
  Routing ok = Routing::identity(st.config.num_layers);
  CHECK_THROWS_AS(forward(st, {14, 99}, ok), InvalidInput);
}

TEST_CASE("generate: determinism, zero budget, seeds") {
  FusedFixture fx(43);
  DecodeConfig greedy;
  greedy.max_new_tokens = 5;
  std::vector<int> prefix = {14, 15, 2, 16, 3};
  auto g1 = generate(fx.state, prefix, fx.routing, greedy);
  auto g2 = generate(fx.state, prefix, fx.routing, greedy);
  CHECK(g1 == g2);

  DecodeConfig none = greedy;
  none.max_new_tokens = 0;
  CHECK(generate(fx.state, prefix, fx.routing, none).empty());

  DecodeConfig sampled;
  sampled.max_new_tokens = 6;
  sampled.top_k = 5;
  sampled.seed = 99;
  auto s1 = generate(fx.state, prefix, fx.routing, sampled);
  auto s2 = generate(fx.state, prefix, fx.routing, sampled);
  CHECK(s1 == s2);
}

TEST_CASE("model construction is deterministic; steps=0 pretrain is valid") {
  BackboneConfig cfg = tiny_config();
  ModelState a = make_model(cfg, 7);
  ModelState b = make_model(cfg, 7);
  CHECK(a.backbone_checksum() == b.backbone_checksum());

  PretrainCorpus corpus = make_pretrain_corpus(1, 50, 5);
  BackboneConfig full;  // default width-64 backbone
  ModelState frozen = pretrain_backbone(full, corpus, 0, 3);
  CHECK(frozen.adapters.empty());
  Routing routing = Routing::identity(full.num_layers);
  CHECK_NOTHROW(forward(frozen, corpus.train[0].tokens, routing));
}

TEST_CASE("short pretraining runs are bit-identical across invocations") {
  PretrainCorpus corpus = make_pretrain_corpus(2, 120, 5);
  BackboneConfig cfg = tiny_config();
  cfg.vocab_size = 0;  // full shared vocabulary; corpus tokens exceed 20
  ModelState a = pretrain_backbone(cfg, corpus, 12, 5);
  ModelState b = pretrain_backbone(cfg, corpus, 12, 5);
  CHECK(a.backbone_checksum() == b.backbone_checksum());
}

TEST_CASE("checkpoint round trip and version guard") {
  FusedFixture fx(47);
  namespace fs = std::filesystem;
  fs::create_directories("test_cache");
  const std::string path = "test_cache/roundtrip.ckpt";
  save_checkpoint(fx.state, path);
  ModelState loaded = load_checkpoint(path);
  CHECK(loaded.backbone_checksum() == fx.state.backbone_checksum());
  CHECK(loaded.adapters.size() == fx.state.adapters.size());
  for (const auto& [id, mod] : fx.state.adapters) {
    CHECK(checksum(loaded.adapters.at(id).down_w) == checksum(mod.down_w));
    CHECK(loaded.adapters.at(id).layer_index == mod.layer_index);
  }
  std::vector<int> tokens = {14, 15, 2, 16, 3, 15, 1};
  CHECK((forward(loaded, tokens, fx.routing).logits -
         forward(fx.state, tokens, fx.routing).logits)
            .cwiseAbs()
            .maxCoeff() == 0.0);

  // corrupt the magic
  {
    std::ofstream os(path, std::ios::binary);
    os.write("NOPE", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("pretrained backbone copies held-out text with >90% token accuracy" *
          doctest::timeout(600)) {
  ModelState st = cached_pretrained_backbone(1);
  PretrainCorpus corpus = make_pretrain_corpus(1);
  Routing routing = Routing::identity(st.config.num_layers);
  const double acc = answer_token_accuracy(st, corpus.heldout_copy, routing);
  MESSAGE("held-out copy token accuracy: ", acc);
  CHECK(acc > 0.9);

  // trained-copy generation oracle
  const auto& vocab = Vocabulary::shared();
  std::vector<int> xy = {vocab.id("a"), vocab.id("b")};
  EncodedSample probe = encode_triple(xy, vocab.ids({"repeat", "the", "text"}), xy, -1);
  std::vector<int> prefix(probe.tokens.begin(), probe.tokens.begin() + probe.answer_start + 1);
  DecodeConfig greedy;
  auto out = generate(st, prefix, routing, greedy);
  CHECK(out == xy);
}
