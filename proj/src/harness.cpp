#include "dmea/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace dmea {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Methods

const std::vector<std::string>& MethodSpec::known_methods() {
  static const std::vector<std::string> names = {
      "dmea",         "dmea-no-transfer", "dmea-no-scaling",   "dmea-no-init",
      "seq-finetune", "per-task-adapters", "adapter-replay"};
  return names;
}

MethodSpec MethodSpec::parse(const std::string& name) {
  MethodSpec m;
  m.name = name;
  if (name == "dmea") return m;
  if (name == "dmea-no-transfer") {
    m.transfer = false;
    return m;
  }
  if (name == "dmea-no-scaling") {
    m.scaling = false;
    return m;
  }
  if (name == "dmea-no-init") {
    m.dynamic_init = false;
    return m;
  }
  if (name == "seq-finetune") {
    m.expansion = ExpansionMode::shared_modules;
    m.transfer = m.scaling = m.dynamic_init = m.replay = false;
    return m;
  }
  if (name == "per-task-adapters") {
    m.expansion = ExpansionMode::per_task;
    m.transfer = m.scaling = m.dynamic_init = m.replay = false;
    return m;
  }
  if (name == "adapter-replay") {
    m.expansion = ExpansionMode::shared_modules;
    m.transfer = m.scaling = m.dynamic_init = false;
    m.replay = true;
    return m;
  }
  throw InvalidInput("unknown method '" + name + "'");
}

// ---------------------------------------------------------------------------
// Config

void HarnessConfig::validate() const {
  if (pretrain_steps < 0 || pretrain_corpus_size < 1) {
    throw InvalidInput("HarnessConfig: pretraining sizes out of range");
  }
}

void Config::validate() const {
  backbone.validate();
  expansion.validate();
  selection.validate();
  adaptation.validate();
  taskgen.validate();
  harness.validate();
}

namespace {

void check_keys(const json& section, const std::string& name,
                const std::vector<std::string>& allowed) {
  for (const auto& [key, value] : section.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw InvalidInput("config: unknown key '" + key + "' in section '" + name + "'");
    }
  }
}

template <typename T>
void maybe(const json& section, const std::string& key, T& out) {
  if (section.contains(key)) out = section.at(key).get<T>();
}

}  // namespace

Config config_from_json(const std::string& text) {
  json root = json::parse(text);
  check_keys(root, "<root>",
             {"backbone", "expansion", "selection", "adaptation", "taskgen", "harness"});
  Config c;
  if (root.contains("backbone")) {
    const json& s = root["backbone"];
    check_keys(s, "backbone",
               {"num_layers", "hidden_width", "num_heads", "ffn_width", "vocab_size",
                "max_sequence_length", "adapter_bottleneck"});
    maybe(s, "num_layers", c.backbone.num_layers);
    maybe(s, "hidden_width", c.backbone.hidden_width);
    maybe(s, "num_heads", c.backbone.num_heads);
    maybe(s, "ffn_width", c.backbone.ffn_width);
    maybe(s, "vocab_size", c.backbone.vocab_size);
    maybe(s, "max_sequence_length", c.backbone.max_sequence_length);
    maybe(s, "adapter_bottleneck", c.backbone.adapter_bottleneck);
  }
  if (root.contains("expansion")) {
    const json& s = root["expansion"];
    check_keys(s, "expansion", {"epochs", "learning_rate", "batch_size"});
    maybe(s, "epochs", c.expansion.epochs);
    maybe(s, "learning_rate", c.expansion.learning_rate);
    maybe(s, "batch_size", c.expansion.batch_size);
  }
  if (root.contains("selection")) {
    const json& s = root["selection"];
    check_keys(s, "selection", {"n", "epsilon", "K", "spectral_norm"});
    maybe(s, "n", c.selection.n);
    maybe(s, "epsilon", c.selection.epsilon);
    maybe(s, "K", c.selection.top_k);
    maybe(s, "spectral_norm", c.selection.spectral_norm);
  }
  if (root.contains("adaptation")) {
    const json& s = root["adaptation"];
    check_keys(s, "adaptation",
               {"epochs", "learning_rate", "batch_size", "mu", "pseudo_ratio", "q"});
    maybe(s, "epochs", c.adaptation.epochs);
    maybe(s, "learning_rate", c.adaptation.learning_rate);
    maybe(s, "batch_size", c.adaptation.batch_size);
    maybe(s, "mu", c.adaptation.mu);
    maybe(s, "pseudo_ratio", c.adaptation.pseudo_ratio);
    maybe(s, "q", c.adaptation.q);
  }
  if (root.contains("taskgen")) {
    const json& s = root["taskgen"];
    check_keys(s, "taskgen", {"train_size", "valid_size", "test_size", "suite_seed"});
    maybe(s, "train_size", c.taskgen.train_size);
    maybe(s, "valid_size", c.taskgen.valid_size);
    maybe(s, "test_size", c.taskgen.test_size);
    maybe(s, "suite_seed", c.taskgen.suite_seed);
  }
  if (root.contains("harness")) {
    const json& s = root["harness"];
    check_keys(s, "harness", {"pretrain_steps", "pretrain_corpus_size", "backbone_cache"});
    maybe(s, "pretrain_steps", c.harness.pretrain_steps);
    maybe(s, "pretrain_corpus_size", c.harness.pretrain_corpus_size);
    maybe(s, "backbone_cache", c.harness.backbone_cache);
  }
  c.validate();
  return c;
}

std::string config_to_json(const Config& c) {
  json root;
  root["backbone"] = {{"num_layers", c.backbone.num_layers},
                      {"hidden_width", c.backbone.hidden_width},
                      {"num_heads", c.backbone.num_heads},
                      {"ffn_width", c.backbone.ffn_width},
                      {"vocab_size", c.backbone.vocab_size},
                      {"max_sequence_length", c.backbone.max_sequence_length},
                      {"adapter_bottleneck", c.backbone.adapter_bottleneck}};
  root["expansion"] = {{"epochs", c.expansion.epochs},
                       {"learning_rate", c.expansion.learning_rate},
                       {"batch_size", c.expansion.batch_size}};
  root["selection"] = {{"n", c.selection.n},
                       {"epsilon", c.selection.epsilon},
                       {"K", c.selection.top_k},
                       {"spectral_norm", c.selection.spectral_norm}};
  root["adaptation"] = {{"epochs", c.adaptation.epochs},
                        {"learning_rate", c.adaptation.learning_rate},
                        {"batch_size", c.adaptation.batch_size},
                        {"mu", c.adaptation.mu},
                        {"pseudo_ratio", c.adaptation.pseudo_ratio},
                        {"q", c.adaptation.q}};
  root["taskgen"] = {{"train_size", c.taskgen.train_size},
                     {"valid_size", c.taskgen.valid_size},
                     {"test_size", c.taskgen.test_size},
                     {"suite_seed", c.taskgen.suite_seed}};
  root["harness"] = {{"pretrain_steps", c.harness.pretrain_steps},
                     {"pretrain_corpus_size", c.harness.pretrain_corpus_size},
                     {"backbone_cache", c.harness.backbone_cache}};
  return root.dump(2);
}

Config load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Metrics

double average_score(const std::vector<double>& final_row) {
  if (final_row.empty()) throw InvalidInput("average_score: empty row");
  return std::accumulate(final_row.begin(), final_row.end(), 0.0) /
         static_cast<double>(final_row.size());
}

double fkt(const ResultsMatrix& results, int t) {
  if (t < 2) throw InvalidInput("fkt: step must be >= 2");
  if (t > static_cast<int>(results.scores.size())) throw InvalidInput("fkt: step beyond matrix");
  if (results.standalone.size() != results.task_order.size()) {
    throw InvalidState("fkt: standalone scores unavailable");
  }
  double sum = 0.0;
  for (int i = 1; i < t; ++i) sum += results.scores[i][i] - results.standalone[i];
  return sum / static_cast<double>(t - 1);
}

double exact_match_score(const std::vector<std::vector<int>>& outputs,
                         const std::vector<std::vector<int>>& references) {
  if (outputs.size() != references.size() || outputs.empty()) {
    throw InvalidInput("exact_match_score: size mismatch or empty");
  }
  int hits = 0;
  for (size_t i = 0; i < outputs.size(); ++i) hits += (outputs[i] == references[i]);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(outputs.size());
}

EvalResult evaluate_detailed(const ModelState& state, const ModulePool& pool,
                             const TaskSpec& task) {
  if (!pool.has_routing(task.task_id)) {
    throw InvalidState("evaluate: no routing registered for " + task.task_id);
  }
  const Routing routing = pool.task_inference_routing(task.task_id);
  DecodeConfig greedy;
  greedy.max_new_tokens = 16;

  std::vector<std::vector<int>> outputs, references;
  std::vector<EncodedSample> encoded;
  for (const Sample& s : task.test) {
    EncodedSample e = encode(s, task, false);
    std::vector<int> prefix(e.tokens.begin(), e.tokens.begin() + e.answer_start + 1);
    outputs.push_back(generate(state, prefix, routing, greedy));
    references.push_back(s.y);
    encoded.push_back(std::move(e));
  }
  EvalResult r;
  r.exact_match = exact_match_score(outputs, references);
  r.token_accuracy = 100.0 * answer_token_accuracy(state, encoded, routing);
  return r;
}

double evaluate(const ModelState& state, const ModulePool& pool, const TaskSpec& task) {
  return evaluate_detailed(state, pool, task).exact_match;
}

std::vector<int> order_permutation(int order_index, int num_tasks) {
  if (order_index < 0) throw InvalidInput("order_permutation: negative index");
  std::vector<int> order(num_tasks);
  std::iota(order.begin(), order.end(), 0);
  if (order_index > 0) {
    Rng rng(Rng::derive_seed(0xDA7A0BDEULL, {static_cast<std::uint64_t>(order_index)}));
    rng.shuffle(order);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Backbone acquisition

ModelState acquire_backbone(const Config& config, std::uint64_t seed) {
  const auto make = [&] {
    PretrainCorpus corpus =
        make_pretrain_corpus(seed, config.harness.pretrain_corpus_size,
                             std::max(50, config.harness.pretrain_corpus_size / 20));
    return pretrain_backbone(config.backbone, corpus, config.harness.pretrain_steps, seed);
  };
  if (config.harness.backbone_cache.empty()) return make();

  const BackboneConfig& b = config.backbone;
  const std::uint64_t key = Rng::derive_seed(
      seed, {static_cast<std::uint64_t>(config.harness.pretrain_steps),
             static_cast<std::uint64_t>(config.harness.pretrain_corpus_size),
             static_cast<std::uint64_t>(b.num_layers), static_cast<std::uint64_t>(b.hidden_width),
             static_cast<std::uint64_t>(b.num_heads), static_cast<std::uint64_t>(b.ffn_width),
             static_cast<std::uint64_t>(b.resolved_vocab_size()),
             static_cast<std::uint64_t>(b.max_sequence_length)});
  fs::create_directories(config.harness.backbone_cache);
  const fs::path path = fs::path(config.harness.backbone_cache) /
                        ("backbone_" + std::to_string(key) + ".ckpt");
  if (fs::exists(path)) return load_checkpoint(path.string());
  ModelState st = make();
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." +
                       std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  save_checkpoint(st, tmp.string());
  fs::rename(tmp, path);
  return st;
}

// ---------------------------------------------------------------------------
// Lifelong run

namespace {

constexpr std::uint64_t kExpansionSalt = 0x45585041;
constexpr std::uint64_t kSelectionSalt = 0x53454C45;
constexpr std::uint64_t kAdaptSalt = 0x41444150;
constexpr std::uint64_t kPseudoSalt = 0x50534555;
constexpr std::uint64_t kModuleSalt = 0x4D4F4455;

// Fresh permanent modules in every layer, seeded by (run seed, task id, layer)
// so isolated and lifelong trainings coincide.
std::vector<std::string> insert_fresh_modules(ModelState& state, ModulePool& pool,
                                              const std::string& task_id, std::uint64_t seed) {
  std::vector<std::string> ids;
  const std::uint64_t task_salt = Rng::hash_string(task_id);
  for (int l = 0; l < pool.num_layers(); ++l) {
    const std::string id = pool.insert_temp_module(
        state, l, Rng::derive_seed(seed, {kModuleSalt, task_salt, static_cast<std::uint64_t>(l)}));
    pool.promote(id);
    ids.push_back(id);
  }
  return ids;
}

AdaptationResult adapt_task(ModelState& state, ModulePool& pool, const TaskSpec& task,
                            const std::vector<std::string>& similar,
                            const std::map<std::string, std::vector<TrainingSample>>& pseudo,
                            const Config& config, std::uint64_t seed, bool scaling) {
  AdaptationConfig ac = config.adaptation;
  ac.seed = Rng::derive_seed(seed, {kAdaptSalt});
  return run_adaptation(state, pool, task, similar, pseudo, ac, scaling);
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::string adaptation_log_csv(const std::vector<AdaptationEpochLog>& log) {
  std::vector<std::string> replayed;
  for (const auto& row : log) {
    for (const auto& [id, loss] : row.replay_loss) {
      if (std::find(replayed.begin(), replayed.end(), id) == replayed.end()) replayed.push_back(id);
    }
  }
  std::ostringstream os;
  os << "epoch,new_task_loss";
  for (const auto& id : replayed) {
    os << ",loss_" << id << ",eta_" << id << ",g_new_" << id << ",g_old_" << id;
  }
  os << "\n";
  os.precision(12);
  for (const auto& row : log) {
    os << row.epoch << "," << row.new_task_loss;
    for (const auto& id : replayed) {
      if (row.replay_loss.count(id)) {
        const auto& sc = row.scale.at(id);
        os << "," << row.replay_loss.at(id) << "," << sc.eta << "," << sc.g_new_norm << ","
           << sc.g_old_norm;
      } else {
        os << ",,,,";
      }
    }
    os << "\n";
  }
  return os.str();
}

void write_suite_data(const std::vector<TaskSpec>& suite, const std::vector<int>& order,
                      const std::string& suite_name, std::uint64_t seed, const fs::path& dir) {
  const Vocabulary& v = Vocabulary::shared();
  fs::create_directories(dir / "data");
  for (const TaskSpec& t : suite) {
    std::ofstream os(dir / "data" / (t.task_id + ".jsonl"));
    auto dump_split = [&](const std::vector<Sample>& split, const char* name) {
      for (const Sample& s : split) {
        json row = {{"task", t.task_id},
                    {"x", v.render(s.x)},
                    {"q", v.render(t.instruction)},
                    {"y", v.render(s.y)},
                    {"split", name}};
        os << row.dump() << "\n";
      }
    };
    dump_split(t.train, "train");
    dump_split(t.valid, "valid");
    dump_split(t.test, "test");
  }
  json tasks = json::array();
  for (size_t i = 0; i < suite.size(); ++i) {
    tasks.push_back({{"id", suite[i].task_id},
                     {"family", family_name(suite[i].family)},
                     {"generation_token", suite[i].generation_token},
                     {"train", suite[i].train.size()},
                     {"valid", suite[i].valid.size()},
                     {"test", suite[i].test.size()}});
  }
  json manifest = {{"suite", suite_name}, {"seed", seed}, {"tasks", tasks}, {"order", order}};
  write_text(dir / "suite_manifest.json", manifest.dump(2) + "\n");
}

}  // namespace

ResultsMatrix run_lifelong(const std::vector<TaskSpec>& suite, const std::vector<int>& order,
                           const MethodSpec& method, std::uint64_t seed, const Config& config,
                           const RunOptions& opts) {
  config.validate();
  if (order.size() != suite.size()) {
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    throw InvalidInput("run_lifelong: order must permute the suite");
  }
  {
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != static_cast<int>(i)) {
        throw InvalidInput("run_lifelong: order must permute the suite");
      }
    }
  }

  ModelState state = opts.pretrained ? *opts.pretrained : acquire_backbone(config, seed);
  ModulePool pool(config.backbone.num_layers);
  BasisStore bases;
  FrequencyStore frequencies;
  RunArtifacts local_artifacts;
  RunArtifacts* artifacts = opts.artifacts ? opts.artifacts : &local_artifacts;

  ResultsMatrix results;
  std::string first_task_id;

  for (size_t step = 0; step < order.size(); ++step) {
    const TaskSpec& task = suite[order[step]];
    results.task_order.push_back(task.task_id);
    frequencies[task.task_id] = word_frequency(task);

    std::vector<std::string> selected;
    switch (method.expansion) {
      case MethodSpec::ExpansionMode::dynamic_search: {
        ExpansionConfig ec = config.expansion;
        ec.seed = Rng::derive_seed(seed, {kExpansionSalt});
        ExpansionTrace trace;
        selected = run_expansion(state, pool, task, frequencies, ec, config.adaptation.mu,
                                 method.dynamic_init, &trace);
        artifacts->expansion_traces.push_back(std::move(trace));
        break;
      }
      case MethodSpec::ExpansionMode::per_task:
        selected = insert_fresh_modules(state, pool, task.task_id, seed);
        break;
      case MethodSpec::ExpansionMode::shared_modules:
        if (step == 0) {
          selected = insert_fresh_modules(state, pool, task.task_id, seed);
          first_task_id = task.task_id;
        } else {
          selected = pool.routing_of(first_task_id);
        }
        break;
    }
    pool.register_routing(task.task_id, selected);
    artifacts->routing_table[task.task_id] = selected;

    std::vector<std::string> similar;
    if (method.uses_selection_stage()) {
      SelectionConfig sc = config.selection;
      sc.seed = Rng::derive_seed(seed, {kSelectionSalt});
      SubspaceBasis basis = compute_subspace(state, pool, task, sc);
      if (!bases.all().empty()) {
        for (const auto& old : bases.all()) {
          artifacts->similarity.emplace_back(task.task_id, old.task_id,
                                             subspace_similarity(basis, old, sc.spectral_norm));
        }
        if (method.transfer) {
          similar = top_k_similar(bases.all(), basis, sc.top_k, sc.spectral_norm);
        }
      }
      bases.add(std::move(basis));
    }

    std::map<std::string, std::vector<TrainingSample>> pseudo_store;
    if (method.replay && config.adaptation.pseudo_ratio > 0.0 && step > 0) {
      const std::set<std::string> replay_set = replayed_tasks(pool, task.task_id, selected);
      std::vector<const TaskSpec*> origins;
      for (const auto& learned : pool.tasks()) {
        if (learned == task.task_id || !replay_set.count(learned)) continue;
        for (const TaskSpec& t : suite) {
          if (t.task_id == learned) origins.push_back(&t);
        }
      }
      const int count_total = static_cast<int>(
          std::lround(config.adaptation.pseudo_ratio * static_cast<double>(task.train.size())));
      if (!origins.empty() && count_total > 0) {
        DecodeConfig dc;
        dc.top_k = 20;
        dc.temperature = 1.0;
        dc.max_new_tokens = config.backbone.max_sequence_length;
        PseudoGenStats stats;
        std::vector<PseudoSample> pseudo = generate_pseudo(
            state, pool, origins, count_total, dc,
            Rng::derive_seed(seed, {kPseudoSalt, Rng::hash_string(task.task_id)}), &stats);
        artifacts->pseudo_stats[task.task_id] = stats;
        for (const PseudoSample& ps : pseudo) {
          int gen_token = -1;
          for (const TaskSpec* o : origins) {
            if (o->task_id == ps.origin_task_id) gen_token = o->generation_token;
          }
          try {
            pseudo_store[ps.origin_task_id].push_back(
                make_training_sample_from_triple(ps.x, ps.q, ps.y, gen_token));
          } catch (const InvalidSample&) {
            // over-length or degenerate regeneration; drop it
          }
        }
      }
    }

    AdaptationResult adapted =
        adapt_task(state, pool, task, similar, pseudo_store, config, seed, method.scaling);
    pool.save_inference_directive(task.task_id, adapted.alpha);
    artifacts->adaptation_logs[task.task_id] = std::move(adapted.log);
    pool.verify_owner_consistency();

    std::vector<double> row_scores, row_acc;
    for (size_t j = 0; j <= step; ++j) {
      EvalResult r = evaluate_detailed(state, pool, suite[order[j]]);
      row_scores.push_back(r.exact_match);
      row_acc.push_back(r.token_accuracy);
    }
    results.scores.push_back(std::move(row_scores));
    results.token_acc.push_back(std::move(row_acc));
  }

  if (opts.standalone) {
    if (opts.standalone->size() != suite.size()) {
      throw InvalidInput("run_lifelong: standalone scores must align with the suite");
    }
    for (size_t i = 0; i < order.size(); ++i) {
      results.standalone.push_back((*opts.standalone)[order[i]]);
    }
  }

  if (!opts.out_dir.empty()) {
    const fs::path dir(opts.out_dir);
    fs::create_directories(dir / "traces");
    write_results_csv(results, (dir / "results.csv").string());
    write_suite_data(suite, order, opts.suite_name, seed, dir);

    for (const auto& trace : artifacts->expansion_traces) {
      write_text(dir / "traces" / ("expansion_" + trace.task_id + ".json"),
                 trace.to_json() + "\n");
    }
    for (const auto& [task_id, log] : artifacts->adaptation_logs) {
      write_text(dir / "traces" / ("adaptation_" + task_id + ".csv"), adaptation_log_csv(log));
    }
    {
      std::ostringstream os;
      os.precision(12);
      os << "new_task,previous_task,q\n";
      for (const auto& [a, b, q] : artifacts->similarity) {
        os << a << "," << b << "," << q << "\n";
      }
      write_text(dir / "traces" / "similarity.csv", os.str());
    }
    write_text(dir / "traces" / "routing.json", pool.routing_table_json() + "\n");
    if (method.uses_selection_stage()) bases.save((dir / "basis_store").string());

    json meta;
    meta["method"] = method.name;
    meta["suite"] = opts.suite_name;
    meta["seed"] = seed;
    meta["order"] = order;
    meta["task_order"] = results.task_order;
    meta["final_average"] = average_score(results.scores.back());
    json scores = json::array();
    for (const auto& row : results.scores) scores.push_back(row);
    meta["scores"] = scores;
    json acc = json::array();
    for (const auto& row : results.token_acc) acc.push_back(row);
    meta["token_accuracy"] = acc;
    if (!results.standalone.empty()) {
      meta["standalone"] = results.standalone;
      json fkt_steps = json::array();
      for (int t = 2; t <= static_cast<int>(results.scores.size()); ++t) {
        fkt_steps.push_back(fkt(results, t));
      }
      meta["fkt_per_step"] = fkt_steps;
    }
    if (method.uses_selection_stage()) {
      int reused = 0, total = 0;
      for (const auto& trace : artifacts->expansion_traces) {
        for (const auto& l : trace.layers) {
          if (l.members.size() > 1) {  // first task has no reuse choice
            ++total;
            reused += l.reused;
          }
        }
      }
      if (total > 0) {
        meta["reuse_rate"] = static_cast<double>(reused) / static_cast<double>(total);
      }
    }
    write_text(dir / "run_meta.json", meta.dump(2) + "\n");
  }
  return results;
}

std::vector<double> standalone_scores(const std::vector<TaskSpec>& suite, std::uint64_t seed,
                                      const Config& config, const ModelState* pretrained) {
  config.validate();
  ModelState base = pretrained ? *pretrained : acquire_backbone(config, seed);
  std::vector<double> scores;
  for (const TaskSpec& task : suite) {
    ModelState state = base;
    ModulePool pool(config.backbone.num_layers);
    const std::vector<std::string> ids = insert_fresh_modules(state, pool, task.task_id, seed);
    pool.register_routing(task.task_id, ids);
    AdaptationResult adapted = adapt_task(state, pool, task, {}, {}, config, seed, false);
    pool.save_inference_directive(task.task_id, adapted.alpha);
    scores.push_back(evaluate(state, pool, task));
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Files

void write_results_csv(const ResultsMatrix& results, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os.precision(12);
  os << "step,task_index,task_id,exact_match,token_accuracy\n";
  for (size_t i = 0; i < results.scores.size(); ++i) {
    for (size_t j = 0; j <= i; ++j) {
      os << (i + 1) << "," << (j + 1) << "," << results.task_order[j] << ","
         << results.scores[i][j] << "," << results.token_acc[i][j] << "\n";
    }
  }
}

ResultsMatrix read_results_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);  // header
  ResultsMatrix out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw IoError("results csv: malformed row '" + line + "'");
    const size_t i = std::stoul(fields[0]) - 1;
    const size_t j = std::stoul(fields[1]) - 1;
    if (out.scores.size() <= i) {
      out.scores.resize(i + 1);
      out.token_acc.resize(i + 1);
    }
    if (out.scores[i].size() <= j) {
      out.scores[i].resize(j + 1);
      out.token_acc[i].resize(j + 1);
    }
    out.scores[i][j] = std::stod(fields[3]);
    out.token_acc[i][j] = std::stod(fields[4]);
    if (j >= out.task_order.size()) out.task_order.resize(j + 1);
    out.task_order[j] = fields[2];
  }
  return out;
}

void write_standalone_file(const std::string& suite_name, std::uint64_t seed,
                           const std::vector<TaskSpec>& suite, const std::vector<double>& scores,
                           const std::string& out_dir) {
  fs::create_directories(out_dir);
  json tasks = json::array();
  for (size_t i = 0; i < suite.size(); ++i) {
    tasks.push_back({{"id", suite[i].task_id}, {"score", scores[i]}});
  }
  json root = {{"suite", suite_name}, {"seed", seed}, {"tasks", tasks}};
  write_text(fs::path(out_dir) / "standalone.json", root.dump(2) + "\n");
  std::ostringstream os;
  os.precision(12);
  os << "task_id,score\n";
  for (size_t i = 0; i < suite.size(); ++i) {
    os << suite[i].task_id << "," << scores[i] << "\n";
  }
  write_text(fs::path(out_dir) / "standalone.csv", os.str());
}

// ---------------------------------------------------------------------------
// Report

namespace {

struct RunRecord {
  json meta;
};

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

std::string svg_plot(const std::map<std::string, std::vector<double>>& per_method_curves) {
  const int width = 640, height = 420, margin = 60;
  const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                           "#9467bd", "#8c564b", "#e377c2"};
  size_t max_len = 1;
  for (const auto& [name, c] : per_method_curves) max_len = std::max(max_len, c.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - 20
     << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << margin
     << "\" y2=\"20\" stroke=\"black\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 15
     << "\" text-anchor=\"middle\" font-size=\"13\">task step</text>\n";
  os << "<text x=\"18\" y=\"" << height / 2
     << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 " << height / 2
     << ")\">average exact match</text>\n";
  auto xpos = [&](size_t i) {
    return margin + static_cast<double>(i) * (width - margin - 30) /
                        static_cast<double>(std::max<size_t>(1, max_len - 1));
  };
  auto ypos = [&](double score) {
    return (height - margin) - score / 100.0 * (height - margin - 30);
  };
  for (int g = 0; g <= 100; g += 20) {
    os << "<text x=\"" << margin - 8 << "\" y=\"" << ypos(g) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << g << "</text>\n";
  }
  int color = 0, legend_y = 30;
  for (const auto& [name, curve] : per_method_curves) {
    const char* stroke = palette[color % 7];
    os << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < curve.size(); ++i) {
      os << xpos(i) << "," << ypos(curve[i]) << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << width - 170 << "\" y=\"" << legend_y << "\" font-size=\"12\" fill=\""
       << stroke << "\">" << name << "</text>\n";
    legend_y += 16;
    ++color;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

void report(const std::string& in_dir, const std::string& out_dir) {
  if (!fs::exists(in_dir)) throw IoError("report: input directory missing: " + in_dir);
  std::vector<json> runs;
  std::map<std::pair<std::string, std::uint64_t>, json> standalone;  // (suite, seed)
  for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    std::ifstream is(entry.path());
    if (name == "run_meta.json") {
      runs.push_back(json::parse(is));
    } else if (name == "standalone.json") {
      json s = json::parse(is);
      standalone[{s.at("suite").get<std::string>(), s.at("seed").get<std::uint64_t>()}] = s;
    }
  }
  if (runs.empty()) throw IoError("report: no finished runs under " + in_dir);

  // group runs by (suite, method)
  std::map<std::string, std::map<std::string, std::vector<json>>> by_suite_method;
  for (const auto& run : runs) {
    by_suite_method[run.at("suite").get<std::string>()][run.at("method").get<std::string>()]
        .push_back(run);
  }

  json summary;
  summary["suites"] = json::object();
  for (const auto& [suite_name, methods] : by_suite_method) {
    json methods_json = json::object();
    std::map<std::string, std::vector<double>> curves;
    for (const auto& [method, method_runs] : methods) {
      std::vector<double> final_avgs;
      std::vector<std::vector<double>> per_step;  // avg score after each step, per run
      std::vector<std::vector<double>> fkts;
      std::vector<double> reuse;
      for (const json& run : method_runs) {
        const auto scores = run.at("scores").get<std::vector<std::vector<double>>>();
        std::vector<double> steps;
        for (const auto& row : scores) steps.push_back(average_score(row));
        per_step.push_back(steps);
        final_avgs.push_back(steps.back());
        if (run.contains("reuse_rate")) reuse.push_back(run.at("reuse_rate").get<double>());

        json meta_fkt;
        if (run.contains("fkt_per_step")) {
          fkts.push_back(run.at("fkt_per_step").get<std::vector<double>>());
        } else {
          auto key = std::make_pair(run.at("suite").get<std::string>(),
                                    run.at("seed").get<std::uint64_t>());
          auto it = standalone.find(key);
          if (it != standalone.end()) {
            // join the standalone file with the run's task order
            std::map<std::string, double> d_bar;
            for (const auto& t : it->second.at("tasks")) {
              d_bar[t.at("id").get<std::string>()] = t.at("score").get<double>();
            }
            const auto order = run.at("task_order").get<std::vector<std::string>>();
            bool complete = true;
            for (const auto& id : order) complete = complete && d_bar.count(id);
            if (complete) {
              std::vector<double> fkt_steps;
              for (size_t t = 2; t <= scores.size(); ++t) {
                double sum = 0.0;
                for (size_t i = 1; i < t; ++i) sum += scores[i][i] - d_bar.at(order[i]);
                fkt_steps.push_back(sum / static_cast<double>(t - 1));
              }
              fkts.push_back(fkt_steps);
            }
          }
        }
      }
      json entry;
      entry["runs"] = method_runs.size();
      entry["final_average"] = {{"mean", mean_of(final_avgs)}, {"std", std_of(final_avgs)}};
      const size_t steps = per_step.front().size();
      std::vector<double> mean_curve;
      for (size_t s = 0; s < steps; ++s) {
        std::vector<double> at_step;
        for (const auto& run_steps : per_step) at_step.push_back(run_steps[s]);
        mean_curve.push_back(mean_of(at_step));
      }
      entry["per_step_average"] = mean_curve;
      curves[method] = mean_curve;
      if (fkts.size() == method_runs.size() && !fkts.empty()) {
        std::vector<double> fkt_mean;
        for (size_t s = 0; s < fkts.front().size(); ++s) {
          std::vector<double> at_step;
          for (const auto& f : fkts) at_step.push_back(f[s]);
          fkt_mean.push_back(mean_of(at_step));
        }
        entry["fkt_per_step"] = fkt_mean;
      }
      if (!reuse.empty()) entry["reuse_rate"] = mean_of(reuse);
      methods_json[method] = entry;
    }
    summary["suites"][suite_name] = methods_json;
    write_text(fs::path(out_dir) / "plots" / ("scores_" + suite_name + ".svg"), svg_plot(curves));
  }
  write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Selftest

namespace {

Matrix random_orthonormal(Rng& rng, int rows, int cols) {
  Matrix m = rng.normal_matrix(rows, cols, 1.0);
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
  return q;
}

bool run_suite(std::ostream& os, const std::string& name, const std::function<bool()>& body) {
  bool ok = false;
  try {
    ok = body();
  } catch (const std::exception& e) {
    os << "[FAIL] " << name << " (exception: " << e.what() << ")\n";
    return false;
  }
  os << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
  return ok;
}

}  // namespace

int selftest(std::ostream& os) {
  int failures = 0;

  failures += !run_suite(os, "softmax weights: simplex and shift invariance", [] {
    Rng rng(101);
    for (int i = 0; i < 200; ++i) {
      Vector c = rng.normal_matrix(rng.uniform_int(1, 9), 1, 3.0).col(0);
      Vector w = softmax_weights(c);
      if (std::abs(w.sum() - 1.0) > tol::kSoftmaxSum || w.minCoeff() <= 0.0) return false;
      Vector shifted = softmax_weights((c.array() + 3.25).matrix());
      if ((shifted - w).cwiseAbs().maxCoeff() > 1e-9) return false;
    }
    return true;
  });

  failures += !run_suite(os, "energy rank selection: oracle agreement and monotonicity", [] {
    Rng rng(102);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = rng.uniform_int(1, 10);
      std::vector<double> vals;
      for (int i = 0; i < n; ++i) vals.push_back(rng.uniform() + 0.01);
      std::sort(vals.begin(), vals.end(), std::greater<>());
      Vector s = Eigen::Map<Vector>(vals.data(), n);
      int prev = 0;
      for (double eps : {0.2, 0.5, 0.9, 0.95, 1.0}) {
        const int k = rank_for_energy(s, eps);
        double total = 0.0, cum = 0.0;
        for (double v : vals) total += v * v;
        int oracle = n;
        for (int i = 0; i < n; ++i) {
          cum += vals[i] * vals[i];
          if (cum >= eps * total) {
            oracle = i + 1;
            break;
          }
        }
        if (k != oracle || k < prev) return false;
        prev = k;
      }
    }
    return true;
  });

  failures += !run_suite(os, "subspace similarity: range, identity, orthogonality", [] {
    Rng rng(103);
    for (int trial = 0; trial < 50; ++trial) {
      const int m = 12;
      SubspaceBasis a{"a", random_orthonormal(rng, m, rng.uniform_int(1, 5)), 0.95, 0, 0};
      SubspaceBasis b{"b", random_orthonormal(rng, m, rng.uniform_int(1, 5)), 0.95, 0, 0};
      const double q = subspace_similarity(a, b);
      if (q < -tol::kExact || q > 1.0 + tol::kExact) return false;
      if (std::abs(subspace_similarity(a, a) - 1.0) > tol::kExact) return false;
    }
    Matrix e1 = Matrix::Identity(4, 1);
    Matrix e2 = Matrix::Zero(4, 1);
    e2(1, 0) = 1.0;
    SubspaceBasis ba{"a", e1, 0.95, 1, 1}, bb{"b", e2, 0.95, 1, 1};
    return std::abs(subspace_similarity(ba, bb)) <= tol::kExact;
  });

  failures += !run_suite(os, "dynamic scale factor: fixtures and decay", [] {
    if (std::abs(gradient_scale(1.0, 1.0, 3) - 1.0) > tol::kExact) return false;
    if (std::abs(gradient_scale(3.0, 1.0, 0) - 3.0) > tol::kExact) return false;
    if (std::abs(gradient_scale(2.0, 1.0, 1) - (1.0 + std::exp(-1.0))) > tol::kExact) return false;
    double prev = std::abs(gradient_scale(4.0, 1.0, 0) - 1.0);
    for (int t = 1; t < 8; ++t) {
      const double cur = std::abs(gradient_scale(4.0, 1.0, t) - 1.0);
      if (cur >= prev) return false;
      prev = cur;
    }
    return true;
  });

  failures += !run_suite(os, "forward knowledge transfer fixtures", [] {
    ResultsMatrix r;
    r.task_order = {"a", "b", "c"};
    r.scores = {{50}, {0, 60}, {0, 0, 70}};
    r.standalone = {50, 58, 66};
    if (std::abs(fkt(r, 2) - 2.0) > tol::kExact) return false;
    if (std::abs(fkt(r, 3) - 3.0) > tol::kExact) return false;
    r.standalone = {50, 60, 70};
    return std::abs(fkt(r, 3)) <= tol::kExact;
  });

  failures += !run_suite(os, "fusion convexity on a tiny model", [] {
    BackboneConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_width = 8;
    cfg.num_heads = 2;
    cfg.ffn_width = 12;
    cfg.adapter_bottleneck = 3;
    cfg.vocab_size = 20;
    cfg.max_sequence_length = 16;
    ModelState st = make_model(cfg, 7);
    st.adapters["a0"] = make_adapter("a0", 0, cfg, 1);
    st.adapters["b0"] = make_adapter("b0", 0, cfg, 2);
    st.adapters["c1"] = make_adapter("c1", 1, cfg, 3);
    Vector coeffs(2);
    coeffs << 0.4, -0.9;
    Routing r;
    r.layers.push_back(LayerRouting::fusion({"a0", "b0"}, coeffs));
    r.layers.push_back(LayerRouting::single("c1"));
    ForwardTrace t = forward(st, {14, 15, 16, 13}, r);
    Vector w = softmax_weights(coeffs);
    Matrix combo = w[0] * t.module_outputs[0][0] + w[1] * t.module_outputs[0][1];
    return (t.fused_outputs[0] - combo).cwiseAbs().maxCoeff() <= tol::kFusionLinearity;
  });

  failures += !run_suite(os, "module pool owner consistency", [] {
    BackboneConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_width = 8;
    cfg.num_heads = 2;
    cfg.ffn_width = 12;
    cfg.adapter_bottleneck = 3;
    cfg.vocab_size = 20;
    ModelState st = make_model(cfg, 9);
    ModulePool pool(2);
    std::vector<std::string> first, second;
    for (int l = 0; l < 2; ++l) {
      const std::string id = pool.insert_temp_module(st, l, 100 + l);
      pool.promote(id);
      first.push_back(id);
    }
    pool.register_routing("t1", first);
    second.push_back(first[0]);
    second.push_back(pool.insert_temp_module(st, 1, 200));
    pool.promote(second[1]);
    pool.register_routing("t2", second);
    pool.verify_owner_consistency();
    return pool.owners(first[0]).size() == 2 && pool.owners(first[1]).size() == 1;
  });

  return failures;
}

// ---------------------------------------------------------------------------
// Concurrency helpers

int max_threads() {
  if (const char* env = std::getenv("DMEA_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 2;
}

void run_parallel(const std::vector<std::function<void()>>& jobs) {
  const int workers = std::min<int>(max_threads(), static_cast<int>(jobs.size()));
  if (workers <= 1) {
    for (const auto& job : jobs) job();
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!failed.exchange(true)) first_error = e.what();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failed) throw TrainingFailure("parallel run failed: " + first_error);
}

}  // namespace dmea
