#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmea/adaptation.hpp"
#include "dmea/expansion.hpp"
#include "dmea/model.hpp"
#include "dmea/module_pool.hpp"
#include "dmea/selection.hpp"
#include "dmea/taskgen.hpp"

namespace dmea {

struct MethodSpec {
  enum class ExpansionMode { dynamic_search, shared_modules, per_task };

  std::string name;
  ExpansionMode expansion = ExpansionMode::dynamic_search;
  bool transfer = true;      // fuse top-K similar tasks during adaptation
  bool scaling = true;       // dynamic gradient scaling (eta)
  bool dynamic_init = true;  // frequency-based lambda initialization
  bool replay = true;        // pseudo-sample replay

  bool uses_selection_stage() const { return expansion == ExpansionMode::dynamic_search; }
  static MethodSpec parse(const std::string& name);
  static const std::vector<std::string>& known_methods();
};

struct HarnessConfig {
  int pretrain_steps = 3000;
  int pretrain_corpus_size = 4000;
  std::string backbone_cache;  // directory for shared pretrained backbones; empty = off
  void validate() const;
};

struct Config {
  BackboneConfig backbone;
  ExpansionConfig expansion;
  SelectionConfig selection;
  AdaptationConfig adaptation;
  TaskgenConfig taskgen;
  HarnessConfig harness;
  void validate() const;
};

Config config_from_json(const std::string& text);
std::string config_to_json(const Config& config);
Config load_config_file(const std::string& path);

// Lower-triangular score matrix: scores[i][j] is the score on the j-th
// learned task after finishing the i-th one.
struct ResultsMatrix {
  std::vector<std::string> task_order;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<double>> token_acc;
  std::vector<double> standalone;  // aligned with task_order; empty when unknown
};

double average_score(const std::vector<double>& final_row);

// Forward knowledge transfer after t steps (t >= 2, 1-indexed):
// mean over i in [2, t] of scores[i][i] - standalone[i].
double fkt(const ResultsMatrix& results, int t);

double exact_match_score(const std::vector<std::vector<int>>& outputs,
                         const std::vector<std::vector<int>>& references);

struct EvalResult {
  double exact_match = 0.0;     // percentage in [0, 100]
  double token_accuracy = 0.0;  // percentage in [0, 100]
};
EvalResult evaluate_detailed(const ModelState& state, const ModulePool& pool,
                             const TaskSpec& task);
double evaluate(const ModelState& state, const ModulePool& pool, const TaskSpec& task);

struct RunArtifacts {
  std::vector<ExpansionTrace> expansion_traces;
  std::map<std::string, std::vector<std::string>> routing_table;  // task -> per-layer ids
  std::vector<std::tuple<std::string, std::string, double>> similarity;  // new, old, Q
  std::map<std::string, std::vector<AdaptationEpochLog>> adaptation_logs;
  std::map<std::string, PseudoGenStats> pseudo_stats;
};

struct RunOptions {
  std::string out_dir;                          // empty = no files written
  std::string suite_name;                       // recorded in metadata
  const ModelState* pretrained = nullptr;       // reuse an existing backbone
  const std::vector<double>* standalone = nullptr;  // per suite index, for FKT
  RunArtifacts* artifacts = nullptr;
};

// Executes expansion -> selection -> adaptation per task (stages modified by
// the method flags), evaluating every learned task after each step.
ResultsMatrix run_lifelong(const std::vector<TaskSpec>& suite, const std::vector<int>& order,
                           const MethodSpec& method, std::uint64_t seed, const Config& config,
                           const RunOptions& opts = {});

// Each task trained in isolation with fresh adapters; bit-identical to the
// per-task-adapters lifelong procedure. Returned per suite index.
std::vector<double> standalone_scores(const std::vector<TaskSpec>& suite, std::uint64_t seed,
                                      const Config& config,
                                      const ModelState* pretrained = nullptr);

// Pretrains (or loads from the configured cache) the frozen backbone.
ModelState acquire_backbone(const Config& config, std::uint64_t seed);

// Deterministic order permutation for --order N (0 = suite order).
std::vector<int> order_permutation(int order_index, int num_tasks);

void write_results_csv(const ResultsMatrix& results, const std::string& path);
ResultsMatrix read_results_csv(const std::string& path);

void write_standalone_file(const std::string& suite_name, std::uint64_t seed,
                           const std::vector<TaskSpec>& suite, const std::vector<double>& scores,
                           const std::string& out_dir);

// Aggregates finished run directories (and standalone files) under `in_dir`
// into summary.json and score-vs-step plots under `out_dir`.
void report(const std::string& in_dir, const std::string& out_dir);

// Quick invariant battery; returns the number of failed suites.
int selftest(std::ostream& os);

// Runs jobs concurrently, capped by DMEA_THREADS (default: hardware threads).
void run_parallel(const std::vector<std::function<void()>>& jobs);
int max_threads();

}  // namespace dmea
