#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dmea/model.hpp"
#include "dmea/module_pool.hpp"
#include "dmea/taskgen.hpp"

namespace dmea {

struct AdaptationConfig {
  int epochs = 20;
  double learning_rate = 1e-3;
  int batch_size = 16;
  double mu = 0.25;
  double pseudo_ratio = 0.2;
  int q = 100;  // batch size for the gradient-norm estimates
  std::uint64_t seed = 0;
  void validate() const;
};

struct GradScaleState {
  std::string replayed_task_id;
  int t = 0;  // completed training epochs
  double g_new_norm = 0.0;
  double g_old_norm = 0.0;
  double eta = 1.0;
};

struct PseudoSample {
  std::string origin_task_id;
  std::vector<int> x, q, y;
  bool well_formed = false;
};

struct PseudoGenStats {
  int attempts = 0;
  int well_formed = 0;
  int quota = 0;
};

// Previous tasks owning at least one module of the new routing.
std::set<std::string> replayed_tasks(const ModulePool& pool, const std::string& new_task,
                                     const std::vector<std::string>& new_routing);

// Generates `count_total` pseudo samples split equally over the replayed
// tasks (remainder to earlier tasks), each conditioned on the origin task's
// generation token under its saved routing. Malformed generations are dropped
// with up to 3x the quota in attempts; a shortfall is accepted.
std::vector<PseudoSample> generate_pseudo(const ModelState& state, const ModulePool& pool,
                                          const std::vector<const TaskSpec*>& origins,
                                          int count_total, const DecodeConfig& decode,
                                          std::uint64_t seed, PseudoGenStats* stats = nullptr);

// eta = (g_new/g_old - 1) * exp(-t) + 1; a zero old-gradient norm clamps the
// factor to 1 with a warning.
double gradient_scale(double g_new_norm, double g_old_norm, int t);

// Euclidean norms of the mean-batch training-loss gradients restricted to the
// reused modules' parameters, one batch per task.
std::pair<double, double> estimate_gradient_norms(const ModelState& state,
                                                  std::span<const TrainingSample> new_batch,
                                                  const Routing& new_routing,
                                                  std::span<const TrainingSample> old_batch,
                                                  const Routing& old_routing,
                                                  const std::vector<std::string>& reused_modules,
                                                  double mu);

struct AdaptationEpochLog {
  int epoch = 0;
  double new_task_loss = 0.0;
  std::map<std::string, double> replay_loss;
  std::map<std::string, GradScaleState> scale;
};

struct AdaptationResult {
  FusionCoefficients alpha;  // saved for inference by the caller
  std::vector<AdaptationEpochLog> log;
};

// Adaptation stage: trains the new task's selected modules and the fusion
// coefficients alpha over {similar tasks' modules, new task's modules},
// jointly with the replayed tasks' pseudo samples weighted by the dynamic
// scale factor. Pseudo batches flow through their origin task's saved
// routing; only the new task's modules and alpha receive updates.
AdaptationResult run_adaptation(ModelState& state, ModulePool& pool, const TaskSpec& task,
                                const std::vector<std::string>& similar_tasks,
                                const std::map<std::string, std::vector<TrainingSample>>& pseudo,
                                const AdaptationConfig& config, bool scaling_enabled);

}  // namespace dmea
