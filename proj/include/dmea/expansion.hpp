#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmea/model.hpp"
#include "dmea/module_pool.hpp"
#include "dmea/taskgen.hpp"

namespace dmea {

struct ExpansionConfig {
  int epochs = 6;
  double learning_rate = 1e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  void validate() const;
};

struct ExpansionLayerTrace {
  std::vector<std::string> members;
  Vector initial_coefficients;
  Vector final_coefficients;
  std::string selected;
  bool reused = false;  // selected module predates this task
};

struct ExpansionTrace {
  std::string task_id;
  std::vector<ExpansionLayerTrace> layers;
  std::string to_json() const;
};

// Expansion stage: insert one temporary module per layer, initialize the
// mixing coefficients (dynamically from word-frequency cosines unless
// disabled), train only the temporary modules and the coefficients under
// fused forwarding, then keep the per-layer argmax module and discard the
// unselected temporaries. Returns the selected module id per layer.
std::vector<std::string> run_expansion(ModelState& state, ModulePool& pool, const TaskSpec& task,
                                       const FrequencyStore& frequencies,
                                       const ExpansionConfig& config, double mu,
                                       bool dynamic_init, ExpansionTrace* trace = nullptr);

}  // namespace dmea
