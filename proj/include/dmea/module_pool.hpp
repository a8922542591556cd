#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "dmea/model.hpp"
#include "dmea/numerics.hpp"

namespace dmea {

// Learnable per-layer mixing logits over a member module set, one vector per
// transformer layer. Expansion trains lambda over {previous modules, new
// temporary module}; adaptation trains alpha over {similar tasks' modules,
// new task's modules}.
struct FusionCoefficients {
  enum class Stage { expansion, adaptation };
  Stage stage = Stage::expansion;
  std::vector<std::vector<std::string>> members;  // per layer
  std::vector<Vector> values;                     // per layer, logits
};

using FrequencyStore = std::map<std::string, Vector>;  // task id -> word frequencies

// Owns module identity, ownership and routing across the lifelong run.
// Module parameters live in the ModelState's adapter store.
class ModulePool {
 public:
  explicit ModulePool(int num_layers) : layers_(num_layers) {}

  int num_layers() const { return static_cast<int>(layers_.size()); }
  const std::vector<std::string>& layer_modules(int layer) const;
  bool is_temporary(const std::string& id) const;
  bool has_module(const std::string& id) const;
  const std::set<std::string>& owners(const std::string& id) const;

  // All task ids with a registered routing, in registration order.
  const std::vector<std::string>& tasks() const { return task_order_; }
  bool has_routing(const std::string& task) const { return routing_.count(task) > 0; }
  const std::vector<std::string>& routing_of(const std::string& task) const;

  std::string insert_temp_module(ModelState& state, int layer, std::uint64_t seed);
  void promote(const std::string& id);  // clears the temporary flag
  // Removes unselected temporary modules in the layer (and their parameters).
  void discard_unselected(ModelState& state, int layer, const std::string& selected_id);

  void register_routing(const std::string& task, const std::vector<std::string>& per_layer_ids);

  // Saved adaptation coefficients, immutable once stored.
  void save_inference_directive(const std::string& task, FusionCoefficients alpha);
  bool has_inference_directive(const std::string& task) const;
  const FusionCoefficients& inference_directive(const std::string& task) const;

  // Single-module routing induced by the task's registered per-layer ids.
  Routing task_routing(const std::string& task) const;
  // Fused routing from the saved adaptation coefficients; falls back to the
  // plain task routing when no directive was saved.
  Routing task_inference_routing(const std::string& task) const;

  // Internal-consistency check: owners(m) == {tasks whose routing selects m}.
  void verify_owner_consistency() const;

  std::string routing_table_json() const;  // {task: {layer: module_id}}

 private:
  std::vector<std::vector<std::string>> layers_;
  std::map<std::string, int> layer_of_;
  std::map<std::string, bool> temporary_;
  std::map<std::string, std::set<std::string>> owners_;
  std::map<std::string, std::vector<std::string>> routing_;
  std::vector<std::string> task_order_;
  std::map<std::string, FusionCoefficients> saved_alpha_;
  int next_module_ = 0;
};

// Coefficient initialization for the expansion search in one layer:
// lambda_t = max over owner tasks of cos(f_owner, f_new) for previous
// modules, and the minimum of those for the temporary module. A layer with no
// previous modules starts at [1.0].
Vector init_expansion_coefficients(const ModulePool& pool, int layer,
                                   const FrequencyStore& frequencies, const Vector& f_new);

// Per-layer argmax of the trained coefficients; ties break toward the oldest
// (lowest-index) member.
std::vector<std::string> select_largest(const FusionCoefficients& coefficients);

}  // namespace dmea
