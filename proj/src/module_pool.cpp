#include "dmea/module_pool.hpp"

#include <algorithm>

#include <json.hpp>

namespace dmea {

using nlohmann::json;

const std::vector<std::string>& ModulePool::layer_modules(int layer) const {
  if (layer < 0 || layer >= num_layers()) throw InvalidInput("ModulePool: layer out of range");
  return layers_[layer];
}

bool ModulePool::has_module(const std::string& id) const { return layer_of_.count(id) > 0; }

bool ModulePool::is_temporary(const std::string& id) const {
  auto it = temporary_.find(id);
  if (it == temporary_.end()) throw InvalidState("ModulePool: unknown module " + id);
  return it->second;
}

const std::set<std::string>& ModulePool::owners(const std::string& id) const {
  auto it = owners_.find(id);
  if (it == owners_.end()) throw InvalidState("ModulePool: unknown module " + id);
  return it->second;
}

const std::vector<std::string>& ModulePool::routing_of(const std::string& task) const {
  auto it = routing_.find(task);
  if (it == routing_.end()) throw InvalidState("ModulePool: no routing for task " + task);
  return it->second;
}

std::string ModulePool::insert_temp_module(ModelState& state, int layer, std::uint64_t seed) {
  if (layer < 0 || layer >= num_layers()) throw InvalidInput("ModulePool: layer out of range");
  const std::string id = "m" + std::to_string(next_module_++);
  state.adapters.emplace(id, make_adapter(id, layer, state.config, seed));
  layers_[layer].push_back(id);
  layer_of_[id] = layer;
  temporary_[id] = true;
  owners_[id] = {};
  return id;
}

void ModulePool::promote(const std::string& id) {
  if (!has_module(id)) throw InvalidState("ModulePool: unknown module " + id);
  temporary_[id] = false;
}

void ModulePool::discard_unselected(ModelState& state, int layer, const std::string& selected_id) {
  if (layer < 0 || layer >= num_layers()) throw InvalidInput("ModulePool: layer out of range");
  std::vector<std::string> kept;
  for (const auto& id : layers_[layer]) {
    if (id == selected_id || !temporary_[id]) {
      kept.push_back(id);
      continue;
    }
    if (!owners_[id].empty()) {
      throw InvalidState("ModulePool: refusing to discard owned module " + id);
    }
    state.adapters.erase(id);
    layer_of_.erase(id);
    temporary_.erase(id);
    owners_.erase(id);
  }
  layers_[layer] = std::move(kept);
}

void ModulePool::register_routing(const std::string& task,
                                  const std::vector<std::string>& per_layer_ids) {
  if (static_cast<int>(per_layer_ids.size()) != num_layers()) {
    throw RoutingError("register_routing: one module per layer required");
  }
  for (int l = 0; l < num_layers(); ++l) {
    const auto& id = per_layer_ids[l];
    auto it = layer_of_.find(id);
    if (it == layer_of_.end()) throw RoutingError("register_routing: unknown module " + id);
    if (it->second != l) throw RoutingError("register_routing: module " + id + " not in layer");
  }
  auto existing = routing_.find(task);
  if (existing != routing_.end()) {
    for (const auto& id : existing->second) owners_[id].erase(task);
  } else {
    task_order_.push_back(task);
  }
  routing_[task] = per_layer_ids;
  for (const auto& id : per_layer_ids) owners_[id].insert(task);
}

void ModulePool::save_inference_directive(const std::string& task, FusionCoefficients alpha) {
  if (saved_alpha_.count(task)) {
    throw InvalidState("ModulePool: inference coefficients for " + task + " already saved");
  }
  if (alpha.members.size() != static_cast<size_t>(num_layers()) ||
      alpha.values.size() != alpha.members.size()) {
    throw InvalidState("ModulePool: malformed fusion coefficients");
  }
  saved_alpha_.emplace(task, std::move(alpha));
}

bool ModulePool::has_inference_directive(const std::string& task) const {
  return saved_alpha_.count(task) > 0;
}

const FusionCoefficients& ModulePool::inference_directive(const std::string& task) const {
  auto it = saved_alpha_.find(task);
  if (it == saved_alpha_.end()) throw InvalidState("ModulePool: no saved coefficients for " + task);
  return it->second;
}

Routing ModulePool::task_routing(const std::string& task) const {
  return Routing::single(routing_of(task));
}

Routing ModulePool::task_inference_routing(const std::string& task) const {
  if (!has_inference_directive(task)) return task_routing(task);
  const FusionCoefficients& alpha = inference_directive(task);
  Routing r;
  for (int l = 0; l < num_layers(); ++l) {
    r.layers.push_back(LayerRouting::fusion(alpha.members[l], alpha.values[l]));
  }
  return r;
}

void ModulePool::verify_owner_consistency() const {
  std::map<std::string, std::set<std::string>> expected;
  for (const auto& [id, layer] : layer_of_) expected[id] = {};
  for (const auto& [task, ids] : routing_) {
    for (const auto& id : ids) expected[id].insert(task);
  }
  for (const auto& [id, owners] : owners_) {
    if (expected.at(id) != owners) {
      throw InvalidState("ModulePool: owner set out of sync for module " + id);
    }
  }
}

std::string ModulePool::routing_table_json() const {
  json out = json::object();
  for (const auto& task : task_order_) {
    json per_layer = json::object();
    const auto& ids = routing_.at(task);
    for (size_t l = 0; l < ids.size(); ++l) per_layer[std::to_string(l)] = ids[l];
    out[task] = per_layer;
  }
  return out.dump(2);
}

Vector init_expansion_coefficients(const ModulePool& pool, int layer,
                                   const FrequencyStore& frequencies, const Vector& f_new) {
  const auto& members = pool.layer_modules(layer);
  if (members.empty() || !pool.is_temporary(members.back())) {
    throw InvalidState("init_expansion_coefficients: layer must end with the temporary module");
  }
  const int k = static_cast<int>(members.size()) - 1;
  if (k == 0) return Vector::Ones(1);  // first-task bootstrap
  Vector lambda(k + 1);
  for (int t = 0; t < k; ++t) {
    const auto& owner_set = pool.owners(members[t]);
    if (owner_set.empty()) {
      throw InvalidState("init_expansion_coefficients: module without owners");
    }
    double best = -1.0;
    for (const auto& owner : owner_set) {
      auto it = frequencies.find(owner);
      if (it == frequencies.end()) {
        throw InvalidState("init_expansion_coefficients: missing frequency vector for " + owner);
      }
      best = std::max(best, cosine_similarity(it->second, f_new));
    }
    lambda[t] = best;
  }
  lambda[k] = lambda.head(k).minCoeff();
  return lambda;
}

std::vector<std::string> select_largest(const FusionCoefficients& coefficients) {
  std::vector<std::string> selected;
  for (size_t l = 0; l < coefficients.members.size(); ++l) {
    const auto& members = coefficients.members[l];
    const Vector& v = coefficients.values[l];
    if (members.empty() || v.size() != static_cast<Eigen::Index>(members.size())) {
      throw InvalidState("select_largest: malformed coefficients");
    }
    int best = 0;
    for (int i = 1; i < static_cast<int>(members.size()); ++i) {
      if (v[i] > v[best]) best = i;  // strict: ties keep the oldest member
    }
    selected.push_back(members[best]);
  }
  return selected;
}

}  // namespace dmea
