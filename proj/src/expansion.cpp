#include "dmea/expansion.hpp"

#include <numeric>

#include <json.hpp>

namespace dmea {

using nlohmann::json;

void ExpansionConfig::validate() const {
  if (epochs < 1) throw InvalidInput("ExpansionConfig: epochs must be >= 1");
  if (learning_rate <= 0.0) throw InvalidInput("ExpansionConfig: learning rate must be positive");
  if (batch_size < 1) throw InvalidInput("ExpansionConfig: batch size must be >= 1");
}

std::string ExpansionTrace::to_json() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    json init = json::array(), fin = json::array();
    for (Eigen::Index i = 0; i < l.initial_coefficients.size(); ++i) init.push_back(l.initial_coefficients[i]);
    for (Eigen::Index i = 0; i < l.final_coefficients.size(); ++i) fin.push_back(l.final_coefficients[i]);
    layers_json.push_back({{"members", l.members},
                           {"initial_coefficients", init},
                           {"final_coefficients", fin},
                           {"selected", l.selected},
                           {"reused", l.reused}});
  }
  return json{{"task", task_id}, {"layers", layers_json}}.dump(2);
}

std::vector<std::string> run_expansion(ModelState& state, ModulePool& pool, const TaskSpec& task,
                                       const FrequencyStore& frequencies,
                                       const ExpansionConfig& config, double mu,
                                       bool dynamic_init, ExpansionTrace* trace) {
  if (task.train.empty()) throw InvalidState("run_expansion: task has no train data");
  const int num_layers = pool.num_layers();
  const std::uint64_t task_salt = Rng::hash_string(task.task_id);

  bool first_task = true;
  for (int l = 0; l < num_layers; ++l) {
    if (!pool.layer_modules(l).empty()) first_task = false;
  }

  std::vector<std::string> temp_ids;
  for (int l = 0; l < num_layers; ++l) {
    temp_ids.push_back(pool.insert_temp_module(
        state, l, Rng::derive_seed(config.seed, {task_salt, static_cast<std::uint64_t>(l),
                                                 Rng::hash_string("module")})));
  }

  FusionCoefficients lambda;
  lambda.stage = FusionCoefficients::Stage::expansion;
  auto f_new = frequencies.find(task.task_id);
  if (f_new == frequencies.end()) {
    throw InvalidState("run_expansion: missing frequency vector for " + task.task_id);
  }
  for (int l = 0; l < num_layers; ++l) {
    lambda.members.push_back(pool.layer_modules(l));
    if (dynamic_init) {
      lambda.values.push_back(init_expansion_coefficients(pool, l, frequencies, f_new->second));
    } else {
      lambda.values.push_back(Vector::Ones(static_cast<Eigen::Index>(lambda.members[l].size())));
    }
  }
  std::vector<Vector> initial_lambda = lambda.values;

  if (!first_task && config.epochs > 0) {
    Routing routing;
    for (int l = 0; l < num_layers; ++l) {
      routing.layers.push_back(LayerRouting::fusion(lambda.members[l], lambda.values[l]));
    }
    TrainableSet trainable;
    trainable.coefficients = true;
    for (const auto& id : temp_ids) {
      for (const auto& n : adapter_param_names(id)) trainable.params.insert(n);
    }

    std::vector<TrainingSample> samples;
    samples.reserve(task.train.size());
    for (const Sample& s : task.train) samples.push_back(make_training_sample(s, task));

    std::vector<int> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    try {
      for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffler(Rng::derive_seed(config.seed, {task_salt, Rng::hash_string("shuffle"),
                                                    static_cast<std::uint64_t>(epoch)}));
        shuffler.shuffle(order);
        for (size_t pos = 0; pos < order.size(); pos += config.batch_size) {
          const size_t end = std::min(order.size(), pos + config.batch_size);
          std::vector<TrainingSample> batch;
          for (size_t b = pos; b < end; ++b) batch.push_back(samples[order[b]]);
          GradientStore grads = gradients(state, batch, routing, LossSelector::train, mu, trainable);
          sgd_step(state, routing, grads, trainable, config.learning_rate);
        }
      }
    } catch (const NumericalFailure& e) {
      throw TrainingFailure("expansion stage diverged on task " + task.task_id + ": " + e.what());
    }
    for (int l = 0; l < num_layers; ++l) lambda.values[l] = routing.layers[l].coefficients;
  }

  std::vector<std::string> selected = select_largest(lambda);
  for (int l = 0; l < num_layers; ++l) {
    const bool was_temp = pool.is_temporary(selected[l]);
    if (was_temp) pool.promote(selected[l]);
    pool.discard_unselected(state, l, selected[l]);
    if (trace) {
      ExpansionLayerTrace lt;
      lt.members = lambda.members[l];
      lt.initial_coefficients = initial_lambda[l];
      lt.final_coefficients = lambda.values[l];
      lt.selected = selected[l];
      lt.reused = !was_temp;
      trace->layers.push_back(std::move(lt));
    }
  }
  if (trace) trace->task_id = task.task_id;
  return selected;
}

}  // namespace dmea
