#include "dmea/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace dmea {

void AdaptationConfig::validate() const {
  if (epochs < 1) throw InvalidInput("AdaptationConfig: epochs must be >= 1");
  if (learning_rate <= 0.0) throw InvalidInput("AdaptationConfig: learning rate must be positive");
  if (batch_size < 1) throw InvalidInput("AdaptationConfig: batch size must be >= 1");
  if (mu < 0.0) throw InvalidInput("AdaptationConfig: mu must be non-negative");
  if (pseudo_ratio < 0.0) throw InvalidInput("AdaptationConfig: pseudo_ratio must be non-negative");
  if (q < 1) throw InvalidInput("AdaptationConfig: q must be >= 1");
}

std::set<std::string> replayed_tasks(const ModulePool& pool, const std::string& new_task,
                                     const std::vector<std::string>& new_routing) {
  std::set<std::string> out;
  for (const auto& id : new_routing) {
    for (const auto& owner : pool.owners(id)) {
      if (owner != new_task) out.insert(owner);
    }
  }
  return out;
}

std::vector<PseudoSample> generate_pseudo(const ModelState& state, const ModulePool& pool,
                                          const std::vector<const TaskSpec*>& origins,
                                          int count_total, const DecodeConfig& decode,
                                          std::uint64_t seed, PseudoGenStats* stats) {
  std::vector<PseudoSample> out;
  if (origins.empty() || count_total <= 0) return out;
  const int n = static_cast<int>(origins.size());
  const int base = count_total / n;
  const int remainder = count_total % n;

  for (int i = 0; i < n; ++i) {
    const TaskSpec& origin = *origins[i];
    const int quota = base + (i < remainder ? 1 : 0);  // remainder to earlier tasks
    if (stats) stats->quota += quota;
    const Routing routing = pool.task_inference_routing(origin.task_id);
    int kept = 0, attempts = 0;
    while (kept < quota && attempts < 3 * quota) {
      DecodeConfig d = decode;
      d.seed = Rng::derive_seed(seed, {Rng::hash_string(origin.task_id),
                                       static_cast<std::uint64_t>(attempts)});
      // leave room for the generation token and a re-encoded <eos>
      d.max_new_tokens = std::min(d.max_new_tokens, state.config.max_sequence_length - 3);
      ++attempts;
      if (stats) ++stats->attempts;
      std::vector<int> body;
      try {
        body = generate(state, {origin.generation_token}, routing, d);
        DecodedTriple triple = dmea::decode(body);
        PseudoSample ps;
        ps.origin_task_id = origin.task_id;
        ps.x = triple.x;
        ps.q = triple.q;
        ps.y = triple.y;
        ps.well_formed = true;
        out.push_back(std::move(ps));
        ++kept;
        if (stats) ++stats->well_formed;
      } catch (const InvalidSample&) {
        continue;  // noisy generation; retry within the attempt budget
      }
    }
    if (kept < quota) {
      std::cerr << "[dmea] pseudo-sample shortfall for task " << origin.task_id << ": " << kept
                << "/" << quota << "\n";
    }
  }
  return out;
}

double gradient_scale(double g_new_norm, double g_old_norm, int t) {
  if (g_new_norm < 0.0 || g_old_norm < 0.0) throw InvalidInput("gradient_scale: negative norm");
  if (t < 0) throw InvalidInput("gradient_scale: negative epoch count");
  if (g_old_norm == 0.0) {
    std::cerr << "[dmea] gradient_scale: zero replay gradient norm, clamping eta to 1\n";
    return 1.0;
  }
  return (g_new_norm / g_old_norm - 1.0) * std::exp(static_cast<double>(-t)) + 1.0;
}

std::pair<double, double> estimate_gradient_norms(const ModelState& state,
                                                  std::span<const TrainingSample> new_batch,
                                                  const Routing& new_routing,
                                                  std::span<const TrainingSample> old_batch,
                                                  const Routing& old_routing,
                                                  const std::vector<std::string>& reused_modules,
                                                  double mu) {
  if (reused_modules.empty()) {
    throw InvalidState("estimate_gradient_norms: no reused modules");
  }
  TrainableSet restricted;
  for (const auto& id : reused_modules) {
    for (const auto& n : adapter_param_names(id)) restricted.params.insert(n);
  }
  GradientStore g_new = gradients(state, new_batch, new_routing, LossSelector::train, mu, restricted);
  GradientStore g_old = gradients(state, old_batch, old_routing, LossSelector::train, mu, restricted);
  return {g_new.param_norm(), g_old.param_norm()};
}

AdaptationResult run_adaptation(ModelState& state, ModulePool& pool, const TaskSpec& task,
                                const std::vector<std::string>& similar_tasks,
                                const std::map<std::string, std::vector<TrainingSample>>& pseudo,
                                const AdaptationConfig& config, bool scaling_enabled) {
  if (!pool.has_routing(task.task_id)) {
    throw InvalidState("run_adaptation: expansion selection not registered for " + task.task_id);
  }
  const std::vector<std::string>& own_ids = pool.routing_of(task.task_id);
  const int num_layers = pool.num_layers();
  const std::uint64_t task_salt = Rng::hash_string(task.task_id);

  // Fusion member set per layer: similar tasks' modules first, then the new
  // task's module, deduplicated toward the first occurrence.
  FusionCoefficients alpha;
  alpha.stage = FusionCoefficients::Stage::adaptation;
  for (int l = 0; l < num_layers; ++l) {
    std::vector<std::string> members;
    auto push_unique = [&members](const std::string& id) {
      if (std::find(members.begin(), members.end(), id) == members.end()) members.push_back(id);
    };
    for (const auto& sim : similar_tasks) push_unique(pool.routing_of(sim)[l]);
    push_unique(own_ids[l]);
    alpha.members.push_back(members);
    alpha.values.push_back(Vector::Ones(static_cast<Eigen::Index>(members.size())));
  }

  Routing routing;
  for (int l = 0; l < num_layers; ++l) {
    routing.layers.push_back(LayerRouting::fusion(alpha.members[l], alpha.values[l]));
  }
  TrainableSet trainable;
  trainable.coefficients = true;
  for (const auto& id : own_ids) {
    for (const auto& n : adapter_param_names(id)) trainable.params.insert(n);
  }
  TrainableSet replay_trainable;  // saved alpha of previous tasks stays frozen
  replay_trainable.params = trainable.params;
  replay_trainable.coefficients = false;

  std::vector<TrainingSample> samples;
  samples.reserve(task.train.size());
  for (const Sample& s : task.train) samples.push_back(make_training_sample(s, task));

  struct ReplaySource {
    std::string task_id;
    const std::vector<TrainingSample>* samples;
    Routing routing;
    std::vector<std::string> reused_modules;
    size_t cursor = 0;
  };
  std::vector<ReplaySource> replays;
  for (const auto& [origin, origin_samples] : pseudo) {
    if (origin_samples.empty()) continue;
    ReplaySource r;
    r.task_id = origin;
    r.samples = &origin_samples;
    r.routing = pool.task_inference_routing(origin);
    const auto& origin_ids = pool.routing_of(origin);
    for (const auto& id : own_ids) {
      if (std::find(origin_ids.begin(), origin_ids.end(), id) != origin_ids.end()) {
        r.reused_modules.push_back(id);
      }
    }
    if (r.reused_modules.empty()) continue;  // nothing shared, nothing to balance or protect
    replays.push_back(std::move(r));
  }

  AdaptationResult result;
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      AdaptationEpochLog log_row;
      log_row.epoch = epoch;

      std::map<std::string, double> eta;
      for (auto& r : replays) {
        GradScaleState scale;
        scale.replayed_task_id = r.task_id;
        scale.t = epoch;
        if (scaling_enabled) {
          Rng qrng(Rng::derive_seed(config.seed, {task_salt, Rng::hash_string("eta"),
                                                  Rng::hash_string(r.task_id),
                                                  static_cast<std::uint64_t>(epoch)}));
          std::vector<TrainingSample> new_q, old_q;
          for (int i = 0; i < config.q; ++i) {
            new_q.push_back(samples[qrng.uniform_int(0, static_cast<int>(samples.size()) - 1)]);
            old_q.push_back(
                (*r.samples)[qrng.uniform_int(0, static_cast<int>(r.samples->size()) - 1)]);
          }
          auto [gn, go] = estimate_gradient_norms(state, new_q, routing, old_q, r.routing,
                                                  r.reused_modules, config.mu);
          scale.g_new_norm = gn;
          scale.g_old_norm = go;
          scale.eta = gradient_scale(gn, go, epoch);
        } else {
          scale.eta = 1.0;
        }
        eta[r.task_id] = scale.eta;
        log_row.scale[r.task_id] = scale;
      }

      Rng shuffler(Rng::derive_seed(config.seed, {task_salt, Rng::hash_string("shuffle"),
                                                  static_cast<std::uint64_t>(epoch)}));
      shuffler.shuffle(order);
      double epoch_new_loss = 0.0;
      std::map<std::string, double> epoch_replay_loss;
      int batches = 0;

      for (size_t pos = 0; pos < order.size(); pos += config.batch_size) {
        const size_t end = std::min(order.size(), pos + config.batch_size);
        std::vector<TrainingSample> batch;
        for (size_t b = pos; b < end; ++b) batch.push_back(samples[order[b]]);
        GradientStore grads =
            gradients(state, batch, routing, LossSelector::train, config.mu, trainable);
        epoch_new_loss += grads.loss;

        for (auto& r : replays) {
          std::vector<TrainingSample> replay_batch;
          const size_t take = std::min<size_t>(config.batch_size, r.samples->size());
          for (size_t b = 0; b < take; ++b) {
            replay_batch.push_back((*r.samples)[r.cursor]);
            r.cursor = (r.cursor + 1) % r.samples->size();
          }
          GradientStore rg = gradients(state, replay_batch, r.routing, LossSelector::train,
                                       config.mu, replay_trainable);
          epoch_replay_loss[r.task_id] += rg.loss;
          const double weight = eta.at(r.task_id);
          for (auto& [name, g] : rg.params) {
            auto it = grads.params.find(name);
            if (it == grads.params.end()) {
              grads.params.emplace(name, weight * g);
            } else {
              it->second += weight * g;
            }
          }
        }
        sgd_step(state, routing, grads, trainable, config.learning_rate);
        ++batches;
      }

      log_row.new_task_loss = epoch_new_loss / std::max(1, batches);
      for (auto& [origin, loss] : epoch_replay_loss) {
        log_row.replay_loss[origin] = loss / std::max(1, batches);
      }
      result.log.push_back(std::move(log_row));
    }
  } catch (const NumericalFailure& e) {
    throw TrainingFailure("adaptation stage diverged on task " + task.task_id + ": " + e.what());
  }

  for (int l = 0; l < num_layers; ++l) alpha.values[l] = routing.layers[l].coefficients;
  result.alpha = std::move(alpha);
  return result;
}

}  // namespace dmea
