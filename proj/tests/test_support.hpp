#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dmea/model.hpp"
#include "dmea/taskgen.hpp"

namespace dmea::testing {

// Small backbone over a truncated vocabulary; token ids must stay below 20.
inline BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_width = 8;
  cfg.num_heads = 2;
  cfg.ffn_width = 12;
  cfg.adapter_bottleneck = 3;
  cfg.vocab_size = 20;
  cfg.max_sequence_length = 24;
  return cfg;
}

inline std::vector<TrainingSample> tiny_batch() {
  // Region tokens must be non-reserved; ids 12..19 are function words.
  std::vector<TrainingSample> batch;
  batch.push_back(make_training_sample_from_triple({14, 15}, {16}, {15, 17}, 4));
  batch.push_back(make_training_sample_from_triple({17, 13, 18}, {19}, {12}, 4));
  return batch;
}

inline double batch_mean_loss(const ModelState& state, const std::vector<TrainingSample>& batch,
                              const Routing& routing, LossSelector selector, double mu) {
  double sum = 0.0;
  for (const auto& ts : batch) {
    switch (selector) {
      case LossSelector::task: sum += loss_task(state, ts.task_view, routing); break;
      case LossSelector::data: sum += loss_data(state, ts.data_view, routing); break;
      case LossSelector::train: sum += loss_train(state, ts, routing, mu); break;
    }
  }
  return sum / static_cast<double>(batch.size());
}

struct GradCheckReport {
  double worst_param_rel = 0.0;
  double worst_coef_rel = 0.0;
};

inline double rel_err(double num, double denom) {
  return num / std::max(denom, 1e-10);
}

// Central finite differences over every tensor in `trainable` plus the fusion
// coefficients, compared against the analytic store.
inline GradCheckReport gradient_check(ModelState& state, Routing& routing,
                                      const std::vector<TrainingSample>& batch,
                                      LossSelector selector, double mu,
                                      const TrainableSet& trainable,
                                      double h = tol::kGradCheckStep) {
  GradientStore analytic = gradients(state, batch, routing, selector, mu, trainable);
  GradCheckReport report;
  auto params = state.parameter_map();
  for (const auto& name : trainable.params) {
    Matrix& p = *params.at(name);
    Matrix fd(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const double keep = p(i, j);
        p(i, j) = keep + h;
        const double up = batch_mean_loss(state, batch, routing, selector, mu);
        p(i, j) = keep - h;
        const double down = batch_mean_loss(state, batch, routing, selector, mu);
        p(i, j) = keep;
        fd(i, j) = (up - down) / (2.0 * h);
      }
    }
    Matrix ga = Matrix::Zero(p.rows(), p.cols());
    if (auto it = analytic.params.find(name); it != analytic.params.end()) ga = it->second;
    const double err = rel_err((ga - fd).norm(), std::max(ga.norm(), fd.norm()));
    report.worst_param_rel = std::max(report.worst_param_rel, err);
  }
  if (trainable.coefficients) {
    for (size_t l = 0; l < routing.layers.size(); ++l) {
      if (!routing.layers[l].fused) continue;
      Vector& c = routing.layers[l].coefficients;
      Vector fd(c.size());
      for (Eigen::Index i = 0; i < c.size(); ++i) {
        const double keep = c[i];
        c[i] = keep + h;
        const double up = batch_mean_loss(state, batch, routing, selector, mu);
        c[i] = keep - h;
        const double down = batch_mean_loss(state, batch, routing, selector, mu);
        c[i] = keep;
        fd[i] = (up - down) / (2.0 * h);
      }
      Vector ga = analytic.coefficients[l].size() > 0 ? analytic.coefficients[l]
                                                      : Vector::Zero(c.size()).eval();
      const double err = rel_err((ga - fd).norm(), std::max(ga.norm(), fd.norm()));
      report.worst_coef_rel = std::max(report.worst_coef_rel, err);
    }
  }
  return report;
}

// Pretraining is the slowest fixture; cache the result on disk so every test
// binary (and repeated runs) can share it.
inline ModelState cached_pretrained_backbone(std::uint64_t seed, int steps = 2000) {
  namespace fs = std::filesystem;
  const fs::path dir = "test_cache";
  fs::create_directories(dir);
  const fs::path path = dir / ("backbone_s" + std::to_string(seed) + "_t" + std::to_string(steps) + ".ckpt");
  if (fs::exists(path)) return load_checkpoint(path.string());
  BackboneConfig cfg;  // defaults: 2 layers, width 64
  PretrainCorpus corpus = make_pretrain_corpus(seed);
  ModelState st = pretrain_backbone(cfg, corpus, steps, seed);
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  save_checkpoint(st, tmp.string());
  fs::rename(tmp, path);
  return st;
}

}  // namespace dmea::testing
