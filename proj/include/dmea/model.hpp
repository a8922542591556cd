#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dmea/numerics.hpp"
#include "dmea/taskgen.hpp"
#include "dmea/tokens.hpp"

namespace dmea {

struct BackboneConfig {
  int num_layers = 2;
  int hidden_width = 64;
  int num_heads = 2;
  int ffn_width = 128;
  int vocab_size = 0;  // 0 = size of the shared vocabulary
  int max_sequence_length = kMaxSequenceLength;
  int adapter_bottleneck = 16;
  void validate() const;
  int resolved_vocab_size() const;
};

// Bottleneck transform with a residual connection around it:
//   h = x + gelu(x * down_w + down_b) * up_w + up_b
struct AdapterModule {
  std::string module_id;
  int layer_index = 0;
  Matrix down_w, down_b, up_w, up_b;  // m x b, 1 x b, b x m, 1 x m
};

AdapterModule make_adapter(const std::string& id, int layer, const BackboneConfig& cfg,
                           std::uint64_t seed);

// Per-layer adapter-slot directive. Empty module list = identity slot.
// fused=false routes through a single module directly; fused=true computes
// the softmax-weighted combination of all member outputs.
struct LayerRouting {
  std::vector<std::string> module_ids;
  Vector coefficients;  // logits, same length as module_ids; used when fused
  bool fused = false;

  static LayerRouting identity() { return {}; }
  static LayerRouting single(const std::string& id);
  static LayerRouting fusion(std::vector<std::string> ids, Vector logits);
};

struct Routing {
  std::vector<LayerRouting> layers;
  static Routing identity(int num_layers);
  static Routing single(const std::vector<std::string>& per_layer_ids);
};

struct ModelState {
  BackboneConfig config;
  std::map<std::string, Matrix> backbone;  // frozen after pretraining
  std::map<std::string, AdapterModule> adapters;

  std::map<std::string, Matrix*> parameter_map();
  std::map<std::string, const Matrix*> parameter_map() const;
  std::uint64_t checksum_of(const std::set<std::string>& names) const;
  std::uint64_t backbone_checksum() const;
};

ModelState make_model(const BackboneConfig& cfg, std::uint64_t seed);

// Names of the four parameter tensors of one adapter.
std::vector<std::string> adapter_param_names(const std::string& module_id);

struct ForwardTrace {
  Matrix logits;                 // T x V
  Matrix final_representations;  // T x m, after the final layernorm
  // Per layer: outputs h_s of each member module and the fused slot output.
  std::vector<std::vector<Matrix>> module_outputs;
  std::vector<Matrix> fused_outputs;
};

ForwardTrace forward(const ModelState& state, const std::vector<int>& tokens,
                     const Routing& routing);

Vector last_token_representation(const ForwardTrace& trace, const std::vector<int>& tokens);

// A training view of one sample: the plain encoding for the task loss and the
// G-prefixed encoding for the data-generation loss.
struct TrainingSample {
  EncodedSample task_view;
  EncodedSample data_view;
};
TrainingSample make_training_sample(const Sample& s, const TaskSpec& task);
TrainingSample make_training_sample_from_triple(const std::vector<int>& x,
                                                const std::vector<int>& q,
                                                const std::vector<int>& y,
                                                int generation_token);

double loss_task(const ModelState& state, const EncodedSample& sample, const Routing& routing);
double loss_data(const ModelState& state, const EncodedSample& with_g, const Routing& routing);
double loss_train(const ModelState& state, const TrainingSample& sample, const Routing& routing,
                  double mu);

enum class LossSelector { task, data, train };

struct TrainableSet {
  std::set<std::string> params;  // adapter or backbone tensor names
  bool coefficients = false;     // also produce d(loss)/d(routing logits)
};

struct GradientStore {
  std::map<std::string, Matrix> params;
  std::vector<Vector> coefficients;  // per layer; empty when not requested
  double loss = 0.0;                 // mean batch loss

  double param_norm() const;  // Euclidean norm over all stored tensors
};

// Analytic gradients of the mean batch loss with respect to every parameter
// in `trainable`. Frozen parameters never appear in the store.
GradientStore gradients(const ModelState& state, std::span<const TrainingSample> batch,
                        const Routing& routing, LossSelector selector, double mu,
                        const TrainableSet& trainable);

void sgd_step(ModelState& state, Routing& routing, const GradientStore& grads,
              const TrainableSet& trainable, double learning_rate);

struct DecodeConfig {
  int max_new_tokens = 48;
  int top_k = 0;  // 0 = greedy
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Autoregressive continuation of `prefix` until <eos> or the length cap.
// Returns only the newly generated tokens (without the terminating <eos>).
std::vector<int> generate(const ModelState& state, const std::vector<int>& prefix,
                          const Routing& routing, const DecodeConfig& decode);

// Trains every backbone tensor on the corpus, then the state is treated as
// frozen: later stages only ever update adapters and fusion coefficients.
ModelState pretrain_backbone(const BackboneConfig& cfg, const PretrainCorpus& corpus,
                             int steps, std::uint64_t seed);

// Teacher-forced token accuracy over the answer regions of `samples`.
double answer_token_accuracy(const ModelState& state, const std::vector<EncodedSample>& samples,
                             const Routing& routing);

void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace dmea
