#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmea/model.hpp"
#include "dmea/module_pool.hpp"
#include "dmea/numerics.hpp"
#include "dmea/taskgen.hpp"

namespace dmea {

// Orthonormal basis of a task's input subspace: the first k left-singular
// vectors of the last-token representation matrix, with k chosen by the
// energy threshold epsilon.
struct SubspaceBasis {
  std::string task_id;
  Matrix basis;  // m x k
  double epsilon = 0.0;
  int k = 0;
  int n_samples = 0;
};

struct SelectionConfig {
  int n = 100;
  double epsilon = 0.95;
  int top_k = 1;
  std::uint64_t seed = 0;
  bool spectral_norm = false;  // sensitivity switch; Frobenius is the default
  void validate() const;
};

// Builds the representation matrix from n seeded-random train samples (with
// replacement) forwarded under the task's registered routing, then truncates
// the SVD at the energy threshold.
SubspaceBasis compute_subspace(const ModelState& state, const ModulePool& pool,
                               const TaskSpec& task, const SelectionConfig& config);

// Q = ||B_old B_old' B_new|| / ||B_new||, the captured fraction of the new
// basis inside the old subspace. Directional: Q(new->old) only.
double subspace_similarity(const SubspaceBasis& b_new, const SubspaceBasis& b_old,
                           bool spectral_norm = false);

// Task ids of the K highest-scoring stored bases, descending; ties toward the
// earlier-learned task. Returns all tasks when fewer than K exist.
std::vector<std::string> top_k_similar(const std::vector<SubspaceBasis>& stored,
                                       const SubspaceBasis& b_new, int k,
                                       bool spectral_norm = false);

// Bases in creation order, written once per task and never refreshed.
class BasisStore {
 public:
  void add(SubspaceBasis basis);
  bool has(const std::string& task) const;
  const SubspaceBasis& get(const std::string& task) const;
  const std::vector<SubspaceBasis>& all() const { return bases_; }

  // JSON index plus one binary block file per task under `dir`.
  void save(const std::string& dir) const;
  static BasisStore load(const std::string& dir);

 private:
  std::vector<SubspaceBasis> bases_;
};

}  // namespace dmea
