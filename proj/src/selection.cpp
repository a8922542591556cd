#include "dmea/selection.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace dmea {

using nlohmann::json;

void SelectionConfig::validate() const {
  if (n < 1) throw InvalidInput("SelectionConfig: n must be >= 1");
  if (epsilon <= 0.0 || epsilon > 1.0) throw InvalidInput("SelectionConfig: epsilon outside (0,1]");
  if (top_k < 1) throw InvalidInput("SelectionConfig: K must be >= 1");
}

SubspaceBasis compute_subspace(const ModelState& state, const ModulePool& pool,
                               const TaskSpec& task, const SelectionConfig& config) {
  config.validate();
  if (task.train.empty()) throw InvalidState("compute_subspace: task has no train data");
  const Routing routing = pool.task_routing(task.task_id);

  const int m = state.config.hidden_width;
  Matrix reps(m, config.n);
  Rng rng(Rng::derive_seed(config.seed, {Rng::hash_string(task.task_id),
                                         Rng::hash_string("subspace")}));
  for (int i = 0; i < config.n; ++i) {
    const Sample& s = task.train[rng.uniform_int(0, static_cast<int>(task.train.size()) - 1)];
    EncodedSample enc = encode(s, task, false);
    // Representation of the generation prompt: everything up to and
    // including the <ans> marker.
    std::vector<int> prompt(enc.tokens.begin(), enc.tokens.begin() + enc.answer_start + 1);
    ForwardTrace trace = forward(state, prompt, routing);
    reps.col(i) = last_token_representation(trace, prompt);
  }
  if (reps.norm() == 0.0) throw InvalidState("compute_subspace: degenerate representations");

  SvdResult dec = svd(reps);
  const int k = rank_for_energy(dec.singular_values, config.epsilon);
  SubspaceBasis basis;
  basis.task_id = task.task_id;
  basis.basis = dec.left_singular_vectors.leftCols(k);
  basis.epsilon = config.epsilon;
  basis.k = k;
  basis.n_samples = config.n;
  return basis;
}

double subspace_similarity(const SubspaceBasis& b_new, const SubspaceBasis& b_old,
                           bool spectral_norm) {
  if (b_new.basis.rows() != b_old.basis.rows()) {
    throw InvalidInput("subspace_similarity: representation width mismatch");
  }
  // Projection of the new basis onto the old subspace.
  Matrix projected = b_old.basis * (b_old.basis.transpose() * b_new.basis);
  if (spectral_norm) {
    const double denom = svd(b_new.basis).singular_values.maxCoeff();
    return svd(projected).singular_values.maxCoeff() / denom;
  }
  return projected.norm() / b_new.basis.norm();
}

std::vector<std::string> top_k_similar(const std::vector<SubspaceBasis>& stored,
                                       const SubspaceBasis& b_new, int k,
                                       bool spectral_norm) {
  if (stored.empty()) throw InvalidState("top_k_similar: no previous tasks");
  std::vector<std::pair<double, int>> scored;  // (Q, creation index)
  for (int i = 0; i < static_cast<int>(stored.size()); ++i) {
    scored.emplace_back(subspace_similarity(b_new, stored[i], spectral_norm), i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // earlier-learned task wins ties
  });
  std::vector<std::string> out;
  const int take = std::min<int>(k, static_cast<int>(scored.size()));
  for (int i = 0; i < take; ++i) out.push_back(stored[scored[i].second].task_id);
  return out;
}

void BasisStore::add(SubspaceBasis basis) {
  if (has(basis.task_id)) {
    throw InvalidState("BasisStore: basis for " + basis.task_id + " already stored");
  }
  bases_.push_back(std::move(basis));
}

bool BasisStore::has(const std::string& task) const {
  return std::any_of(bases_.begin(), bases_.end(),
                     [&](const SubspaceBasis& b) { return b.task_id == task; });
}

const SubspaceBasis& BasisStore::get(const std::string& task) const {
  for (const auto& b : bases_) {
    if (b.task_id == task) return b;
  }
  throw InvalidState("BasisStore: no basis for " + task);
}

void BasisStore::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json index = json::object();
  for (const auto& b : bases_) {
    index[b.task_id] = {{"k", b.k}, {"epsilon", b.epsilon}, {"n", b.n_samples}};
    std::ofstream os(fs::path(dir) / (b.task_id + ".bin"), std::ios::binary);
    if (!os) throw IoError("BasisStore: cannot write basis block for " + b.task_id);
    const std::uint64_t rows = static_cast<std::uint64_t>(b.basis.rows());
    const std::uint64_t cols = static_cast<std::uint64_t>(b.basis.cols());
    os.write(reinterpret_cast<const char*>(&rows), 8);
    os.write(reinterpret_cast<const char*>(&cols), 8);
    for (Eigen::Index i = 0; i < b.basis.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.basis.cols(); ++j) {
        const double v = b.basis(i, j);
        os.write(reinterpret_cast<const char*>(&v), 8);
      }
    }
  }
  // creation order matters for tie-breaks, keep it explicit
  json order = json::array();
  for (const auto& b : bases_) order.push_back(b.task_id);
  json root = {{"tasks", index}, {"order", order}};
  std::ofstream os(fs::path(dir) / "index.json");
  if (!os) throw IoError("BasisStore: cannot write index");
  os << root.dump(2) << "\n";
}

BasisStore BasisStore::load(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "index.json");
  if (!is) throw IoError("BasisStore: missing index in " + dir);
  json root = json::parse(is);
  BasisStore store;
  for (const auto& task : root.at("order")) {
    const std::string id = task.get<std::string>();
    const json& meta = root.at("tasks").at(id);
    SubspaceBasis b;
    b.task_id = id;
    b.k = meta.at("k").get<int>();
    b.epsilon = meta.at("epsilon").get<double>();
    b.n_samples = meta.at("n").get<int>();
    std::ifstream bs(fs::path(dir) / (id + ".bin"), std::ios::binary);
    if (!bs) throw IoError("BasisStore: missing basis block for " + id);
    std::uint64_t rows = 0, cols = 0;
    bs.read(reinterpret_cast<char*>(&rows), 8);
    bs.read(reinterpret_cast<char*>(&cols), 8);
    b.basis.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::uint64_t i = 0; i < rows; ++i) {
      for (std::uint64_t j = 0; j < cols; ++j) {
        double v = 0;
        bs.read(reinterpret_cast<char*>(&v), 8);
        b.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      }
    }
    if (!bs) throw IoError("BasisStore: truncated basis block for " + id);
    store.add(std::move(b));
  }
  return store;
}

}  // namespace dmea
