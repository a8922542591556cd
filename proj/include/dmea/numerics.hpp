#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "dmea/errors.hpp"

namespace dmea {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Fixed tolerances shared by implementation checks and tests.
namespace tol {
inline constexpr double kOrthonormal = 1e-8;
inline constexpr double kSvdReconstructRel = 1e-6;
inline constexpr double kSoftmaxSum = 1e-9;
inline constexpr double kExact = 1e-9;
inline constexpr double kLossDecomposition = 1e-9;
inline constexpr double kFusionLinearity = 1e-6;
inline constexpr double kGradCheckRel = 1e-4;
inline constexpr double kGradCheckStep = 1e-4;
}  // namespace tol

void require_finite(const Matrix& m, const std::string& what);
void require_finite(const Vector& v, const std::string& what);

struct SvdResult {
  Matrix left_singular_vectors;   // m x min(m,n), orthonormal columns
  Vector singular_values;         // non-increasing, non-negative
  Matrix right_singular_vectors;  // n x min(m,n), orthonormal columns
};

// Thin SVD with a fixed sign convention: the largest-magnitude entry of every
// left-singular vector is positive.
SvdResult svd(const Matrix& r);

// Smallest k with sum_{i<k} s_i^2 >= epsilon * sum_i s_i^2. Input must be
// non-increasing and non-negative with at least one positive value.
int rank_for_energy(const Vector& singular_values, double epsilon);

Vector softmax_weights(const Vector& coefficients);

double cosine_similarity(const Vector& u, const Vector& v);

double frobenius_norm(const Matrix& m);

// Central differences, (f(x+h e_i) - f(x-h e_i)) / 2h. Test oracle for all
// analytic gradients in this codebase.
Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h);

// FNV-1a over the raw entry bytes in row-major order; used by the
// frozen-parameter integrity checks.
std::uint64_t checksum(const Matrix& m);
std::uint64_t combine_checksum(std::uint64_t a, std::uint64_t b);

// Deterministic RNG with hand-rolled distributions so results do not depend
// on the standard library's (implementation-defined) distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next();
  double uniform();              // [0, 1)
  double normal();               // standard normal, Box-Muller
  int uniform_int(int lo, int hi);  // inclusive bounds

  Matrix normal_matrix(int rows, int cols, double stddev);

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    if (v.empty()) throw InvalidInput("Rng::pick: empty vector");
    return v[uniform_int(0, static_cast<int>(v.size()) - 1)];
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(0, i)]);
    }
  }

  // Stable seed derivation for independent substreams, e.g.
  // derive_seed(base, {task_index, kStageAdapt}).
  static std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts);
  static std::uint64_t hash_string(const std::string& s);

 private:
  std::uint64_t state_;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace dmea
