#include "dmea/numerics.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <cstring>

namespace dmea {

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw InvalidInput(what + ": non-finite entry");
}

void require_finite(const Vector& v, const std::string& what) {
  if (!v.allFinite()) throw InvalidInput(what + ": non-finite entry");
}

SvdResult svd(const Matrix& r) {
  if (r.rows() == 0 || r.cols() == 0) throw InvalidInput("svd: empty matrix");
  require_finite(r, "svd");
  Eigen::JacobiSVD<Matrix> dec(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  out.left_singular_vectors = dec.matrixU();
  out.singular_values = dec.singularValues();
  out.right_singular_vectors = dec.matrixV();
  // Sign convention: largest-magnitude entry of each left vector is positive.
  for (Eigen::Index j = 0; j < out.left_singular_vectors.cols(); ++j) {
    Eigen::Index imax = 0;
    out.left_singular_vectors.col(j).cwiseAbs().maxCoeff(&imax);
    if (out.left_singular_vectors(imax, j) < 0.0) {
      out.left_singular_vectors.col(j) *= -1.0;
      out.right_singular_vectors.col(j) *= -1.0;
    }
  }
  return out;
}

int rank_for_energy(const Vector& singular_values, double epsilon) {
  const Eigen::Index n = singular_values.size();
  if (n == 0) throw InvalidInput("rank_for_energy: empty sequence");
  if (epsilon <= 0.0 || epsilon > 1.0) throw InvalidInput("rank_for_energy: epsilon outside (0,1]");
  require_finite(singular_values, "rank_for_energy");
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = singular_values[i];
    if (s < 0.0) throw InvalidInput("rank_for_energy: negative singular value");
    if (i > 0 && s > singular_values[i - 1]) {
      throw InvalidInput("rank_for_energy: values not non-increasing");
    }
    total += s * s;
  }
  if (total == 0.0) throw InvalidInput("rank_for_energy: all-zero sequence");
  const double target = epsilon * total;
  double cum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cum += singular_values[k] * singular_values[k];
    if (cum >= target) return static_cast<int>(k) + 1;
  }
  return static_cast<int>(n);  // guards against rounding on the final step
}

Vector softmax_weights(const Vector& coefficients) {
  if (coefficients.size() == 0) throw InvalidInput("softmax_weights: empty input");
  require_finite(coefficients, "softmax_weights");
  const double shift = coefficients.maxCoeff();
  Vector w = (coefficients.array() - shift).exp();
  return w / w.sum();
}

double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) throw InvalidInput("cosine_similarity: length mismatch");
  require_finite(u, "cosine_similarity");
  require_finite(v, "cosine_similarity");
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw InvalidInput("cosine_similarity: zero vector");
  return u.dot(v) / (nu * nv);
}

double frobenius_norm(const Matrix& m) {
  require_finite(m, "frobenius_norm");
  return m.norm();
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h) {
  if (h <= 0.0) throw InvalidInput("finite_difference_gradient: step must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalFailure("finite_difference_gradient: non-finite function value");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::uint64_t checksum(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  const std::uint64_t rows = static_cast<std::uint64_t>(m.rows());
  const std::uint64_t cols = static_cast<std::uint64_t>(m.cols());
  mix(&rows, sizeof rows);
  mix(&cols, sizeof cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      mix(&v, sizeof v);
    }
  }
  return h;
}

std::uint64_t combine_checksum(std::uint64_t a, std::uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
  return a;
}

std::uint64_t Rng::next() {
  // splitmix64; deterministic across platforms.
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 == 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(a);
  have_cached_normal_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
  if (lo > hi) throw InvalidInput("Rng::uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next() % span);
}

Matrix Rng::normal_matrix(int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = stddev * normal();
  }
  return m;
}

std::uint64_t Rng::derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts) {
  std::uint64_t h = base ^ 0xcbf29ce484222325ULL;
  for (std::uint64_t s : salts) {
    h ^= s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    Rng mixer(h);
    h = mixer.next();
  }
  return h;
}

std::uint64_t Rng::hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace dmea
