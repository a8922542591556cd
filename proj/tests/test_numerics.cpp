#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dmea/numerics.hpp"

using namespace dmea;

TEST_CASE("svd identity and diagonal cases") {
  Matrix eye = Matrix::Identity(2, 2);
  SvdResult r = svd(eye);
  CHECK(r.singular_values[0] == doctest::Approx(1.0));
  CHECK(r.singular_values[1] == doctest::Approx(1.0));

  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = 1.0;
  r = svd(d);
  CHECK(r.singular_values[0] == doctest::Approx(3.0));
  CHECK(r.singular_values[1] == doctest::Approx(1.0));
  // axis vectors with positive sign under the fixed convention
  CHECK(r.left_singular_vectors(0, 0) == doctest::Approx(1.0));
  CHECK(r.left_singular_vectors(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("svd reconstruction, orthonormality and sign determinism") {
  Rng rng(7);
  Matrix m = rng.normal_matrix(8, 5, 1.0);
  SvdResult r = svd(m);
  Matrix rec = r.left_singular_vectors * r.singular_values.asDiagonal() *
               r.right_singular_vectors.transpose();
  CHECK((rec - m).norm() / m.norm() <= tol::kSvdReconstructRel);
  Matrix gram = r.left_singular_vectors.transpose() * r.left_singular_vectors;
  CHECK((gram - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() <= tol::kOrthonormal);
  for (Eigen::Index i = 1; i < r.singular_values.size(); ++i) {
    CHECK(r.singular_values[i] <= r.singular_values[i - 1]);
  }
  // largest-magnitude entry of every left vector is positive
  for (Eigen::Index j = 0; j < r.left_singular_vectors.cols(); ++j) {
    Eigen::Index imax;
    r.left_singular_vectors.col(j).cwiseAbs().maxCoeff(&imax);
    CHECK(r.left_singular_vectors(imax, j) > 0.0);
  }
  SvdResult again = svd(m);
  CHECK((again.left_singular_vectors - r.left_singular_vectors).norm() == 0.0);

  Matrix bad = m;
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(svd(bad), InvalidInput);
}

TEST_CASE("rank_for_energy hand-computed and edge cases") {
  Vector s(3);
  s << 2.0, 1.0, 1.0;  // energies 4/6, 5/6, 6/6
  CHECK(rank_for_energy(s, 0.95) == 3);
  CHECK(rank_for_energy(s, 0.6) == 1);
  CHECK(rank_for_energy(s, 0.8) == 2);

  Vector one(3);
  one << 1.0, 0.0, 0.0;
  CHECK(rank_for_energy(one, 0.5) == 1);
  CHECK(rank_for_energy(one, 1.0) == 1);

  Vector unsorted(2);
  unsorted << 3.0, 4.0;
  CHECK_THROWS_AS(rank_for_energy(unsorted, 0.9), InvalidInput);
  CHECK_THROWS_AS(rank_for_energy(Vector::Zero(3), 0.9), InvalidInput);
}

TEST_CASE("rank_for_energy monotone in epsilon") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<double> vals;
    for (int i = 0; i < n; ++i) vals.push_back(rng.uniform() * 3.0);
    std::sort(vals.begin(), vals.end(), std::greater<>());
    if (vals[0] == 0.0) vals[0] = 1.0;
    Vector s = Eigen::Map<Vector>(vals.data(), n);
    int prev = 0;
    for (double eps : {0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0}) {
      const int k = rank_for_energy(s, eps);
      CHECK(k >= prev);
      prev = k;
    }
  }
}

TEST_CASE("softmax_weights examples and properties") {
  Vector equal = Vector::Ones(3);
  Vector w = softmax_weights(equal);
  for (int i = 0; i < 3; ++i) CHECK(w[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Vector single(1);
  single << 5.0;
  CHECK(softmax_weights(single)[0] == doctest::Approx(1.0));

  Vector two(2);
  two << std::log(2.0), 0.0;
  w = softmax_weights(two);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  CHECK_THROWS_AS(softmax_weights(Vector()), InvalidInput);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 8);
    Vector c = rng.normal_matrix(n, 1, 4.0).col(0);
    Vector out = softmax_weights(c);
    CHECK(std::abs(out.sum() - 1.0) <= tol::kSoftmaxSum);
    for (int i = 0; i < n; ++i) {
      CHECK(out[i] > 0.0);
      CHECK(out[i] <= 1.0);
    }
    Vector shifted = softmax_weights((c.array() + 17.5).matrix());
    CHECK((shifted - out).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("cosine_similarity examples and scale invariance") {
  Vector u(3), v(3);
  u << 1, 2, 3;
  CHECK(cosine_similarity(u, u) == doctest::Approx(1.0));
  u << 1, 0, 0;
  v << 0, 1, 0;
  CHECK(cosine_similarity(u, v) == doctest::Approx(0.0));
  u << 1, 1, 0;
  v << 1, 0, 0;
  CHECK(cosine_similarity(u, v) == doctest::Approx(1.0 / std::sqrt(2.0)));

  CHECK_THROWS_AS(cosine_similarity(Vector::Zero(3), v), InvalidInput);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Vector a = rng.normal_matrix(6, 1, 1.0).col(0);
    Vector b = rng.normal_matrix(6, 1, 1.0).col(0);
    const double base = cosine_similarity(a, b);
    const double s1 = 0.01 + rng.uniform() * 10.0;
    const double s2 = 0.01 + rng.uniform() * 10.0;
    CHECK(std::abs(cosine_similarity((s1 * a).eval(), (s2 * b).eval()) - base) <= 1e-9);
    CHECK(std::abs(cosine_similarity(b, a) - base) <= 1e-12);
  }
}

TEST_CASE("frobenius_norm") {
  CHECK(frobenius_norm(Matrix::Zero(2, 3)) == 0.0);
  CHECK(frobenius_norm(Matrix::Identity(3, 3)) == doctest::Approx(std::sqrt(3.0)));
  Matrix m(1, 2);
  m << 3, 4;
  CHECK(frobenius_norm(m) == doctest::Approx(5.0));
}

TEST_CASE("finite_difference_gradient oracle") {
  auto square = [](const Vector& x) { return x[0] * x[0]; };
  Vector x(1);
  x << 3.0;
  Vector g = finite_difference_gradient(square, x, 1e-5);
  CHECK(std::abs(g[0] - 6.0) <= 1e-6);

  auto constant = [](const Vector&) { return 4.2; };
  Vector x3 = Vector::Ones(3);
  g = finite_difference_gradient(constant, x3, 1e-5);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);

  auto sine = [](const Vector& x) { return std::sin(x[0]); };
  Vector x0 = Vector::Zero(1);
  g = finite_difference_gradient(sine, x0, 1e-5);
  CHECK(std::abs(g[0] - 1.0) <= 1e-6);

  // agrees with analytic derivatives of a polynomial
  auto poly = [](const Vector& x) { return 2.0 * x[0] * x[0] * x[0] - x[0] * x[1] + 4.0 * x[1]; };
  Vector p(2);
  p << 1.3, -0.7;
  g = finite_difference_gradient(poly, p, 1e-5);
  const double g0 = 6.0 * p[0] * p[0] - p[1];
  const double g1 = -p[0] + 4.0;
  CHECK(std::abs(g[0] - g0) / std::abs(g0) <= 1e-6);
  CHECK(std::abs(g[1] - g1) / std::abs(g1) <= 1e-6);

  auto bad = [](const Vector& x) { return std::log(x[0]); };
  Vector neg(1);
  neg << -1.0;
  CHECK_THROWS_AS(finite_difference_gradient(bad, neg, 1e-5), NumericalFailure);
}

TEST_CASE("rng determinism and checksum") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng c(42);
  Matrix m1 = c.normal_matrix(4, 4, 1.0);
  Rng d(42);
  Matrix m2 = d.normal_matrix(4, 4, 1.0);
  CHECK(checksum(m1) == checksum(m2));
  m2(0, 0) = std::nextafter(m2(0, 0), 1e300);
  CHECK(checksum(m1) != checksum(m2));
  CHECK(Rng::derive_seed(1, {2, 3}) != Rng::derive_seed(1, {3, 2}));
}
