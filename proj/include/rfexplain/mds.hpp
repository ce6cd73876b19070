#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

#include "rfexplain/error.hpp"
#include "rfexplain/random.hpp"

namespace rfexplain {

template <typename Scalar>
struct MdsResult {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> coordinates;
  Scalar stress = 0;
  std::vector<Scalar> stress_history;  // entry 0 is the initial configuration
  int iterations = 0;
};

struct MdsOptions {
  int dim = 2;
  int max_iter = 300;
  double relative_tol = 1e-9;
  std::uint64_t seed = 0;
};

// Raw stress over unordered pairs: sum (d_ij - |y_i - y_j|)^2.
template <typename DerivedD, typename DerivedY>
typename DerivedD::Scalar raw_stress(const Eigen::MatrixBase<DerivedD>& d, const Eigen::MatrixBase<DerivedY>& y) {
  using Scalar = typename DerivedD::Scalar;
  Scalar total = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < d.rows(); ++j) {
      const Scalar r = d(i, j) - (y.row(i) - y.row(j)).norm();
      total += r * r;
    }
  }
  return total;
}

// Double-centring of squared distances and the top `dim` eigenvectors scaled
// by sqrt(eigenvalue). Each axis is flipped so its largest-magnitude entry is
// positive.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> classical_scaling(
    const Eigen::MatrixBase<Derived>& d, int dim) {
  using Scalar = typename Derived::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index n = d.rows();
  const Matrix sq = d.array().square().matrix();
  const Matrix centred = sq.rowwise() - sq.colwise().mean();
  Matrix b = centred.colwise() - centred.rowwise().mean();
  b *= Scalar(-0.5);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(b);
  Matrix y = Matrix::Zero(n, dim);
  for (int k = 0; k < dim && k < n; ++k) {
    const Eigen::Index col = n - 1 - k;  // eigenvalues ascend
    const Scalar lambda = solver.eigenvalues()(col);
    if (lambda <= 0) continue;
    auto v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    const Scalar sign = v(arg) < 0 ? Scalar(-1) : Scalar(1);
    y.col(k) = sign * std::sqrt(lambda) * v;
  }
  return y;
}

// Metric MDS by stress majorization (Guttman transform) from a classical
// scaling start. A step that would raise the stress ends the iteration.
template <typename Derived>
MdsResult<typename Derived::Scalar> mds_embed(const Eigen::MatrixBase<Derived>& d, const MdsOptions& options = {}) {
  using Scalar = typename Derived::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index n = d.rows();
  if (d.cols() != n) throw DataError("mds: distance matrix is not square");
  if (options.dim < 1) throw ConfigError("mds: dimension must be at least 1");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (d(i, i) != 0) throw DataError("mds: distance matrix has a nonzero diagonal");
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Scalar scale = std::max<Scalar>(Scalar(1), std::abs(d(i, j)));
      if (std::abs(d(i, j) - d(j, i)) > Scalar(1e-12) * scale) {
        throw DataError("mds: distance matrix is not symmetric at (" + std::to_string(i) + ", " +
                        std::to_string(j) + ")");
      }
    }
  }

  MdsResult<Scalar> result;
  Matrix y = classical_scaling(d, options.dim);
  if (n > 1 && y.isZero(0)) {
    Rng rng(options.seed);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = static_cast<Scalar>(standard_normal(rng));
  }
  Scalar stress = raw_stress(d, y);
  result.stress_history.push_back(stress);

  Matrix b(n, n);
  for (int iter = 0; iter < options.max_iter && n > 1; ++iter) {
    b.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const Scalar dist = (y.row(i) - y.row(j)).norm();
        const Scalar value = dist > 0 ? -d(i, j) / dist : Scalar(0);
        b(i, j) = value;
        b(j, i) = value;
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) b(i, i) = -b.row(i).sum();
    const Matrix next = (b * y) / static_cast<Scalar>(n);
    const Scalar next_stress = raw_stress(d, next);
    if (next_stress > stress) break;
    y = next;
    const Scalar previous = stress;
    stress = next_stress;
    result.stress_history.push_back(stress);
    result.iterations = iter + 1;
    if (previous == 0 || (previous - stress) / previous < static_cast<Scalar>(options.relative_tol)) break;
  }
  result.coordinates = std::move(y);
  result.stress = stress;
  return result;
}

}  // namespace rfexplain
