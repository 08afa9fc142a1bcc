#include <Eigen/Dense>
#include <cmath>

#include "todsynth/errors.hpp"
#include "todsynth/synthpipe.hpp"

namespace todsynth {

namespace {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Gaussian fit(const FeatureMatrix& rows, const char* which) {
  if (rows.size() < 2) throw DimensionError(std::string("frechet_distance: set ") + which + " needs at least 2 rows");
  const std::size_t d = rows.front().size();
  if (d == 0) throw DimensionError("frechet_distance: features are empty");
  Eigen::MatrixXd x(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw DimensionError(std::string("frechet_distance: ragged rows in set ") + which);
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(rows[i][j])) throw NumericalError(std::string("non-finite feature in set ") + which, -1);
      x(i, j) = rows[i][j];
    }
  }
  Gaussian g;
  g.mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - g.mean.transpose();
  g.cov = centred.transpose() * centred / static_cast<double>(rows.size() - 1);
  g.cov.diagonal().array() += 1e-6;
  return g;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Tr((A B)^1/2) via the symmetric A^1/2 B A^1/2.
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::MatrixXd ra = sqrt_psd(a);
  const Eigen::MatrixXd s = ra * b * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (s + s.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b) {
  const Gaussian ga = fit(a, "a"), gb = fit(b, "b");
  if (ga.mean.size() != gb.mean.size()) {
    throw DimensionError("frechet_distance: feature widths " + std::to_string(ga.mean.size()) + " and " +
                         std::to_string(gb.mean.size()) + " differ");
  }
  const double mean_term = (ga.mean - gb.mean).squaredNorm();
  const double tr = ga.cov.trace() + gb.cov.trace();
  const double fd_ab = mean_term + tr - 2.0 * trace_sqrt_product(ga.cov, gb.cov);
  const double fd_ba = mean_term + tr - 2.0 * trace_sqrt_product(gb.cov, ga.cov);
  const double scale = std::max(1.0, tr);
  if (!std::isfinite(fd_ab) || std::abs(fd_ab - fd_ba) > 1e-6 * scale || fd_ab < -1e-6 * scale) {
    throw NumericalError("frechet_distance: symmetry or non-negativity violated", -1);
  }
  return std::max(0.0, 0.5 * (fd_ab + fd_ba));
}

}  // namespace todsynth
