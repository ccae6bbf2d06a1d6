#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "xptlab/projection.hpp"

namespace xptlab {

namespace {

constexpr double kPerplexityTol = 1e-5;
constexpr int kMaxBisection = 50;
constexpr double kJitter = 1e-10;

void require_points(const Tensor& x, const char* op) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected [n × d], got " + shape_str(x.shape()));
  if (!x.all_finite()) throw InputError(std::string(op) + ": non-finite input");
}

// Perturbs rows equal to an earlier row until all rows are distinct.
std::size_t jitter_duplicates(Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, kJitter);
  std::size_t jittered = 0;
  for (;;) {
    std::map<std::vector<double>, std::size_t> seen;
    bool clean = true;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      std::vector<double> key(x.row(i).begin(), x.row(i).end());
      if (seen.emplace(std::move(key), i).second) continue;
      for (double& v : x.row(i)) v += noise(rng);
      ++jittered;
      clean = false;
    }
    if (clean) return jittered;
  }
}

// Perplexity exp(H) of the row distribution ∝ exp(-beta · d) (natural-log
// entropy). Fills `p` with the normalised distribution.
double row_perplexity(std::span<const double> d, std::size_t self, double beta, std::span<double> p) {
  double z = 0.0;
  double weighted = 0.0;
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (j == self) {
      p[j] = 0.0;
      continue;
    }
    p[j] = std::exp(-beta * d[j]);
    z += p[j];
    weighted += d[j] * p[j];
  }
  for (double& v : p) v /= z;
  return std::exp(std::log(z) + beta * weighted / z);
}

}  // namespace

void TsneConfig::validate(std::size_t n) const {
  if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n) / 3.0)) {
    throw InputError("tsne: perplexity " + std::to_string(perplexity) + " must lie in (1, n/3) for n = " +
                     std::to_string(n));
  }
  if (exaggeration_iterations < 250 || iterations < exaggeration_iterations) {
    throw InputError("tsne: need iterations >= exaggeration phase >= 250");
  }
  if (!(step_size > 0.0) || !(exaggeration >= 1.0)) throw InputError("tsne: step size and exaggeration must be positive");
  if (kl_every < 1) throw InputError("tsne: kl_every must be >= 1");
  if (momentum_early < 0.0 || momentum_early >= 1.0 || momentum_late < 0.0 || momentum_late >= 1.0) {
    throw InputError("tsne: momentum must lie in [0, 1)");
  }
}

Affinities pairwise_affinities(const Tensor& input, double perplexity, std::uint64_t jitter_seed) {
  require_points(input, "pairwise_affinities");
  const std::size_t n = input.rows();
  if (n < 4) throw InputError("pairwise_affinities: need at least 4 points");
  if (!(perplexity > 1.0) || perplexity > static_cast<double>(n - 1)) {
    throw InputError("pairwise_affinities: perplexity must lie in (1, n-1]");
  }
  Tensor x = input;
  Affinities out;
  out.jittered_rows = jitter_duplicates(x, jitter_seed);

  const std::size_t dim = x.cols();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data().data() + i * dim;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* xj = x.data().data() + j * dim;
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) s += (xi[c] - xj[c]) * (xi[c] - xj[c]);
      dist[i * n + j] = s;
      dist[j * n + i] = s;
    }
  }

  Tensor cond({n, n});
  out.row_perplexity.resize(n);
  std::vector<double> shifted(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Shift by the nearest distance so the largest weight is exp(0); the
    // conditional distribution is unchanged.
    double nearest = std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) nearest = std::min(nearest, dist[i * n + j]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      shifted[j] = j == i ? 0.0 : dist[i * n + j] - nearest;
      mean += shifted[j];
    }
    mean /= static_cast<double>(n - 1);
    const double unit = mean > 0.0 ? 1.0 / mean : 1.0;
    // Bisection on log(beta / unit).
    double lo = -40.0;
    double hi = 40.0;
    double achieved = 0.0;
    auto row = cond.row(i);
    for (int step = 0; step < kMaxBisection; ++step) {
      const double mid = 0.5 * (lo + hi);
      achieved = row_perplexity(shifted, i, unit * std::exp(mid), row);
      if (std::abs(achieved - perplexity) < kPerplexityTol) break;
      if (achieved > perplexity) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    out.row_perplexity[i] = achieved;
  }

  out.p = Tensor({n, n});
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.p(i, j) = i == j ? 0.0 : (cond(i, j) + cond(j, i)) / denom;
    }
  }
  return out;
}

TsneResult tsne(const Tensor& x, const TsneConfig& cfg) {
  require_points(x, "tsne");
  const std::size_t n = x.rows();
  cfg.validate(n);
  const Affinities aff = pairwise_affinities(x, cfg.perplexity, cfg.seed);
  const Tensor& p = aff.p;

  // PCA initialisation, scaled to a tiny spread.
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto xm = Eigen::Map<const RowMat>(x.data().data(), static_cast<Eigen::Index>(n),
                                           static_cast<Eigen::Index>(x.cols()));
  const RowMat centered = xm.rowwise() - xm.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd basis(cov.rows(), 2);
  for (int k = 0; k < 2; ++k) {
    const Eigen::Index col = cov.cols() - 1 - std::min<Eigen::Index>(k, cov.cols() - 1);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    basis.col(k) = v;
  }
  const RowMat init = centered * basis;
  const double spread = std::sqrt(init.col(0).squaredNorm() / static_cast<double>(n));
  const double s = spread > 0.0 ? 1e-4 / spread : 1.0;
  Eigen::ArrayXd ay0(static_cast<Eigen::Index>(n)), ay1(static_cast<Eigen::Index>(n));
  auto& y0 = ay0;
  auto& y1 = ay1;
  for (std::size_t i = 0; i < n; ++i) {
    y0[i] = s * init(static_cast<Eigen::Index>(i), 0);
    y1[i] = s * init(static_cast<Eigen::Index>(i), 1);
  }

  double p_log_p = 0.0;
  for (double v : p.data()) {
    if (v > 0.0) p_log_p += v * std::log(v);
  }

  using Vec = Eigen::ArrayXd;
  const auto en = static_cast<Eigen::Index>(n);
  Vec u0 = Vec::Zero(en), u1 = Vec::Zero(en), gain0 = Vec::Ones(en), gain1 = Vec::Ones(en), g0(en), g1(en);
  Vec dx(en), dy(en), q(en), c(en);
  TsneResult result;
  result.jittered_rows = aff.jittered_rows;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const bool early = it < cfg.exaggeration_iterations;
    const double exag = early ? cfg.exaggeration : 1.0;
    const double momentum = early ? cfg.momentum_early : cfg.momentum_late;

    const bool record_kl = (it + 1) % cfg.kl_every == 0 || it + 1 == cfg.iterations;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto dx = y0[i] - ay0;
      const auto dy = y1[i] - ay1;
      z += (1.0 / (1.0 + dx.square() + dy.square())).sum() - 1.0;  // drop the j == i term
    }
    const double inv_z = 1.0 / z;

    double p_log_q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto pi = Eigen::Map<const Eigen::ArrayXd>(p.data().data() + i * n, static_cast<Eigen::Index>(n));
      dx = y0[i] - ay0;
      dy = y1[i] - ay1;
      q = 1.0 + dx.square() + dy.square();
      c = (exag * pi - inv_z / q) / q;
      g0[i] = 4.0 * (c * dx).sum();
      g1[i] = 4.0 * (c * dy).sum();
      if (record_kl) p_log_q += (pi * q.log()).sum();
    }
    if (record_kl) {
      // KL(P‖Q) = Σ p log p - Σ p log q, with log q = -log(1 + d²) - log Z.
      result.kl.push_back(p_log_p + p_log_q + std::log(z));
      result.kl_iterations.push_back(it + 1);
    }

    auto step = [&](Vec& y, Vec& u, Vec& gain, const Vec& g) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        gain[i] = (g[i] > 0.0) != (u[i] > 0.0) ? gain[i] + 0.2 : gain[i] * 0.8;
        gain[i] = std::max(gain[i], 0.01);
        u[i] = momentum * u[i] - cfg.step_size * gain[i] * g[i];
        y[i] += u[i];
        mean += y[i];
      }
      y -= mean / static_cast<double>(n);
    };
    step(y0, u0, gain0, g0);
    step(y1, u1, gain1, g1);
  }

  result.y = Tensor({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    result.y(i, 0) = y0[i];
    result.y(i, 1) = y1[i];
  }
  return result;
}

double silhouette_score(const Tensor& x, std::span<const int> labels) {
  require_points(x, "silhouette_score");
  const std::size_t n = x.rows();
  if (labels.size() != n) throw DimensionError("silhouette_score: one label per row required");
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw InputError("silhouette_score: need at least two clusters");
  const std::size_t dim = x.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, double> sum;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      sum[labels[j]] += std::sqrt(s);
    }
    const std::size_t own = sizes[labels[i]];
    if (own < 2) continue;  // singleton clusters score 0
    const double a = sum[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, count] : sizes) {
      if (label != labels[i]) b = std::min(b, sum[label] / static_cast<double>(count));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

}  // namespace xptlab
