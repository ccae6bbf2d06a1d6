#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xptlab/tensor.hpp"

namespace xptlab {

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double step_size = 200.0;
  double momentum_early = 0.5;
  double momentum_late = 0.8;
  std::uint64_t seed = 0;
  /// The KL objective is recorded every this many iterations and at the end.
  std::size_t kl_every = 1;

  /// Throws InputError unless 1 < perplexity < n/3 and iterations >= the
  /// exaggeration phase (at least 250).
  void validate(std::size_t n) const;
  friend bool operator==(const TsneConfig&, const TsneConfig&) = default;
};

struct Affinities {
  Tensor p;  // [n × n], symmetric, zero diagonal, sums to 1
  /// Perplexity achieved by each row's conditional distribution.
  std::vector<double> row_perplexity;
  /// Rows that duplicated an earlier row and were jittered by 1e-10.
  std::size_t jittered_rows = 0;
};

/// Symmetric SNE input affinities. Each row's Gaussian bandwidth is bisected
/// (at most 50 steps) until its perplexity is within 1e-5 of the target.
Affinities pairwise_affinities(const Tensor& x, double perplexity, std::uint64_t jitter_seed = 0);

struct TsneResult {
  Tensor y;  // [n × 2]
  /// KL(P‖Q) against the un-exaggerated P, evaluated at the positions
  /// entering iteration kl_iterations[k] (1-based).
  std::vector<double> kl;
  std::vector<std::size_t> kl_iterations;
  std::size_t jittered_rows = 0;
};

/// Exact O(n²) t-SNE from a PCA initialization.
TsneResult tsne(const Tensor& x, const TsneConfig& cfg);

/// Mean silhouette coefficient of `labels` under Euclidean distance.
double silhouette_score(const Tensor& x, std::span<const int> labels);

/// Decision line w·y + b = 0 in the 2-D embedding; w·y + b > 0 predicts 1.
struct Boundary {
  double w[2] = {0.0, 0.0};
  double b = 0.0;
  int lang = 0;

  int predict(double y0, double y1) const { return w[0] * y0 + w[1] * y1 + b > 0.0 ? 1 : 0; }
};

struct LogisticFit {
  Boundary boundary;
  double loss = 0.0;
  std::size_t iterations = 0;
  std::vector<double> loss_trace;  // objective after each accepted step
};

/// Mean logistic loss plus (l2/2)|w|², minimised by full-batch gradient
/// descent with backtracking until the loss moves by less than 1e-10 or 1e5
/// iterations pass. Single-class labels -> InputError.
LogisticFit fit_logistic(const Tensor& y, std::span<const int> labels, double l2 = 1e-3, int lang = 0);

/// The objective fit_logistic minimises, for external checks.
double logistic_objective(const Tensor& y, std::span<const int> labels, const Boundary& boundary, double l2);

/// Fraction of rows of `y` that `boundary` labels correctly.
double boundary_accuracy(const Boundary& boundary, const Tensor& y, std::span<const int> labels);

struct AlignmentScore {
  std::vector<std::vector<double>> angle;  // radians in [0, π/2]
  std::vector<std::vector<double>> cross_accuracy;  // [a][b]: boundary a on language b's points
  double mean_angle = 0.0;
  double mean_cross_accuracy = 0.0;

  /// Mean over b != a of cross_accuracy[b][a]: how well the other boundaries
  /// separate language a's points.
  double cross_accuracy_on(std::size_t a) const;
};

/// Angles between boundary normals (sign-free) and cross accuracies. Needs
/// at least two languages and one point set per boundary.
AlignmentScore boundary_alignment(std::span<const Boundary> boundaries, std::span<const Tensor> points,
                                  std::span<const std::vector<int>> labels);

struct ScatterPanel {
  std::string title;
  Tensor y;  // [n × 2]
  std::vector<int> labels;
  std::vector<int> langs;
  std::vector<Boundary> boundaries;
};

/// SVG document with the panels side by side. Marker shape encodes the
/// language, fill colour the label; boundaries are clipped to each panel's
/// data box. Output is a pure function of the input.
std::string render_scatter_svg(std::span<const ScatterPanel> panels);
void emit_scatter(std::span<const ScatterPanel> panels, const std::filesystem::path& path);

}  // namespace xptlab
