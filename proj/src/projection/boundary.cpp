#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include <fmt/format.h>

#include "xptlab/projection.hpp"

namespace xptlab {

namespace {

constexpr double kLossTol = 1e-10;
constexpr std::size_t kMaxIterations = 100000;

void require_labelled_points(const Tensor& y, std::span<const int> labels, const char* op) {
  if (y.rank() != 2 || y.cols() != 2) throw DimensionError(std::string(op) + ": expected [n × 2], got " + shape_str(y.shape()));
  if (labels.size() != y.rows()) throw DimensionError(std::string(op) + ": one label per point required");
  for (int l : labels) {
    if (l != 0 && l != 1) throw InputError(std::string(op) + ": labels must be 0 or 1");
  }
}

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Coordinates are standardised internally; theta = (v0, v1, c) describes the
// line in standard units and maps back to w = v / scale, b = c - w·center.
struct Frame {
  double center[2];
  double scale[2];

  Boundary to_boundary(const double theta[3], int lang) const {
    Boundary b;
    b.w[0] = theta[0] / scale[0];
    b.w[1] = theta[1] / scale[1];
    b.b = theta[2] - b.w[0] * center[0] - b.w[1] * center[1];
    b.lang = lang;
    return b;
  }
};

}  // namespace

double logistic_objective(const Tensor& y, std::span<const int> labels, const Boundary& bd, double l2) {
  require_labelled_points(y, labels, "logistic_objective");
  double loss = 0.0;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double z = bd.w[0] * y(i, 0) + bd.w[1] * y(i, 1) + bd.b;
    loss += softplus(z) - labels[i] * z;
  }
  return loss / static_cast<double>(y.rows()) + 0.5 * l2 * (bd.w[0] * bd.w[0] + bd.w[1] * bd.w[1]);
}

LogisticFit fit_logistic(const Tensor& y, std::span<const int> labels, double l2, int lang) {
  require_labelled_points(y, labels, "fit_logistic");
  if (!(l2 >= 0.0)) throw InputError("fit_logistic: l2 must be non-negative");
  const std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw InputError("fit_logistic: both classes must be present");
  const std::size_t n = y.rows();

  Frame frame{};
  for (int k = 0; k < 2; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += y(i, k);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (y(i, k) - mean) * (y(i, k) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    frame.center[k] = mean;
    frame.scale[k] = sd > 0.0 ? sd : 1.0;
  }
  std::vector<double> u0(n), u1(n);
  for (std::size_t i = 0; i < n; ++i) {
    u0[i] = (y(i, 0) - frame.center[0]) / frame.scale[0];
    u1[i] = (y(i, 1) - frame.center[1]) / frame.scale[1];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  // Same objective as logistic_objective, with the penalty on w = v / scale.
  auto objective = [&](const double th[3]) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = th[0] * u0[i] + th[1] * u1[i] + th[2];
      loss += softplus(z) - labels[i] * z;
    }
    const double w0 = th[0] / frame.scale[0];
    const double w1 = th[1] / frame.scale[1];
    return loss * inv_n + 0.5 * l2 * (w0 * w0 + w1 * w1);
  };
  auto gradient = [&](const double th[3], double g[3]) {
    g[0] = g[1] = g[2] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = sigmoid(th[0] * u0[i] + th[1] * u1[i] + th[2]) - labels[i];
      g[0] += r * u0[i];
      g[1] += r * u1[i];
      g[2] += r;
    }
    for (double& v : std::span(g, 3)) v *= inv_n;
    g[0] += l2 * th[0] / (frame.scale[0] * frame.scale[0]);
    g[1] += l2 * th[1] / (frame.scale[1] * frame.scale[1]);
  };

  double theta[3] = {0.0, 0.0, 0.0};
  double loss = objective(theta);
  double step = 1.0;
  LogisticFit fit;
  for (std::size_t it = 0; it < kMaxIterations; ++it) {
    double g[3];
    gradient(theta, g);
    const double gg = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
    if (gg == 0.0) break;
    // Armijo backtracking from a step twice the last accepted one.
    step *= 2.0;
    double next[3];
    double next_loss = loss;
    bool accepted = false;
    while (step > 1e-20) {
      for (int k = 0; k < 3; ++k) next[k] = theta[k] - step * g[k];
      next_loss = objective(next);
      if (next_loss <= loss - 1e-4 * step * gg) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    std::copy(next, next + 3, theta);
    const double change = loss - next_loss;
    loss = next_loss;
    fit.loss_trace.push_back(loss);
    fit.iterations = it + 1;
    if (change < kLossTol) break;
  }
  fit.boundary = frame.to_boundary(theta, lang);
  fit.loss = loss;
  return fit;
}

double boundary_accuracy(const Boundary& boundary, const Tensor& y, std::span<const int> labels) {
  require_labelled_points(y, labels, "boundary_accuracy");
  if (y.rows() == 0) throw InputError("boundary_accuracy: no points");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.rows(); ++i) correct += boundary.predict(y(i, 0), y(i, 1)) == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(y.rows());
}

double AlignmentScore::cross_accuracy_on(std::size_t a) const {
  const std::size_t k = cross_accuracy.size();
  if (a >= k || k < 2) throw IndexError("cross_accuracy_on: language index " + std::to_string(a) + " out of range");
  double total = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    if (b != a) total += cross_accuracy[b][a];
  }
  return total / static_cast<double>(k - 1);
}

AlignmentScore boundary_alignment(std::span<const Boundary> boundaries, std::span<const Tensor> points,
                                  std::span<const std::vector<int>> labels) {
  const std::size_t k = boundaries.size();
  if (k < 2) throw InputError("boundary_alignment: need at least two languages");
  if (points.size() != k || labels.size() != k) {
    throw DimensionError("boundary_alignment: one point set and label list per boundary required");
  }
  AlignmentScore s;
  s.angle.assign(k, std::vector<double>(k, 0.0));
  s.cross_accuracy.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a) {
    const double na = std::hypot(boundaries[a].w[0], boundaries[a].w[1]);
    if (na == 0.0) throw ContractError("boundary_alignment: boundary with zero normal");
    for (std::size_t b = 0; b < k; ++b) {
      s.cross_accuracy[a][b] = boundary_accuracy(boundaries[a], points[b], labels[b]);
      if (b <= a) continue;
      const double nb = std::hypot(boundaries[b].w[0], boundaries[b].w[1]);
      if (nb == 0.0) throw ContractError("boundary_alignment: boundary with zero normal");
      // Normals are sign-free: the same line has normals ±w.
      const double c = std::abs(boundaries[a].w[0] * boundaries[b].w[0] + boundaries[a].w[1] * boundaries[b].w[1]) /
                       (na * nb);
      s.angle[a][b] = s.angle[b][a] = std::acos(std::min(1.0, c));
    }
  }
  double angle_sum = 0.0, acc_sum = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a == b) continue;
      angle_sum += s.angle[a][b];
      acc_sum += s.cross_accuracy[a][b];
    }
  }
  const double pairs = static_cast<double>(k * (k - 1));
  s.mean_angle = angle_sum / pairs;
  s.mean_cross_accuracy = acc_sum / pairs;
  return s;
}

// ---- SVG -----------------------------------------------------------------------

namespace {

constexpr double kPanel = 360.0;
constexpr double kMargin = 24.0;
constexpr double kTitle = 20.0;
constexpr double kLegend = 22.0;
constexpr const char* kLabelColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
constexpr const char* kDash[] = {"", "6,3", "2,2", "8,2,2,2", "1,3"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

const char* label_color(int label) {
  const std::size_t n = std::size(kLabelColors);
  return kLabelColors[static_cast<std::size_t>(label < 0 ? -label : label) % n];
}

std::size_t shape_index(int lang) { return static_cast<std::size_t>(lang < 0 ? -lang : lang) % 5; }

// A marker of the language's shape centred at (x, y).
std::string marker(int lang, double x, double y, const char* fill) {
  constexpr double r = 2.6;
  switch (shape_index(lang)) {
    case 0: return fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"{:.1f}\" fill=\"{}\"/>", x, y, r, fill);
    case 1:
      return fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"/>", x - r,
                         y - r, 2 * r, 2 * r, fill);
    case 2:
      return fmt::format("<polygon points=\"{:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f}\" fill=\"{}\"/>", x, y - r, x - r,
                         y + r, x + r, y + r, fill);
    case 3:
      return fmt::format("<polygon points=\"{:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f}\" fill=\"{}\"/>", x,
                         y - r, x + r, y, x, y + r, x - r, y, fill);
    default:
      return fmt::format("<polygon points=\"{:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f}\" fill=\"{}\"/>", x, y + r, x - r,
                         y - r, x + r, y - r, fill);
  }
}

struct Box {
  double x0, x1, y0, y1;
};

// Segment of w·p + b = 0 inside the box, if any.
std::optional<std::array<double, 4>> clip_line(const Boundary& bd, const Box& box) {
  const double w0 = bd.w[0], w1 = bd.w[1], b = bd.b;
  if (w0 == 0.0 && w1 == 0.0) return std::nullopt;
  std::vector<std::pair<double, double>> hits;
  const double eps = 1e-9 * std::max({1.0, box.x1 - box.x0, box.y1 - box.y0});
  if (w1 != 0.0) {
    for (double x : {box.x0, box.x1}) {
      const double y = -(w0 * x + b) / w1;
      if (y >= box.y0 - eps && y <= box.y1 + eps) hits.emplace_back(x, y);
    }
  }
  if (w0 != 0.0) {
    for (double y : {box.y0, box.y1}) {
      const double x = -(w1 * y + b) / w0;
      if (x >= box.x0 - eps && x <= box.x1 + eps) hits.emplace_back(x, y);
    }
  }
  if (hits.size() < 2) return std::nullopt;
  std::ranges::sort(hits);
  const auto& a = hits.front();
  const auto& z = hits.back();
  if (std::abs(a.first - z.first) <= eps && std::abs(a.second - z.second) <= eps) return std::nullopt;
  return std::array<double, 4>{a.first, a.second, z.first, z.second};
}

}  // namespace

std::string render_scatter_svg(std::span<const ScatterPanel> panels) {
  for (const ScatterPanel& p : panels) {
    if (p.y.empty()) {
      if (!p.labels.empty() || !p.langs.empty()) throw DimensionError("scatter: labels given without points");
      continue;
    }
    if (p.y.rank() != 2 || p.y.cols() != 2) throw DimensionError("scatter: points must be [n × 2]");
    if (p.labels.size() != p.y.rows() || p.langs.size() != p.y.rows()) {
      throw DimensionError("scatter: one label and language per point required");
    }
    if (!p.y.all_finite()) throw InputError("scatter: non-finite coordinates");
  }
  const std::size_t count = std::max<std::size_t>(panels.size(), 1);
  const double width = static_cast<double>(count) * kPanel;
  const double height = kPanel + kLegend;
  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" viewBox=\"0 0 {:.0f} {:.0f}\">\n",
      width, height, width, height);
  out += fmt::format("<rect x=\"0\" y=\"0\" width=\"{:.0f}\" height=\"{:.0f}\" fill=\"#ffffff\"/>\n", width, height);

  std::set<int> all_langs, all_labels;
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const ScatterPanel& p = panels[k];
    const double ox = static_cast<double>(k) * kPanel;
    out += fmt::format("<g transform=\"translate({:.0f},0)\">\n", ox);
    out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"13\" "
                       "text-anchor=\"middle\">{}</text>\n",
                       kPanel / 2, kTitle - 5, escape_xml(p.title));
    const double plot = kPanel - 2 * kMargin;
    out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"none\" "
                       "stroke=\"#999999\"/>\n",
                       kMargin, kTitle, plot, plot - kTitle + kMargin);
    if (p.y.empty()) {
      out += "</g>\n";
      continue;
    }
    Box box{p.y(0, 0), p.y(0, 0), p.y(0, 1), p.y(0, 1)};
    for (std::size_t i = 0; i < p.y.rows(); ++i) {
      box.x0 = std::min(box.x0, p.y(i, 0));
      box.x1 = std::max(box.x1, p.y(i, 0));
      box.y0 = std::min(box.y0, p.y(i, 1));
      box.y1 = std::max(box.y1, p.y(i, 1));
    }
    const double sx = box.x1 > box.x0 ? box.x1 - box.x0 : 1.0;
    const double sy = box.y1 > box.y0 ? box.y1 - box.y0 : 1.0;
    const double inner_w = plot - 8.0;
    const double inner_h = plot - kTitle + kMargin - 8.0;
    auto px = [&](double x) { return kMargin + 4.0 + (x - box.x0) / sx * inner_w; };
    auto py = [&](double y) { return kTitle + 4.0 + (box.y1 - y) / sy * inner_h; };
    for (std::size_t i = 0; i < p.y.rows(); ++i) {
      out += marker(p.langs[i], px(p.y(i, 0)), py(p.y(i, 1)), label_color(p.labels[i]));
      out += '\n';
      all_langs.insert(p.langs[i]);
      all_labels.insert(p.labels[i]);
    }
    for (const Boundary& bd : p.boundaries) {
      const auto seg = clip_line(bd, box);
      if (!seg) continue;
      const char* dash = kDash[shape_index(bd.lang)];
      out += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#222222\" "
                         "stroke-width=\"1.2\"{}/>\n",
                         px((*seg)[0]), py((*seg)[1]), px((*seg)[2]), py((*seg)[3]),
                         *dash ? fmt::format(" stroke-dasharray=\"{}\"", dash) : std::string());
      all_langs.insert(bd.lang);
    }
    out += "</g>\n";
  }

  // Legend: one marker per language, one swatch per label.
  double lx = kMargin;
  const double ly = kPanel + kLegend / 2;
  for (int lang : all_langs) {
    out += marker(lang, lx, ly, "#555555");
    out += fmt::format("\n<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\">lang {}</text>\n",
                       lx + 6, ly + 4, lang);
    lx += 56.0;
  }
  for (int label : all_labels) {
    out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"8\" height=\"8\" fill=\"{}\"/>\n", lx, ly - 4,
                       label_color(label));
    out += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\">label {}</text>\n",
                       lx + 11, ly + 4, label);
    lx += 60.0;
  }
  out += "</svg>\n";
  return out;
}

void emit_scatter(std::span<const ScatterPanel> panels, const std::filesystem::path& path) {
  const std::string svg = render_scatter_svg(panels);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(svg.data(), static_cast<std::streamsize>(svg.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace xptlab
