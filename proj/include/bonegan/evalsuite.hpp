#pragma once

// Real-vs-generated comparison: per-parameter summaries, PCA of the
// standardized parameter space, Tukey HSD and report emission.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bonegan/error.hpp"
#include "bonegan/morphometry.hpp"
#include "bonegan/stats.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::evalsuite {

using morphometry::ParamVector;

inline const std::vector<std::string>& known_labels() {
  static const std::vector<std::string> l{"real", "gan", "wgan_gp", "pwgan_gp", "wgan_clip"};
  return l;
}

struct GroupSample {
  std::string label;
  std::vector<ParamVector> params;

  void validate() const {
    if (label.empty()) throw InvalidInput("group label must not be empty");
    if (params.empty()) throw InvalidInput("group '" + label + "' is empty");
  }
};

// Evaluation always binarizes at the fixed 225 mg/cm^3 threshold.
inline std::vector<ParamVector> evaluate(const std::vector<volcore::NormalizedPatch>& patches,
                                         const volcore::CalibrationRange& range = {}) {
  std::vector<ParamVector> out;
  out.reserve(patches.size());
  for (const auto& p : patches)
    out.push_back(morphometry::compute_all(volcore::denormalize(p, range), morphometry::Threshold{}));
  return out;
}

// Values of one parameter, skipping samples where it is undefined.
inline std::vector<double> column(const std::vector<ParamVector>& ps, int parameter) {
  if (parameter < 0 || parameter >= 7) throw InvalidInput("parameter index out of range");
  std::vector<double> v;
  v.reserve(ps.size());
  for (const auto& p : ps)
    if (auto x = p.as_array()[static_cast<std::size_t>(parameter)]) v.push_back(*x);
  return v;
}

// Rows (samples) x selected parameters; samples with any undefined selected
// parameter are dropped and counted.
struct ParamMatrix {
  Eigen::MatrixXd data;
  std::size_t dropped = 0;
};

inline std::vector<int> all_parameters() { return {0, 1, 2, 3, 4, 5, 6}; }

inline ParamMatrix to_matrix(const std::vector<ParamVector>& ps, const std::vector<int>& params) {
  std::vector<std::vector<double>> rows;
  std::size_t dropped = 0;
  for (const auto& p : ps) {
    const auto a = p.as_array();
    std::vector<double> r;
    for (int i : params) {
      if (i < 0 || i >= 7) throw InvalidInput("parameter index out of range");
      if (!a[static_cast<std::size_t>(i)]) break;
      r.push_back(*a[static_cast<std::size_t>(i)]);
    }
    if (r.size() == params.size())
      rows.push_back(std::move(r));
    else
      ++dropped;
  }
  ParamMatrix m;
  m.dropped = dropped;
  m.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(params.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < params.size(); ++c)
      m.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

// PCA ---------------------------------------------------------------------

struct PcaModel {
  Eigen::VectorXd mean;           // real-group moments used for standardization
  Eigen::VectorXd sd;
  Eigen::MatrixXd components;     // parameters x k, orthonormal columns
  Eigen::VectorXd explained;      // ratios of the k retained components
  Eigen::VectorXd all_explained;  // ratios of every component
  bool fitted = false;

  int k() const { return static_cast<int>(components.cols()); }
  double cumulative() const { return explained.sum(); }

  void require_fitted() const {
    if (!fitted) throw InvalidInput("PCA model is not fitted");
  }
  Eigen::VectorXd standardize(const Eigen::VectorXd& x) const {
    require_fitted();
    if (x.size() != mean.size()) throw InvalidInput("parameter vector length does not match the PCA model");
    return (x - mean).cwiseQuotient(sd);
  }
  Eigen::VectorXd project(const Eigen::VectorXd& x) const { return components.transpose() * standardize(x); }
  Eigen::MatrixXd project_rows(const Eigen::MatrixXd& rows) const {
    Eigen::MatrixXd out(rows.rows(), k());
    for (Eigen::Index r = 0; r < rows.rows(); ++r) out.row(r) = project(rows.row(r).transpose()).transpose();
    return out;
  }
  Eigen::VectorXd reconstruct(const Eigen::VectorXd& scores) const {
    require_fitted();
    if (scores.size() != k()) throw InvalidInput("score vector length does not match the PCA model");
    return (components * scores).cwiseProduct(sd) + mean;
  }
};

inline PcaModel pca_fit(const Eigen::MatrixXd& real, int k = 2) {
  const auto n = real.rows(), p = real.cols();
  if (k < 1) throw InvalidInput("k must be >= 1");
  if (p < k) throw InvalidInput("need at least k parameters");
  if (n < k + 1) throw InvalidInput("need at least k+1 samples");
  if (!real.allFinite()) throw InvalidInput("non-finite parameter value");

  PcaModel m;
  m.mean = real.colwise().mean().transpose();
  const Eigen::MatrixXd centered = real.rowwise() - m.mean.transpose();
  m.sd = (centered.colwise().squaredNorm() / static_cast<double>(n - 1)).cwiseSqrt().transpose();
  for (Eigen::Index c = 0; c < p; ++c)
    if (!(m.sd(c) > 1e-12 * std::max(1.0, std::abs(m.mean(c)))))
      throw InvalidInput("rank deficient: parameter " + std::to_string(c) + " is constant");
  const Eigen::MatrixXd z = centered.array().rowwise() / m.sd.transpose().array();
  const Eigen::MatrixXd cov = z.transpose() * z / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw InvalidInput("eigendecomposition failed");
  // Eigen returns ascending eigenvalues; flip to descending.
  Eigen::VectorXd vals = es.eigenvalues().reverse().cwiseMax(0.0);
  Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  const double total = vals.sum();
  if (!(vals(k - 1) > 1e-12 * total)) throw InvalidInput("rank deficient: fewer than k non-degenerate components");
  for (Eigen::Index c = 0; c < vecs.cols(); ++c) {
    // Sign convention: largest-magnitude loading positive.
    Eigen::Index arg;
    vecs.col(c).cwiseAbs().maxCoeff(&arg);
    if (vecs(arg, c) < 0) vecs.col(c) *= -1.0;
  }
  m.all_explained = vals / total;
  m.explained = m.all_explained.head(k);
  m.components = vecs.leftCols(k);
  m.fitted = true;
  return m;
}

// Tukey ---------------------------------------------------------------------

struct TukeyResult {
  std::vector<std::string> labels;
  stats::HsdResult hsd;

  std::size_t index(const std::string& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    throw InvalidInput("no group labelled '" + label + "'");
  }
  double p_value(const std::string& a, const std::string& b) const { return hsd.p_value(index(a), index(b)); }
  bool significant(const std::string& a, const std::string& b) const {
    return p_value(a, b) < hsd.alpha;
  }
};

inline TukeyResult tukey_test(const std::vector<GroupSample>& groups, int parameter, double alpha = 0.05) {
  if (groups.size() < 2) throw InvalidInput("Tukey test needs at least two groups");
  TukeyResult r;
  std::vector<std::vector<double>> cols;
  for (const auto& g : groups) {
    g.validate();
    if (std::find(r.labels.begin(), r.labels.end(), g.label) != r.labels.end())
      throw InvalidInput("duplicate group label '" + g.label + "'");
    r.labels.push_back(g.label);
    cols.push_back(column(g.params, parameter));
  }
  r.hsd = stats::tukey_hsd(cols, alpha);
  return r;
}

// Report --------------------------------------------------------------------

// Display scaling: BV/TV is shown in percent, p-values in percent.
inline double display_scale(int parameter) { return parameter == 2 ? 100.0 : 1.0; }
inline const char* display_unit(int parameter) {
  static const char* units[7] = {"mg/cm3", "mg/cm3", "%", "mg/cm3", "mm", "mm", "um"};
  return units[parameter];
}
inline const char* display_name(int parameter) {
  static const char* names[7] = {"BMD", "BMD.SD", "BV/TV", "TMD", "MIL", "Tb.Sp", "Tb.Th"};
  return names[parameter];
}

struct Cell {
  std::size_t n = 0;
  double mean = std::nan("");
  double sd = std::nan("");
  std::optional<double> p_vs_real;  // absent for the real column
  bool significant = false;
};

struct ReportRow {
  int parameter = 0;
  std::vector<Cell> cells;  // one per group
  std::optional<std::string> note;
};

struct ScatterPoint {
  std::string label;
  double pc1 = 0, pc2 = 0;
};

struct Report {
  std::vector<std::string> labels;  // "real" first
  std::vector<ReportRow> rows;
  double alpha = 0.05;
  std::optional<PcaModel> pca;
  std::vector<ScatterPoint> scatter;
  std::optional<std::string> pca_note;
};

struct ReportOptions {
  double alpha = 0.05;
  std::vector<int> pca_parameters = all_parameters();
};

inline Report summary_report(const std::vector<GroupSample>& groups, const ReportOptions& opts = {}) {
  auto real_it = std::find_if(groups.begin(), groups.end(), [](const auto& g) { return g.label == "real"; });
  if (real_it == groups.end()) throw InvalidInput("report needs a group labelled 'real'");
  std::vector<GroupSample> ordered{*real_it};
  for (const auto& g : groups)
    if (&g != &*real_it) ordered.push_back(g);
  for (const auto& g : ordered) g.validate();

  Report rep;
  rep.alpha = opts.alpha;
  for (const auto& g : ordered) rep.labels.push_back(g.label);

  for (int param = 0; param < 7; ++param) {
    ReportRow row;
    row.parameter = param;
    for (const auto& g : ordered) {
      const auto v = column(g.params, param);
      Cell c;
      c.n = v.size();
      if (!v.empty()) {
        double s = 0;
        for (double x : v) s += x;
        c.mean = s / static_cast<double>(v.size());
        if (v.size() > 1) {
          double ss = 0;
          for (double x : v) ss += (x - c.mean) * (x - c.mean);
          c.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
      }
      row.cells.push_back(c);
    }
    if (ordered.size() >= 2) {
      try {
        const auto t = tukey_test(ordered, param, opts.alpha);
        for (std::size_t g = 1; g < ordered.size(); ++g) {
          row.cells[g].p_vs_real = t.hsd.p_value(0, g);
          row.cells[g].significant = *row.cells[g].p_vs_real < opts.alpha;
        }
      } catch (const Error& e) {
        row.note = e.what();
      }
    }
    rep.rows.push_back(std::move(row));
  }

  try {
    const auto real = to_matrix(ordered[0].params, opts.pca_parameters);
    auto model = pca_fit(real.data, 2);
    for (const auto& g : ordered) {
      const auto m = to_matrix(g.params, opts.pca_parameters);
      const auto proj = model.project_rows(m.data);
      for (Eigen::Index r = 0; r < proj.rows(); ++r) rep.scatter.push_back({g.label, proj(r, 0), proj(r, 1)});
    }
    rep.pca = std::move(model);
  } catch (const Error& e) {
    rep.pca_note = e.what();
  }
  return rep;
}

namespace detail {
inline std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
inline int digits_for(int parameter) { return parameter == 4 || parameter == 5 ? 3 : 2; }
}  // namespace detail

// The rendered cells, shared by every output format.
struct RenderedTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> body;
};

inline RenderedTable render_table(const Report& r) {
  RenderedTable t;
  t.header.push_back("parameter");
  t.header.push_back("unit");
  for (std::size_t g = 0; g < r.labels.size(); ++g) {
    t.header.push_back(r.labels[g] + " mean");
    t.header.push_back(r.labels[g] + " sd");
    if (g > 0) t.header.push_back(r.labels[g] + " p(%)");
  }
  for (const auto& row : r.rows) {
    const double s = display_scale(row.parameter);
    const int d = detail::digits_for(row.parameter);
    std::vector<std::string> line{display_name(row.parameter), display_unit(row.parameter)};
    for (std::size_t g = 0; g < row.cells.size(); ++g) {
      const auto& c = row.cells[g];
      line.push_back(detail::fixed(c.mean * s, d));
      line.push_back(detail::fixed(c.sd * s, d));
      if (g > 0) line.push_back(c.p_vs_real ? detail::fixed(*c.p_vs_real * 100.0, 2) : "NA");
    }
    t.body.push_back(std::move(line));
  }
  return t;
}

inline std::string to_csv(const Report& r) {
  const auto t = render_table(r);
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << cells[i] << (i + 1 < cells.size() ? "," : "\n");
  };
  emit(t.header);
  for (const auto& b : t.body) emit(b);
  return os.str();
}

// Markdown with the same cells; p-values that are not significant (the
// generated group is indistinguishable from real) are bolded.
inline std::string to_markdown(const Report& r) {
  const auto t = render_table(r);
  std::ostringstream os;
  os << "|";
  for (const auto& h : t.header) os << " " << h << " |";
  os << "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i) os << " --- |";
  os << "\n";
  for (std::size_t row = 0; row < t.body.size(); ++row) {
    os << "|";
    std::size_t col = 2;
    for (std::size_t i = 0; i < 2; ++i) os << " " << t.body[row][i] << " |";
    for (std::size_t g = 0; g < r.labels.size(); ++g) {
      os << " " << t.body[row][col++] << " |";
      os << " " << t.body[row][col++] << " |";
      if (g > 0) {
        const auto& c = r.rows[row].cells[g];
        const auto& cell = t.body[row][col++];
        const bool bold = c.p_vs_real && !c.significant;
        os << " " << (bold ? "**" + cell + "**" : cell) << " |";
      }
    }
    os << "\n";
  }
  os << "\nBold p-values: no significant difference from real (alpha = " << r.alpha << ", Tukey HSD).\n";
  for (const auto& row : r.rows)
    if (row.note) os << "\n" << display_name(row.parameter) << ": " << *row.note << "\n";
  if (r.pca) {
    os << "\nPCA on real patches: PC1 " << detail::fixed(r.pca->explained(0) * 100.0, 2) << "%, PC2 "
       << detail::fixed(r.pca->explained(1) * 100.0, 2) << "%, cumulative "
       << detail::fixed(r.pca->cumulative() * 100.0, 2) << "%\n";
  } else if (r.pca_note) {
    os << "\nPCA unavailable: " << *r.pca_note << "\n";
  }
  return os.str();
}

inline std::string scatter_csv(const Report& r) {
  std::ostringstream os;
  os.precision(10);
  os << "group,pc1,pc2\n";
  for (const auto& p : r.scatter) os << p.label << "," << p.pc1 << "," << p.pc2 << "\n";
  return os.str();
}

inline void write_report(const Report& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& s) {
    volcore::detail::write_file_atomic(dir / name, std::span<const std::uint8_t>(
                                                       reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  put("report.csv", to_csv(r));
  put("report.md", to_markdown(r));
  put("pc_scatter.csv", scatter_csv(r));
}

}  // namespace bonegan::evalsuite
