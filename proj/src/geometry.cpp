#include "tsdpo/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/SVD>

#include "tsdpo/data.hpp"

namespace tsdpo {

namespace {

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_real(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(line, "not a number: '" + s + "'");
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  return out;
}

// Lines of a CSV file with comments dropped; the header must match.
std::vector<std::pair<std::size_t, std::string>> read_rows(const std::string& path, const std::string& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDependency(path);
  std::vector<std::pair<std::size_t, std::string>> rows;
  std::string line;
  std::size_t n = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      if (line != header) throw DataError(n, "expected header '" + header + "'");
      seen_header = true;
      continue;
    }
    rows.emplace_back(n, line);
  }
  if (!seen_header) throw DataError(0, path + ": no header");
  return rows;
}

// (Sigma + ridge I)^-1/2 for a symmetric positive semi-definite Sigma.
Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& sigma, double ridge) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sigma, Eigen::ComputeFullU);
  const Eigen::VectorXd s = (svd.singularValues().array() + ridge).rsqrt();
  return svd.matrixU() * s.asDiagonal() * svd.matrixU().transpose();
}

Index centered_rank(const Eigen::MatrixXd& centered) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const Eigen::VectorXd& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  const double tol = s[0] * 1e-10 * static_cast<double>(std::max(centered.rows(), centered.cols()));
  return (s.array() > tol).count();
}

}  // namespace

std::optional<double> cosine_similarity(const Vector<double>& a, const Vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  const double sa = a.dot(a), sb = b.dot(b);
  if (std::sqrt(sa) < 1e-12 || std::sqrt(sb) < 1e-12) return std::nullopt;
  // sqrt(sa * sb) keeps cos(a, a) == 1 exactly; split only if the product leaves range
  const double prod = sa * sb;
  const double denom = std::isnormal(prod) ? std::sqrt(prod) : std::sqrt(sa) * std::sqrt(sb);
  return std::clamp(a.dot(b) / denom, -1.0, 1.0);
}

template <std::floating_point Scalar>
std::vector<LayerGeometry> layer_cosine_and_norms(const TaskVector<Scalar>& tau_a,
                                                  const TaskVector<Scalar>& tau_b,
                                                  const ParamStore<Scalar>& layout) {
  tau_a.check_layout(layout);
  tau_b.check_layout(layout);
  // concatenated block vectors in layout (name) order
  std::map<std::pair<int, Block>, std::pair<std::vector<double>, std::vector<double>>> blocks;
  for (const auto& [name, a] : tau_a.tensors) {
    const ParamTags& tags = layout.tags(name);
    if (!tags.layer || (tags.block != Block::Attn && tags.block != Block::Mlp)) continue;
    auto& [va, vb] = blocks[{*tags.layer, tags.block}];
    const auto& b = tau_b.tensors.at(name);
    for (Index i = 0; i < a.size(); ++i) {
      va.push_back(static_cast<double>(a[i]));
      vb.push_back(static_cast<double>(b[i]));
    }
  }
  std::vector<LayerGeometry> out;
  for (const auto& [key, v] : blocks) {
    const Eigen::Map<const Vector<double>> a(v.first.data(), static_cast<Index>(v.first.size()));
    const Eigen::Map<const Vector<double>> b(v.second.data(), static_cast<Index>(v.second.size()));
    out.push_back({key.first, key.second, cosine_similarity(a, b), a.norm(), b.norm()});
  }
  return out;
}

template <std::floating_point Scalar>
ActivationDeltas collect_activation_deltas(const ParamStore<Scalar>& base, const TaskVector<Scalar>& tau,
                                           bool tangent, const std::vector<Tokens>& prompts,
                                           std::string label) {
  tau.check_layout(base);
  const Index dim = base.config().dim;
  ActivationDeltas out{std::move(label), Eigen::MatrixXd(static_cast<Index>(prompts.size()), dim)};
  std::optional<ParamStore<Scalar>> moved;
  if (!tangent) moved = apply_delta(base, tau);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Vector<Scalar> row;
    if (tangent) {
      row = hidden_states_linearized(base, tau, prompts[i]).tangent.data();
    } else {
      row = hidden_states(*moved, prompts[i]).data() - hidden_states(base, prompts[i]).data();
    }
    out.rows.row(static_cast<Index>(i)) = row.template cast<double>().transpose();
  }
  return out;
}

int default_cca_components(Index n, Index dim) {
  return static_cast<int>(std::min<Index>({dim, n - 1, 20}));
}

CcaResult cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k, double ridge) {
  const Index n = x.rows();
  if (y.rows() != n) throw DataError(0, "cca: row counts differ");
  if (n <= 1) throw DataError(0, "cca: need at least two rows");
  if (!(ridge >= 0) || !std::isfinite(ridge)) throw ConfigError("cca: ridge must be finite and >= 0");
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  if (k <= 0) k = default_cca_components(n, std::min(x.cols(), y.cols()));
  const Index attainable = std::min(centered_rank(xc), centered_rank(yc));
  if (k > attainable || k >= n)
    throw DataError(0, "cca: k=" + std::to_string(k) + " exceeds the attainable rank " + std::to_string(attainable));

  // unnormalized scatter: the ridge stays negligible as n grows
  const Eigen::MatrixXd sxx = xc.transpose() * xc;
  const Eigen::MatrixXd syy = yc.transpose() * yc;
  const Eigen::MatrixXd sxy = xc.transpose() * yc;
  const Eigen::MatrixXd t = inverse_sqrt(sxx, ridge) * sxy * inverse_sqrt(syy, ridge);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(t);
  std::vector<double> rho(svd.singularValues().data(), svd.singularValues().data() + svd.singularValues().size());
  for (double& r : rho) r = std::clamp(r, 0.0, 1.0);
  std::sort(rho.begin(), rho.end(), std::greater<>());
  rho.resize(static_cast<std::size_t>(k));
  return {std::move(rho), k, ridge};
}

void write_spectrum_csv(const std::vector<LabeledSpectrum>& spectra, const std::string& path,
                        const std::vector<std::string>& header_notes) {
  for (const auto& s : spectra)
    if (s.result.k != spectra.front().result.k) throw DataError(0, "spectrum: mismatched k across results");
  std::ofstream out = open_out(path);
  for (const auto& note : header_notes) out << "# " << note << "\n";
  out << "component,correlation,label\n";
  for (const auto& s : spectra)
    for (std::size_t i = 0; i < s.result.correlations.size(); ++i)
      out << i + 1 << "," << real(s.result.correlations[i]) << "," << s.label << "\n";
}

std::vector<LabeledSpectrum> read_spectrum_csv(const std::string& path) {
  std::vector<LabeledSpectrum> out;
  for (const auto& [n, line] : read_rows(path, "component,correlation,label")) {
    const auto cells = split_csv(line);
    if (cells.size() != 3) throw DataError(n, "spectrum: expected 3 columns");
    if (out.empty() || out.back().label != cells[2]) out.push_back({cells[2], {}});
    auto& r = out.back().result;
    r.correlations.push_back(parse_real(cells[1], n));
    r.k = static_cast<int>(r.correlations.size());
  }
  return out;
}

void write_layer_csv(const std::vector<LayerGeometry>& rows, const std::string& path,
                     const std::vector<std::string>& header_notes) {
  std::ofstream out = open_out(path);
  for (const auto& note : header_notes) out << "# " << note << "\n";
  out << "layer,block,cosine,norm_a,norm_b\n";
  for (const auto& r : rows)
    out << r.layer << "," << block_name(r.block) << "," << (r.cosine ? real(*r.cosine) : "") << ","
        << real(r.norm_a) << "," << real(r.norm_b) << "\n";
}

std::vector<LayerGeometry> read_layer_csv(const std::string& path) {
  std::vector<LayerGeometry> out;
  for (const auto& [n, line] : read_rows(path, "layer,block,cosine,norm_a,norm_b")) {
    const auto cells = split_csv(line);
    if (cells.size() != 5) throw DataError(n, "layer geometry: expected 5 columns");
    LayerGeometry g;
    g.layer = static_cast<int>(parse_real(cells[0], n));
    g.block = parse_block(cells[1]);
    if (!cells[2].empty()) g.cosine = parse_real(cells[2], n);
    g.norm_a = parse_real(cells[3], n);
    g.norm_b = parse_real(cells[4], n);
    out.push_back(g);
  }
  return out;
}

#define TSDPO_INSTANTIATE(S)                                                                        \
  template std::vector<LayerGeometry> layer_cosine_and_norms<S>(                                    \
      const TaskVector<S>&, const TaskVector<S>&, const ParamStore<S>&);                            \
  template ActivationDeltas collect_activation_deltas<S>(const ParamStore<S>&, const TaskVector<S>&, \
                                                         bool, const std::vector<Tokens>&, std::string);

TSDPO_INSTANTIATE(double)
TSDPO_INSTANTIATE(float)

#undef TSDPO_INSTANTIATE

}  // namespace tsdpo
