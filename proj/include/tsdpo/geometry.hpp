#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tsdpo/model.hpp"

namespace tsdpo {

struct LayerGeometry {
  int layer = 0;
  Block block = Block::Attn;
  std::optional<double> cosine;  // none when either block vector is (near) zero
  double norm_a = 0;
  double norm_b = 0;
};

/// Cosine similarity; none when either norm is below 1e-12.
std::optional<double> cosine_similarity(const Vector<double>& a, const Vector<double>& b);

/// Per (layer, attn|mlp) cosine and l2 norms of two task vectors. Throws on a
/// layout mismatch with `layout` or between the two vectors.
template <std::floating_point Scalar>
std::vector<LayerGeometry> layer_cosine_and_norms(const TaskVector<Scalar>& tau_a,
                                                  const TaskVector<Scalar>& tau_b,
                                                  const ParamStore<Scalar>& layout);

/// One last-token hidden-state delta per prompt, rows in prompt order.
struct ActivationDeltas {
  std::string label;
  Eigen::MatrixXd rows;
};

/// tangent: rows are the JVP tangent of the hidden state along tau at theta0.
/// Otherwise rows are h(theta0 + tau) - h(theta0) from two forwards.
template <std::floating_point Scalar>
ActivationDeltas collect_activation_deltas(const ParamStore<Scalar>& base, const TaskVector<Scalar>& tau,
                                           bool tangent, const std::vector<Tokens>& prompts,
                                           std::string label = {});

struct CcaResult {
  std::vector<double> correlations;  // descending, in [0, 1]
  int k = 0;
  double ridge = 0;
};

/// min(dim, n - 1, 20).
int default_cca_components(Index n, Index dim);

/// Canonical correlations of the column-centered X and Y: singular values of
/// (Sxx + ridge I)^-1/2 Sxy (Syy + ridge I)^-1/2, S the (unnormalized) scatter
/// matrices.
/// k <= 0 selects default_cca_components. Throws DataError on n <= 1,
/// mismatched rows, or k above the centered rank of either matrix.
CcaResult cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k = 0, double ridge = 1e-8);

struct LabeledSpectrum {
  std::string label;
  CcaResult result;
};

/// Columns: component,correlation,label. Throws DataError on mismatched k.
void write_spectrum_csv(const std::vector<LabeledSpectrum>& spectra, const std::string& path,
                        const std::vector<std::string>& header_notes = {});
std::vector<LabeledSpectrum> read_spectrum_csv(const std::string& path);

/// Columns: layer,block,cosine,norm_a,norm_b; an undefined cosine is empty.
void write_layer_csv(const std::vector<LayerGeometry>& rows, const std::string& path,
                     const std::vector<std::string>& header_notes = {});
std::vector<LayerGeometry> read_layer_csv(const std::string& path);

}  // namespace tsdpo
