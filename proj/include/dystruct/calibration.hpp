#pragma once

// Estimation of the instability weights w (7 position features) and the
// boundary weights w_b (4 gap features) from decoded trajectories with ground
// truth, via L2-regularized binary cross-entropy. The objective is convex and
// small, so the optimizer is plain full-batch gradient descent with
// backtracking line search.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dystruct/core.hpp"
#include "dystruct/distribution.hpp"

namespace dystruct {

// ============================================================================
// Examples and fit configuration
// ============================================================================

struct CalibrationExample {
  std::vector<double> phi;  // feature vector; masked-out features are exactly 0
  int target = 0;           // d in {0,1}
  std::vector<std::uint8_t> available;  // feature availability mask

  void validate() const {
    require(target == 0 || target == 1, Errc::bad_argument, "calibration target must be 0/1");
    require(available.empty() || available.size() == phi.size(), Errc::dimension_mismatch,
            "availability mask length mismatch");
    for (std::size_t i = 0; i < available.size(); ++i) {
      if (!available[i]) {
        require(phi[i] == 0.0, Errc::bad_argument, "masked-out feature must be exactly 0");
      }
    }
  }
};

struct FitConfig {
  double lambda = 1e-4;      // L2 penalty
  double learning_rate = 1.0;  // initial backtracking step
  int max_iterations = 5000;
  double tolerance = 1e-6;   // on the gradient norm
};

// ============================================================================
// Loss / gradient / fit
// ============================================================================

/// Regularized BCE loss and its exact analytic gradient. log sigma is
/// evaluated through log1p so extreme logits stay finite.
inline std::pair<double, std::vector<double>> loss_and_gradient(
    std::span<const CalibrationExample> examples, std::span<const double> w, double lambda) {
  require(!examples.empty(), Errc::bad_argument, "loss_and_gradient: no examples");
  const std::size_t dim = w.size();
  double loss = 0.0;
  std::vector<double> grad(dim, 0.0);
  for (const auto& ex : examples) {
    require(ex.phi.size() == dim, Errc::dimension_mismatch,
            "loss_and_gradient: example dimension mismatch");
    double z = 0.0;
    for (std::size_t i = 0; i < dim; ++i) z += w[i] * ex.phi[i];
    // -[d log sigma(z) + (1-d) log(1 - sigma(z))], stable in both tails.
    const double log_sig = z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
    const double log_one_minus = log_sig - z;  // log sigma(-z)
    loss -= ex.target * log_sig + (1 - ex.target) * log_one_minus;
    const double resid = sigmoid(z) - ex.target;
    for (std::size_t i = 0; i < dim; ++i) grad[i] += resid * ex.phi[i];
  }
  const double n = static_cast<double>(examples.size());
  loss /= n;
  for (std::size_t i = 0; i < dim; ++i) grad[i] /= n;
  for (std::size_t i = 0; i < dim; ++i) {
    loss += lambda * w[i] * w[i];
    grad[i] += 2.0 * lambda * w[i];
  }
  return {loss, grad};
}

struct FitResult {
  std::vector<double> w;
  double loss = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  double imbalance = 0.0;  // positives / N, reported, never reweighted
};

/// Full-batch gradient descent from w = 0 with Armijo backtracking. The
/// objective is convex, so the returned loss never exceeds the loss at zero.
inline FitResult fit(std::span<const CalibrationExample> examples, const FitConfig& config) {
  require(!examples.empty(), Errc::bad_argument, "fit: no examples");
  const std::size_t dim = examples.front().phi.size();
  int positives = 0;
  for (const auto& ex : examples) {
    ex.validate();
    positives += ex.target;
  }
  require(positives > 0 && positives < static_cast<int>(examples.size()), Errc::degenerate_labels,
          "fit: needs at least one example of each class");

  FitResult result;
  result.w.assign(dim, 0.0);
  result.imbalance = static_cast<double>(positives) / static_cast<double>(examples.size());

  auto [loss, grad] = loss_and_gradient(examples, result.w, config.lambda);
  for (int iter = 0; iter < config.max_iterations; ++iter) {
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    result.gradient_norm = std::sqrt(gnorm2);
    result.iterations = iter;
    if (result.gradient_norm <= config.tolerance) break;

    double step = config.learning_rate;
    std::vector<double> candidate(dim);
    double new_loss = loss;
    std::vector<double> new_grad;
    while (true) {
      for (std::size_t i = 0; i < dim; ++i) candidate[i] = result.w[i] - step * grad[i];
      auto [l, g] = loss_and_gradient(examples, candidate, config.lambda);
      require(std::isfinite(l), Errc::non_finite_loss, "fit: loss is not finite");
      if (l <= loss - 1e-4 * step * gnorm2 || step < 1e-18) {
        new_loss = l;
        new_grad = std::move(g);
        break;
      }
      step *= 0.5;
    }
    if (step < 1e-18) break;  // no descent direction left at double precision
    result.w = candidate;
    loss = new_loss;
    grad = std::move(new_grad);
  }
  result.loss = loss;
  return result;
}

// ============================================================================
// Trajectories -> examples
// ============================================================================

/// Per-position record of one decoded trajectory: the diagnostic features
/// observed for the position, the finally committed token and whether any
/// remask event touched the position during real decoding.
struct TrajectoryPosition {
  std::array<double, 7> phi{};
  std::array<std::uint8_t, 7> available{1, 1, 1, 1, 1, 1, 1};
  TokenId final_token = -1;
  bool remasked = false;
};

struct CalibrationTrajectory {
  std::string id;
  std::vector<TokenId> truth;
  std::vector<TrajectoryPosition> positions;        // aligned with truth
  std::vector<std::array<double, 4>> gap_psi;       // one per response gap
  std::vector<std::uint8_t> gap_available;          // empty = every gap has features
  std::optional<std::vector<int>> delimiter_gaps;   // ground-truth boundaries
};

/// d = 1 iff the committed token mismatches the ground truth or the position
/// was remasked at any point while decoding.
inline std::vector<CalibrationExample> build_position_examples(
    std::span<const CalibrationTrajectory> trajectories) {
  std::vector<CalibrationExample> out;
  for (const auto& traj : trajectories) {
    require(traj.positions.size() == traj.truth.size(), Errc::dimension_mismatch,
            "build_position_examples: trajectory '" + traj.id +
                "' has mismatched trace and ground-truth lengths");
    for (std::size_t j = 0; j < traj.positions.size(); ++j) {
      const auto& pos = traj.positions[j];
      CalibrationExample ex;
      ex.phi.assign(pos.phi.begin(), pos.phi.end());
      ex.available.assign(pos.available.begin(), pos.available.end());
      ex.target = (pos.final_token != traj.truth[j] || pos.remasked) ? 1 : 0;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

/// One example per gap with recorded features; d = 1 iff the toy ground
/// truth places a segment boundary in that gap. Gaps without features (the
/// seams between expansion windows) are skipped. Requires delimiter
/// annotations.
inline std::vector<CalibrationExample> build_gap_examples(
    std::span<const CalibrationTrajectory> trajectories) {
  std::vector<CalibrationExample> out;
  for (const auto& traj : trajectories) {
    require(traj.delimiter_gaps.has_value(), Errc::bad_argument,
            "build_gap_examples: trajectory '" + traj.id + "' carries no delimiter annotations");
    for (std::size_t g = 0; g < traj.gap_psi.size(); ++g) {
      if (!traj.gap_available.empty() && !traj.gap_available[g]) continue;
      CalibrationExample ex;
      ex.phi.assign(traj.gap_psi[g].begin(), traj.gap_psi[g].end());
      ex.target = 0;
      for (int d : *traj.delimiter_gaps) {
        if (d == static_cast<int>(g)) ex.target = 1;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ============================================================================
// Weights artifact
// ============================================================================

struct WeightsArtifact {
  std::vector<double> w{1, 1, 1, 1, 1, -1, -1};  // hand-set no-calibration default
  std::vector<double> w_b{0, 0, 2, 2};           // weight only the divergence features
  nlohmann::json meta = nlohmann::json::object();

  void validate() const {
    require(w.size() == 7, Errc::dimension_mismatch, "weights artifact: w must have 7 entries");
    require(w_b.size() == 4, Errc::dimension_mismatch, "weights artifact: w_b must have 4 entries");
    for (double v : w) require(std::isfinite(v), Errc::bad_argument, "weights artifact: non-finite w");
    for (double v : w_b) require(std::isfinite(v), Errc::bad_argument, "weights artifact: non-finite w_b");
  }
};

inline nlohmann::json weights_to_json(const WeightsArtifact& a) {
  nlohmann::json j;
  j["w"] = a.w;
  j["w_b"] = a.w_b;
  j["meta"] = a.meta;
  return j;
}

inline WeightsArtifact weights_from_json(const nlohmann::json& j) {
  WeightsArtifact a;
  a.w = j.at("w").get<std::vector<double>>();
  a.w_b = j.at("w_b").get<std::vector<double>>();
  if (j.contains("meta")) a.meta = j.at("meta");
  a.validate();
  return a;
}

inline void save_weights(const std::string& path, const WeightsArtifact& a) {
  std::ofstream out(path);
  require(out.good(), Errc::io_error, "cannot write weights artifact to " + path);
  out << weights_to_json(a).dump(2) << "\n";
}

inline WeightsArtifact load_weights(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io_error, "cannot read weights artifact from " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  require(!j.is_discarded(), Errc::io_error, "weights artifact is not valid JSON: " + path);
  return weights_from_json(j);
}

}  // namespace dystruct
