#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace partvit {

/// Similarity scores of genuine (same identity) and impostor pairs.
struct ScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

/// Threshold tau is the smallest value with
/// #{impostor >= tau} / |impostor| <= far; returns #{genuine >= tau} / |genuine|.
/// Warns when there are fewer than 1/far impostors.
double tar_at_far(const ScoreSet& scores, double far);

struct VerificationPair {
  std::string id_a;
  std::string id_b;
  bool same = false;
  std::size_t fold = 0;  // 0-based
};

/// Each fold is scored with the threshold that maximizes accuracy on the
/// remaining folds; returns the mean held-out accuracy in [0, 1].
/// Candidate thresholds are midpoints between consecutive distinct training
/// scores plus one below and one above all of them.
double verification_accuracy_kfold(const std::vector<double>& scores, const std::vector<bool>& same,
                                   const std::vector<std::size_t>& folds, std::size_t num_folds);

/// Cosine scores of `pairs` looked up in `embeddings`; a missing id throws
/// ContractError naming it.
double verification_accuracy_kfold(const std::vector<VerificationPair>& pairs,
                                   const std::unordered_map<std::string, std::vector<float>>& embeddings,
                                   std::size_t num_folds = 10);

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);

/// Balanced genuine/impostor pairs over labelled ids, round-robin folds.
std::vector<VerificationPair> make_verification_pairs(const std::vector<std::string>& ids,
                                                      const std::vector<std::size_t>& labels,
                                                      std::size_t num_pairs, std::size_t num_folds,
                                                      std::uint64_t seed);

/// Index of the most cosine-similar gallery row for every probe; ties go to
/// the lower gallery index.
std::vector<std::size_t> rank1_assign(const std::vector<std::vector<float>>& probes,
                                      const std::vector<std::vector<float>>& gallery);

/// Fraction of probes whose nearest gallery entry carries their label.
double rank1_identification(const std::vector<std::vector<float>>& probes,
                            const std::vector<std::size_t>& probe_labels,
                            const std::vector<std::vector<float>>& gallery,
                            const std::vector<std::size_t>& gallery_labels);

struct OverlapStats {
  double mean = 0.0;
  double variance = 0.0;
};

/// For every centre (pixels), the shared area of its K x K square with the
/// square of its nearest other centre (ties to the lower index), over K^2.
OverlapStats overlap_rate(const std::vector<std::array<double, 2>>& centers, double patch_size);

/// Normalized landmarks mapped to pixels (x W, y H) first.
OverlapStats overlap_rate_normalized(const std::vector<std::array<double, 2>>& landmarks, double width,
                                     double height, double patch_size);

/// Mean of per-image means and the variance of those means.
OverlapStats aggregate_overlap(const std::vector<OverlapStats>& per_image);

using Points = std::vector<std::array<double, 2>>;

struct LandmarkEvalSet {
  std::vector<Points> predicted;  // R points per image
  std::vector<Points> truth;      // annotated points; [0] and [1] are the eyes
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct ForwardErrorResult {
  double error_percent = 0.0;
  bool regularized = false;  // design matrix was rank deficient
};

/// Least-squares affine map from predicted to true coordinates fitted on the
/// train split; mean test error per true point over the inter-ocular
/// distance, x100.
ForwardErrorResult forward_error(const LandmarkEvalSet& set);

}  // namespace partvit
