#include "partvit/evalsuite/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "partvit/common/rng.hpp"
#include "partvit/errors.hpp"

namespace partvit {

double tar_at_far(const ScoreSet& scores, double far) {
  if (scores.genuine.empty() || scores.impostor.empty()) {
    throw ContractError("tar_at_far: genuine and impostor scores must be non-empty");
  }
  if (!(far >= 0.0 && far <= 1.0)) throw ContractError("tar_at_far: far must lie in [0, 1]");
  const std::size_t n = scores.impostor.size();
  if (far > 0.0 && static_cast<double>(n) < 1.0 / far) {
    spdlog::warn("tar_at_far: {} impostors are too few for far={}", n, far);
  }
  // At most `allowed` impostors may reach the threshold.
  const auto allowed = static_cast<std::size_t>(std::floor(far * static_cast<double>(n) + 1e-9));
  if (allowed >= n) return 1.0;
  std::vector<double> imp = scores.impostor;
  std::nth_element(imp.begin(), imp.begin() + static_cast<std::ptrdiff_t>(allowed), imp.end(), std::greater<>());
  const double cut = imp[allowed];  // tau sits just above this score
  const auto accepted = std::count_if(scores.genuine.begin(), scores.genuine.end(), [&](double s) { return s > cut; });
  return static_cast<double>(accepted) / static_cast<double>(scores.genuine.size());
}

namespace {

double best_threshold(const std::vector<double>& scores, const std::vector<bool>& same) {
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates;
  candidates.push_back(sorted.front() - 1.0);
  for (std::size_t i = 1; i < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i - 1] + sorted[i]));
  candidates.push_back(sorted.back() + 1.0);

  double best = candidates.front();
  std::size_t best_correct = 0;
  for (double t : candidates) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= t) == same[i];
    if (correct > best_correct) {
      best_correct = correct;
      best = t;
    }
  }
  return best;
}

}  // namespace

double verification_accuracy_kfold(const std::vector<double>& scores, const std::vector<bool>& same,
                                   const std::vector<std::size_t>& folds, std::size_t num_folds) {
  if (scores.size() != same.size() || scores.size() != folds.size()) {
    throw DimensionError("verification: scores, labels and folds differ in length");
  }
  if (num_folds < 2) throw ContractError("verification: need at least two folds");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t f = 0; f < num_folds; ++f) {
    std::vector<double> train_scores;
    std::vector<bool> train_same;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (folds[i] >= num_folds) throw ContractError("verification: fold index out of range");
      if (folds[i] != f) {
        train_scores.push_back(scores[i]);
        train_same.push_back(same[i]);
      }
    }
    std::size_t correct = 0, count = 0;
    if (train_scores.empty()) continue;
    const double t = best_threshold(train_scores, train_same);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (folds[i] != f) continue;
      correct += (scores[i] >= t) == same[i];
      ++count;
    }
    if (count == 0) continue;
    total += static_cast<double>(correct) / static_cast<double>(count);
    ++used;
  }
  if (used == 0) throw ContractError("verification: no fold has both train and test pairs");
  return total / static_cast<double>(used);
}

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero vector");
  return dot / std::sqrt(na * nb);
}

double verification_accuracy_kfold(const std::vector<VerificationPair>& pairs,
                                   const std::unordered_map<std::string, std::vector<float>>& embeddings,
                                   std::size_t num_folds) {
  std::vector<double> scores;
  std::vector<bool> same;
  std::vector<std::size_t> folds;
  auto lookup = [&](const std::string& id) -> const std::vector<float>& {
    const auto it = embeddings.find(id);
    if (it == embeddings.end()) throw ContractError("verification: missing embedding for '" + id + "'");
    return it->second;
  };
  for (const auto& p : pairs) {
    scores.push_back(cosine_similarity(lookup(p.id_a), lookup(p.id_b)));
    same.push_back(p.same);
    folds.push_back(p.fold);
  }
  return verification_accuracy_kfold(scores, same, folds, num_folds);
}

std::vector<VerificationPair> make_verification_pairs(const std::vector<std::string>& ids,
                                                      const std::vector<std::size_t>& labels,
                                                      std::size_t num_pairs, std::size_t num_folds,
                                                      std::uint64_t seed) {
  if (ids.size() != labels.size()) throw DimensionError("make_verification_pairs: ids and labels differ");
  if (num_folds == 0) throw ContractError("make_verification_pairs: zero folds");
  std::vector<std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (labels[i] >= by_label.size()) by_label.resize(labels[i] + 1);
    by_label[labels[i]].push_back(i);
  }
  std::vector<std::size_t> multi, present;
  for (std::size_t l = 0; l < by_label.size(); ++l) {
    if (!by_label[l].empty()) present.push_back(l);
    if (by_label[l].size() >= 2) multi.push_back(l);
  }
  if (multi.empty() || present.size() < 2) {
    throw ContractError("make_verification_pairs: need an identity with two images and two identities");
  }
  auto rng = make_rng({seed, 21});
  auto pick = [&](const std::vector<std::size_t>& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
  std::vector<VerificationPair> out;
  for (std::size_t k = 0; k < num_pairs; ++k) {
    VerificationPair p;
    p.same = k % 2 == 0;
    if (p.same) {
      const auto& members = by_label[pick(multi)];
      const std::size_t a = pick(members);
      std::size_t b = a;
      while (b == a) b = pick(members);
      p.id_a = ids[a];
      p.id_b = ids[b];
    } else {
      const std::size_t la = pick(present);
      std::size_t lb = la;
      while (lb == la) lb = pick(present);
      p.id_a = ids[pick(by_label[la])];
      p.id_b = ids[pick(by_label[lb])];
    }
    p.fold = (k / 2) % num_folds;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::size_t> rank1_assign(const std::vector<std::vector<float>>& probes,
                                      const std::vector<std::vector<float>>& gallery) {
  if (gallery.empty()) throw ContractError("rank1: empty gallery");
  const std::size_t d = gallery.front().size();
  Eigen::MatrixXd g(gallery.size(), d), p(probes.size(), d);
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    if (gallery[i].size() != d) throw DimensionError("rank1: gallery rows differ in length");
    for (std::size_t k = 0; k < d; ++k) g(i, k) = gallery[i][k];
  }
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (probes[i].size() != d) throw DimensionError("rank1: probe and gallery dimensions differ");
    for (std::size_t k = 0; k < d; ++k) p(i, k) = probes[i][k];
  }
  g.rowwise().normalize();
  p.rowwise().normalize();
  const Eigen::MatrixXd sim = p * g.transpose();
  std::vector<std::size_t> out(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < gallery.size(); ++j) {
      if (sim(i, j) > sim(i, best)) best = j;
    }
    out[i] = best;
  }
  return out;
}

double rank1_identification(const std::vector<std::vector<float>>& probes,
                            const std::vector<std::size_t>& probe_labels,
                            const std::vector<std::vector<float>>& gallery,
                            const std::vector<std::size_t>& gallery_labels) {
  if (probes.size() != probe_labels.size() || gallery.size() != gallery_labels.size()) {
    throw DimensionError("rank1: embeddings and labels differ in count");
  }
  if (probes.empty()) return 0.0;
  const auto assign = rank1_assign(probes, gallery);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) hits += gallery_labels[assign[i]] == probe_labels[i];
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

OverlapStats overlap_rate(const std::vector<std::array<double, 2>>& centers, double patch_size) {
  if (!(patch_size >= 1.0)) throw ContractError("overlap_rate: patch size must be >= 1");
  const std::size_t r = centers.size();
  if (r < 2) throw ContractError("overlap_rate: need at least two landmarks");
  std::vector<double> rates(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t nearest = i == 0 ? 1 : 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < r; ++j) {
      if (j == i) continue;
      const double dx = centers[i][0] - centers[j][0], dy = centers[i][1] - centers[j][1];
      const double dist = dx * dx + dy * dy;
      if (dist < best) {
        best = dist;
        nearest = j;
      }
    }
    const double ox = std::max(0.0, patch_size - std::abs(centers[i][0] - centers[nearest][0]));
    const double oy = std::max(0.0, patch_size - std::abs(centers[i][1] - centers[nearest][1]));
    rates[i] = ox * oy / (patch_size * patch_size);
  }
  OverlapStats s;
  s.mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(r);
  for (double v : rates) s.variance += (v - s.mean) * (v - s.mean);
  s.variance /= static_cast<double>(r);
  return s;
}

OverlapStats overlap_rate_normalized(const std::vector<std::array<double, 2>>& landmarks, double width,
                                     double height, double patch_size) {
  std::vector<std::array<double, 2>> px(landmarks.size());
  for (std::size_t i = 0; i < landmarks.size(); ++i) px[i] = {landmarks[i][0] * width, landmarks[i][1] * height};
  return overlap_rate(px, patch_size);
}

OverlapStats aggregate_overlap(const std::vector<OverlapStats>& per_image) {
  OverlapStats s;
  if (per_image.empty()) return s;
  for (const auto& o : per_image) s.mean += o.mean;
  s.mean /= static_cast<double>(per_image.size());
  for (const auto& o : per_image) s.variance += (o.mean - s.mean) * (o.mean - s.mean);
  s.variance /= static_cast<double>(per_image.size());
  return s;
}

ForwardErrorResult forward_error(const LandmarkEvalSet& set) {
  if (set.predicted.size() != set.truth.size()) throw DimensionError("forward_error: prediction/truth count mismatch");
  if (set.train.empty() || set.test.empty()) throw ContractError("forward_error: empty train or test split");
  const std::size_t r = set.predicted[set.train.front()].size();
  const std::size_t g = set.truth[set.train.front()].size();
  if (g < 2) throw ContractError("forward_error: need at least two ground-truth points");
  auto check = [&](std::size_t i) {
    if (i >= set.predicted.size()) throw ContractError("forward_error: split index out of range");
    if (set.predicted[i].size() != r || set.truth[i].size() != g) {
      throw DimensionError("forward_error: inconsistent point counts at image " + std::to_string(i));
    }
  };
  auto design = [&](const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd x(idx.size(), 2 * r + 1);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      check(idx[n]);
      for (std::size_t k = 0; k < r; ++k) {
        x(n, 2 * k) = set.predicted[idx[n]][k][0];
        x(n, 2 * k + 1) = set.predicted[idx[n]][k][1];
      }
      x(n, 2 * r) = 1.0;
    }
    return x;
  };
  const Eigen::MatrixXd x = design(set.train);
  Eigen::MatrixXd y(set.train.size(), 2 * g);
  for (std::size_t n = 0; n < set.train.size(); ++n) {
    for (std::size_t k = 0; k < g; ++k) {
      y(n, 2 * k) = set.truth[set.train[n]][k][0];
      y(n, 2 * k + 1) = set.truth[set.train[n]][k][1];
    }
  }

  ForwardErrorResult result;
  Eigen::MatrixXd coef;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() == x.cols()) {
    coef = qr.solve(y);
  } else {
    spdlog::warn("forward_error: design matrix has rank {} < {}, using ridge 1e-6", qr.rank(), x.cols());
    result.regularized = true;
    const Eigen::MatrixXd gram =
        x.transpose() * x + 1e-6 * Eigen::MatrixXd::Identity(x.cols(), x.cols());
    coef = gram.ldlt().solve(x.transpose() * y);
  }

  const Eigen::MatrixXd pred = design(set.test) * coef;
  double total = 0.0;
  for (std::size_t n = 0; n < set.test.size(); ++n) {
    const auto& t = set.truth[set.test[n]];
    const double iod = std::hypot(t[0][0] - t[1][0], t[0][1] - t[1][1]);
    if (!(iod > 0.0)) throw NumericError("forward_error: zero inter-ocular distance at image " + std::to_string(set.test[n]));
    for (std::size_t k = 0; k < g; ++k) {
      total += std::hypot(pred(n, 2 * k) - t[k][0], pred(n, 2 * k + 1) - t[k][1]) / iod;
    }
  }
  result.error_percent = 100.0 * total / static_cast<double>(set.test.size() * g);
  return result;
}

}  // namespace partvit
