#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/cc.hpp"
#include "zmesh/volume.hpp"

namespace zmesh {

// ---------------------------------------------------------------------------
// Dynamic lesion-candidate extraction
// ---------------------------------------------------------------------------

struct ExtractionParams {
  double min_confidence = 0.10;
  double relative_fraction = 0.40;  // growth threshold = rel * peak
  int max_candidates = 5;
  std::int64_t min_voxels = 10;
};

struct LesionCandidate {
  std::vector<std::int64_t> voxels;  // sorted linear indices
  double confidence = 0.0;
  std::array<double, 3> centroid{};  // (z, y, x)
};

struct ExtractionResult {
  std::vector<LesionCandidate> candidates;  // non-increasing confidence
  Volume detection_map;
  ExtractionParams params;
};

/// Iterative peak extraction: take the global maximum, grow its 26-connected
/// region above max(rel*peak, min_confidence), score the region with the
/// peak value, zero it, repeat until the peak falls below min_confidence or
/// the candidate cap is reached. Undersized regions are zeroed but not kept.
inline ExtractionResult extract_lesions(const Volume& prob,
                                        ExtractionParams params = {}) {
  if (prob.channels() != 1) {
    throw std::invalid_argument("extract_lesions: expected 1-channel map");
  }
  for (std::int64_t i = 0; i < prob.size(); ++i) {
    const float v = prob.data()[i];
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("extract_lesions: values outside [0,1]");
    }
  }
  const Dims3 d = prob.dims();
  std::vector<float> work(prob.data(), prob.data() + prob.size());

  ExtractionResult result;
  result.params = params;
  result.detection_map = Volume(1, d, prob.spacing());

  while (static_cast<int>(result.candidates.size()) < params.max_candidates) {
    std::int64_t peak_idx = 0;
    float peak = work[0];
    for (std::int64_t i = 1; i < std::int64_t(work.size()); ++i) {
      if (work[i] > peak) {
        peak = work[i];
        peak_idx = i;
      }
    }
    if (double(peak) < params.min_confidence) break;

    const double grow = std::max(params.relative_fraction * double(peak),
                                 params.min_confidence);
    // flood the peak's component above the growth threshold
    std::vector<std::int64_t> region;
    {
      std::vector<char> visited(work.size(), 0);
      std::vector<std::int64_t> stack{peak_idx};
      visited[static_cast<std::size_t>(peak_idx)] = 1;
      while (!stack.empty()) {
        const std::int64_t v = stack.back();
        stack.pop_back();
        region.push_back(v);
        const std::int64_t z = v / (d.y * d.x);
        const std::int64_t y = (v / d.x) % d.y;
        const std::int64_t x = v % d.x;
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          for (std::int64_t dy = -1; dy <= 1; ++dy) {
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
              if (!dz && !dy && !dx) continue;
              const std::int64_t nz = z + dz, ny = y + dy, nx = x + dx;
              if (nz < 0 || nz >= d.z || ny < 0 || ny >= d.y || nx < 0 ||
                  nx >= d.x) {
                continue;
              }
              const std::int64_t u = (nz * d.y + ny) * d.x + nx;
              if (!visited[static_cast<std::size_t>(u)] &&
                  double(work[static_cast<std::size_t>(u)]) >= grow) {
                visited[static_cast<std::size_t>(u)] = 1;
                stack.push_back(u);
              }
            }
          }
        }
      }
    }
    for (std::int64_t v : region) work[static_cast<std::size_t>(v)] = 0.0f;
    if (std::int64_t(region.size()) < params.min_voxels) continue;

    std::sort(region.begin(), region.end());
    LesionCandidate cand;
    cand.confidence = double(peak);
    cand.centroid = component_centroid(region, d);
    cand.voxels = std::move(region);
    for (std::int64_t v : cand.voxels) {
      result.detection_map.data()[v] = peak;
    }
    result.candidates.push_back(std::move(cand));
  }
  return result;
}

/// Case-level likelihood: the maximum of the detection map.
inline double case_score(const Volume& detection_map) {
  double best = 0.0;
  for (std::int64_t i = 0; i < detection_map.size(); ++i) {
    best = std::max(best, double(detection_map.data()[i]));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Hit matching
// ---------------------------------------------------------------------------

/// Connected components of a binary lesion mask (values > 0.5).
inline std::vector<std::vector<std::int64_t>> gt_components(const Volume& mask) {
  if (mask.channels() != 1) {
    throw std::invalid_argument("gt_components: expected 1-channel mask");
  }
  const float* m = mask.data();
  return connected_components_26(mask.dims(),
                                 [m](std::int64_t i) { return m[i] > 0.5f; });
}

inline double voxel_iou(const std::vector<std::int64_t>& a,
                        const std::vector<std::int64_t>& b) {
  // both sorted
  std::size_t ia = 0, ib = 0, inter = 0;
  while (ia < a.size() && ib < b.size()) {
    if (a[ia] == b[ib]) {
      ++inter;
      ++ia;
      ++ib;
    } else if (a[ia] < b[ib]) {
      ++ia;
    } else {
      ++ib;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

struct MatchResult {
  std::vector<bool> is_tp;  // per candidate, in the processed order
  std::vector<int> candidate_order;  // indices into the input list
  int fn = 0;
};

/// Greedy one-to-one matching in confidence order (ties broken by centroid
/// lexicographic order): a candidate hits the unmatched ground-truth lesion
/// of highest IoU when that IoU reaches iou_min.
inline MatchResult match_hits(
    const std::vector<LesionCandidate>& candidates,
    const std::vector<std::vector<std::int64_t>>& gt, double iou_min = 0.10) {
  MatchResult r;
  r.candidate_order.resize(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    r.candidate_order[i] = static_cast<int>(i);
  }
  std::sort(r.candidate_order.begin(), r.candidate_order.end(),
            [&](int a, int b) {
              if (candidates[a].confidence != candidates[b].confidence) {
                return candidates[a].confidence > candidates[b].confidence;
              }
              return candidates[a].centroid < candidates[b].centroid;
            });
  std::vector<bool> consumed(gt.size(), false);
  r.is_tp.resize(candidates.size(), false);
  for (std::size_t k = 0; k < r.candidate_order.size(); ++k) {
    const auto& cand = candidates[r.candidate_order[k]];
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (consumed[g]) continue;
      const double iou = voxel_iou(cand.voxels, gt[g]);
      if (iou > best) {
        best = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= iou_min) {
      consumed[best_gt] = true;
      r.is_tp[k] = true;
    }
  }
  for (bool c : consumed) r.fn += c ? 0 : 1;
  return r;
}

// ---------------------------------------------------------------------------
// Lesion-level metrics (AP, FROC) and patient-level AUROC
// ---------------------------------------------------------------------------

struct ScoredDetection {
  double confidence = 0.0;
  bool tp = false;
};

struct PrPoint {
  double threshold, precision, recall;
};
struct FrocPoint {
  double threshold, fp_per_case, sensitivity;
};
struct RocPoint {
  double fpr, tpr;
};

struct ApResult {
  std::optional<double> ap;  // empty when there are no ground-truth lesions
  std::vector<PrPoint> curve;
};

/// All-points step summation over the confidence sweep:
/// AP = sum_k (R_k - R_{k-1}) * P_k.
inline ApResult average_precision(std::vector<ScoredDetection> dets,
                                  std::int64_t total_gt) {
  ApResult r;
  if (total_gt <= 0) return r;  // distinct no-positives outcome
  std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    return a.confidence > b.confidence;
  });
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  std::size_t k = 0;
  while (k < dets.size()) {
    const double t = dets[k].confidence;
    for (; k < dets.size() && dets[k].confidence == t; ++k) {
      if (dets[k].tp) ++tp;
      else ++fp;
    }
    const double precision = double(tp) / double(tp + fp);
    const double recall = double(tp) / double(total_gt);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    r.curve.push_back({t, precision, recall});
  }
  r.ap = ap;
  return r;
}

/// Sensitivity vs false positives per case, one point per distinct
/// confidence threshold, ordered by increasing FP rate.
inline std::vector<FrocPoint> froc_points(std::vector<ScoredDetection> dets,
                                          std::int64_t total_gt,
                                          std::int64_t n_cases) {
  if (n_cases <= 0) throw std::invalid_argument("froc_points: no cases");
  std::vector<FrocPoint> out;
  if (total_gt <= 0) return out;
  std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    return a.confidence > b.confidence;
  });
  std::int64_t tp = 0, fp = 0;
  std::size_t k = 0;
  while (k < dets.size()) {
    const double t = dets[k].confidence;
    for (; k < dets.size() && dets[k].confidence == t; ++k) {
      if (dets[k].tp) ++tp;
      else ++fp;
    }
    out.push_back({t, double(fp) / double(n_cases), double(tp) / double(total_gt)});
  }
  return out;
}

struct AurocResult {
  std::optional<double> auroc;  // empty when labels are single-class
  std::vector<RocPoint> curve;
};

/// Mann-Whitney statistic ((concordant + ties/2) / (P*N)) computed from
/// midranks, plus the threshold-sweep ROC curve whose trapezoidal area
/// equals the pair statistic.
inline AurocResult auroc(const std::vector<double>& scores,
                         const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("auroc: scores/labels size mismatch");
  }
  std::int64_t pos = 0, neg = 0;
  for (bool l : labels) (l ? pos : neg) += 1;
  AurocResult r;
  if (pos == 0 || neg == 0) return r;  // degenerate-labels outcome

  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // midrank sum over positives
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (double(i + 1) + double(j));  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum += midrank;
    }
    i = j;
  }
  const double u = rank_sum - 0.5 * double(pos) * double(pos + 1);
  r.auroc = u / (double(pos) * double(neg));

  // ROC sweep, thresholds descending over distinct scores
  r.curve.push_back({0.0, 0.0});
  std::int64_t tp = 0, fp = 0;
  std::int64_t k = static_cast<std::int64_t>(n) - 1;
  while (k >= 0) {
    const double t = scores[order[static_cast<std::size_t>(k)]];
    while (k >= 0 && scores[order[static_cast<std::size_t>(k)]] == t) {
      if (labels[order[static_cast<std::size_t>(k)]]) ++tp;
      else ++fp;
      --k;
    }
    r.curve.push_back({double(fp) / double(neg), double(tp) / double(pos)});
  }
  return r;
}

/// Challenge ranking score: the exact mean of AP and AUROC.
inline std::optional<double> ranking_score(std::optional<double> ap,
                                           std::optional<double> auroc_value) {
  if (!ap || !auroc_value) return std::nullopt;
  return (*ap + *auroc_value) / 2.0;
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation
// ---------------------------------------------------------------------------

struct CaseEval {
  std::string id;
  std::vector<LesionCandidate> candidates;
  double score = 0.0;  // case-level likelihood
  std::vector<std::vector<std::int64_t>> gt_lesions;
  bool positive = false;
};

struct EvalReport {
  std::optional<double> ap, auroc, ranking;
  std::vector<PrPoint> pr;
  std::vector<FrocPoint> froc;
  std::vector<RocPoint> roc;
  std::vector<std::pair<std::string, double>> case_scores;
  ExtractionParams extraction;  // provenance
  double iou_min = 0.10;
  std::int64_t cases = 0, gt_lesions = 0, detections = 0;
};

inline EvalReport evaluate(const std::vector<CaseEval>& cases,
                           double iou_min = 0.10,
                           ExtractionParams extraction = {}) {
  EvalReport rep;
  rep.iou_min = iou_min;
  rep.extraction = extraction;
  rep.cases = static_cast<std::int64_t>(cases.size());

  std::vector<ScoredDetection> dets;
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& c : cases) {
    rep.gt_lesions += static_cast<std::int64_t>(c.gt_lesions.size());
    MatchResult m = match_hits(c.candidates, c.gt_lesions, iou_min);
    for (std::size_t k = 0; k < m.candidate_order.size(); ++k) {
      dets.push_back({c.candidates[m.candidate_order[k]].confidence, m.is_tp[k]});
    }
    rep.case_scores.emplace_back(c.id, c.score);
    scores.push_back(c.score);
    labels.push_back(c.positive);
  }
  rep.detections = static_cast<std::int64_t>(dets.size());

  ApResult ap = average_precision(dets, rep.gt_lesions);
  rep.ap = ap.ap;
  rep.pr = std::move(ap.curve);
  rep.froc = froc_points(dets, rep.gt_lesions, rep.cases);
  AurocResult au = auroc(scores, labels);
  rep.auroc = au.auroc;
  rep.roc = std::move(au.curve);
  rep.ranking = ranking_score(rep.ap, rep.auroc);
  return rep;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

namespace detail {
inline std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  return out;
}
}  // namespace detail

inline void write_pr_csv(const std::vector<PrPoint>& pr, const std::string& path) {
  auto out = detail::open_csv(path);
  out << "threshold,precision,recall\n";
  for (const auto& p : pr) {
    out << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
  }
}

inline void write_froc_csv(const std::vector<FrocPoint>& froc,
                           const std::string& path) {
  auto out = detail::open_csv(path);
  out << "fp_per_case,sensitivity\n";
  for (const auto& p : froc) out << p.fp_per_case << ',' << p.sensitivity << '\n';
}

inline void write_roc_csv(const std::vector<RocPoint>& roc,
                          const std::string& path) {
  auto out = detail::open_csv(path);
  out << "fpr,tpr\n";
  for (const auto& p : roc) out << p.fpr << ',' << p.tpr << '\n';
}

inline void write_candidates_csv(const std::vector<CaseEval>& cases,
                                 const std::string& path) {
  auto out = detail::open_csv(path);
  out << "case_id,confidence,voxels,cz,cy,cx\n";
  for (const auto& c : cases) {
    for (const auto& cand : c.candidates) {
      out << c.id << ',' << cand.confidence << ',' << cand.voxels.size() << ','
          << cand.centroid[0] << ',' << cand.centroid[1] << ','
          << cand.centroid[2] << '\n';
    }
  }
}

}  // namespace zmesh
