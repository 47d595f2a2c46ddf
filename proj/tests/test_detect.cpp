#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "zmesh/detect.hpp"
#include "zmesh/rng.hpp"

using namespace zmesh;

namespace {

Volume prob_map(Dims3 d) { return Volume(1, d, {3.0, 0.5, 0.5}); }

void paint_box(Volume& v, Dims3 lo, Dims3 hi, float value) {
  for (std::int64_t z = lo.z; z < hi.z; ++z) {
    for (std::int64_t y = lo.y; y < hi.y; ++y) {
      for (std::int64_t x = lo.x; x < hi.x; ++x) {
        v.at(0, z, y, x) = value;
      }
    }
  }
}

std::vector<std::int64_t> box_voxels(Dims3 dims, Dims3 lo, Dims3 hi) {
  std::vector<std::int64_t> out;
  for (std::int64_t z = lo.z; z < hi.z; ++z) {
    for (std::int64_t y = lo.y; y < hi.y; ++y) {
      for (std::int64_t x = lo.x; x < hi.x; ++x) {
        out.push_back((z * dims.y + y) * dims.x + x);
      }
    }
  }
  return out;
}

// independent per-threshold recount
double ap_bruteforce(const std::vector<ScoredDetection>& dets,
                     std::int64_t total_gt) {
  std::vector<double> thresholds;
  for (const auto& d : dets) thresholds.push_back(d.confidence);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    std::int64_t tp = 0, fp = 0;
    for (const auto& d : dets) {
      if (d.confidence >= t) (d.tp ? tp : fp) += 1;
    }
    const double precision = double(tp) / double(tp + fp);
    const double recall = double(tp) / double(total_gt);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

std::vector<FrocPoint> froc_bruteforce(const std::vector<ScoredDetection>& dets,
                                       std::int64_t total_gt,
                                       std::int64_t n_cases) {
  std::vector<double> thresholds;
  for (const auto& d : dets) thresholds.push_back(d.confidence);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  std::vector<FrocPoint> out;
  for (double t : thresholds) {
    std::int64_t tp = 0, fp = 0;
    for (const auto& d : dets) {
      if (d.confidence >= t) (d.tp ? tp : fp) += 1;
    }
    out.push_back({t, double(fp) / double(n_cases), double(tp) / double(total_gt)});
  }
  return out;
}

double auroc_pairs(const std::vector<double>& scores,
                   const std::vector<bool>& labels) {
  double acc = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) acc += 1.0;
      else if (scores[i] == scores[j]) acc += 0.5;
    }
  }
  return acc / double(pairs);
}

}  // namespace

TEST_CASE("lesion extraction") {
  const Dims3 d{4, 16, 16};

  SECTION("all-zero map yields nothing") {
    auto r = extract_lesions(prob_map(d));
    REQUIRE(r.candidates.empty());
    REQUIRE(case_score(r.detection_map) == 0.0);
  }
  SECTION("two plateaus come out in confidence order") {
    Volume p = prob_map(d);
    paint_box(p, {0, 2, 2}, {2, 6, 6}, 0.9f);
    paint_box(p, {2, 10, 10}, {4, 14, 14}, 0.6f);
    auto r = extract_lesions(p);
    REQUIRE(r.candidates.size() == 2);
    REQUIRE(r.candidates[0].confidence == Catch::Approx(0.9));
    REQUIRE(r.candidates[1].confidence == Catch::Approx(0.6));
    REQUIRE(r.candidates[0].voxels.size() == 2 * 4 * 4);
    // detection map holds each candidate's confidence on its voxels
    REQUIRE(r.detection_map.at(0, 0, 2, 2) == 0.9f);
    REQUIRE(r.detection_map.at(0, 3, 12, 12) == 0.6f);
    REQUIRE(case_score(r.detection_map) == Catch::Approx(0.9));
  }
  SECTION("sub-threshold plateau yields nothing") {
    Volume p = prob_map(d);
    paint_box(p, {0, 2, 2}, {2, 6, 6}, 0.05f);
    REQUIRE(extract_lesions(p).candidates.empty());
  }
  SECTION("undersized regions are zeroed but skipped") {
    Volume p = prob_map(d);
    p.at(0, 0, 0, 0) = 0.95f;  // single voxel, below min_voxels
    paint_box(p, {2, 8, 8}, {4, 12, 12}, 0.5f);
    auto r = extract_lesions(p);
    REQUIRE(r.candidates.size() == 1);
    REQUIRE(r.candidates[0].confidence == Catch::Approx(0.5));
  }
  SECTION("candidate cap limits extraction") {
    Volume p = prob_map({4, 32, 16});
    for (int k = 0; k < 7; ++k) {
      paint_box(p, {0, k * 4 + 1, 2}, {2, k * 4 + 3, 8},
                0.9f - 0.05f * float(k));
    }
    ExtractionParams params;
    params.max_candidates = 5;
    params.min_voxels = 5;
    auto r = extract_lesions(p, params);
    REQUIRE(r.candidates.size() == 5);
  }
  SECTION("candidate voxel sets are pairwise disjoint") {
    Rng rng(7);
    Volume p = prob_map(d);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      p.data()[i] = static_cast<float>(rng.uniform());
    }
    ExtractionParams params;
    params.min_voxels = 1;
    params.max_candidates = 50;
    auto r = extract_lesions(p, params);
    std::set<std::int64_t> seen;
    for (const auto& c : r.candidates) {
      for (std::int64_t v : c.voxels) REQUIRE(seen.insert(v).second);
    }
    // detection-map max equals the top confidence
    if (!r.candidates.empty()) {
      REQUIRE(case_score(r.detection_map) ==
              Catch::Approx(r.candidates[0].confidence));
    }
  }
  SECTION("values outside [0,1] are rejected") {
    Volume p = prob_map(d);
    p.at(0, 0, 0, 0) = 1.5f;
    REQUIRE_THROWS_AS(extract_lesions(p), std::invalid_argument);
  }
}

TEST_CASE("hit matching") {
  const Dims3 d{4, 16, 16};

  SECTION("identical candidate is a hit") {
    LesionCandidate c;
    c.voxels = box_voxels(d, {0, 2, 2}, {2, 6, 6});
    c.confidence = 0.8;
    auto m = match_hits({c}, {c.voxels}, 0.10);
    REQUIRE(m.is_tp[0]);
    REQUIRE(m.fn == 0);
  }
  SECTION("disjoint candidate is a false positive and the lesion is missed") {
    LesionCandidate c;
    c.voxels = box_voxels(d, {0, 0, 0}, {1, 2, 2});
    c.confidence = 0.8;
    auto m = match_hits({c}, {box_voxels(d, {2, 8, 8}, {4, 12, 12})}, 0.10);
    REQUIRE(!m.is_tp[0]);
    REQUIRE(m.fn == 1);
  }
  SECTION("half-overlapping cubes reach IoU 1/3 and hit") {
    auto a = box_voxels(d, {0, 0, 0}, {2, 4, 4});   // 32 voxels
    auto b = box_voxels(d, {0, 2, 0}, {2, 6, 4});   // overlap 16
    REQUIRE(voxel_iou(a, b) == Catch::Approx(1.0 / 3.0));
    LesionCandidate c;
    c.voxels = a;
    c.confidence = 0.9;
    auto m = match_hits({c}, {b}, 0.10);
    REQUIRE(m.is_tp[0]);
  }
  SECTION("greedy matching consumes each lesion once") {
    LesionCandidate c1, c2;
    c1.voxels = box_voxels(d, {0, 0, 0}, {2, 4, 4});
    c1.confidence = 0.9;
    c2.voxels = c1.voxels;
    c2.confidence = 0.7;
    auto m = match_hits({c1, c2}, {c1.voxels}, 0.10);
    REQUIRE(m.is_tp[0]);   // higher confidence wins
    REQUIRE(!m.is_tp[1]);  // duplicate becomes FP
    REQUIRE(m.fn == 0);
  }
  SECTION("confidence ties break by centroid lexicographic order") {
    LesionCandidate a, b;
    a.voxels = box_voxels(d, {2, 8, 8}, {4, 12, 12});
    a.confidence = 0.5;
    a.centroid = {2.5, 9.5, 9.5};
    b.voxels = box_voxels(d, {0, 0, 0}, {2, 4, 4});
    b.confidence = 0.5;
    b.centroid = {0.5, 1.5, 1.5};
    auto m = match_hits({a, b}, {a.voxels}, 0.10);
    // b sorts first (smaller centroid) and misses; a follows and hits
    REQUIRE(m.candidate_order[0] == 1);
    REQUIRE(!m.is_tp[0]);
    REQUIRE(m.is_tp[1]);
  }
}

TEST_CASE("average precision") {
  SECTION("perfect detection gives AP 1") {
    std::vector<ScoredDetection> dets{{0.9, true}, {0.8, true}, {0.7, true}};
    auto r = average_precision(dets, 3);
    REQUIRE(r.ap);
    REQUIRE(*r.ap == 1.0);
  }
  SECTION("all false positives give AP 0") {
    std::vector<ScoredDetection> dets{{0.9, false}, {0.8, false}};
    auto r = average_precision(dets, 2);
    REQUIRE(*r.ap == 0.0);
  }
  SECTION("TP, FP, TP by confidence gives 5/6") {
    std::vector<ScoredDetection> dets{{0.9, true}, {0.8, false}, {0.7, true}};
    auto r = average_precision(dets, 2);
    REQUIRE(*r.ap == Catch::Approx(5.0 / 6.0).epsilon(1e-12));
  }
  SECTION("no ground-truth lesions is a distinct outcome") {
    std::vector<ScoredDetection> dets{{0.9, false}};
    REQUIRE(!average_precision(dets, 0).ap.has_value());
  }
  SECTION("sweep equals per-threshold recount on random instances") {
    Rng rng(31);
    for (int trial = 0; trial < 300; ++trial) {
      const int n = static_cast<int>(rng.uniform_int(1, 20));
      std::vector<ScoredDetection> dets;
      std::int64_t tp_count = 0;
      for (int k = 0; k < n; ++k) {
        ScoredDetection sd;
        // discrete confidences force threshold ties
        sd.confidence = rng.bernoulli(0.5)
                            ? double(rng.uniform_int(1, 9)) / 10.0
                            : rng.uniform();
        sd.tp = rng.bernoulli(0.4);
        tp_count += sd.tp;
        dets.push_back(sd);
      }
      const std::int64_t total_gt = tp_count + rng.uniform_int(0, 5);
      if (total_gt == 0) continue;
      auto r = average_precision(dets, total_gt);
      const double brute = ap_bruteforce(dets, total_gt);
      REQUIRE(std::abs(*r.ap - brute) <= 1e-12);
    }
  }
}

TEST_CASE("froc points") {
  SECTION("perfect detector yields the single point (0, 1)") {
    std::vector<ScoredDetection> dets{{1.0, true}, {1.0, true}};
    auto pts = froc_points(dets, 2, 4);
    REQUIRE(pts.size() == 1);
    REQUIRE(pts[0].fp_per_case == 0.0);
    REQUIRE(pts[0].sensitivity == 1.0);
  }
  SECTION("the lowest threshold includes every false positive") {
    std::vector<ScoredDetection> dets{{0.9, true}, {0.5, false}, {0.3, false}};
    auto pts = froc_points(dets, 1, 2);
    REQUIRE(pts.back().fp_per_case == Catch::Approx(1.0));  // 2 FP / 2 cases
    REQUIRE(pts.back().sensitivity == 1.0);
    // ordered by increasing FP rate
    for (std::size_t i = 1; i < pts.size(); ++i) {
      REQUIRE(pts[i].fp_per_case >= pts[i - 1].fp_per_case);
    }
  }
  SECTION("sweep equals per-threshold recount on random instances") {
    Rng rng(33);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = static_cast<int>(rng.uniform_int(1, 20));
      const std::int64_t cases = rng.uniform_int(1, 10);
      std::vector<ScoredDetection> dets;
      std::int64_t tp_count = 0;
      for (int k = 0; k < n; ++k) {
        ScoredDetection sd;
        sd.confidence = double(rng.uniform_int(1, 12)) / 12.0;
        sd.tp = rng.bernoulli(0.5);
        tp_count += sd.tp;
        dets.push_back(sd);
      }
      const std::int64_t total_gt = tp_count + rng.uniform_int(0, 4);
      if (total_gt == 0) continue;
      auto a = froc_points(dets, total_gt, cases);
      auto b = froc_bruteforce(dets, total_gt, cases);
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].fp_per_case == b[i].fp_per_case);
        REQUIRE(a[i].sensitivity == b[i].sensitivity);
      }
    }
  }
}

TEST_CASE("auroc") {
  SECTION("perfect separation gives 1") {
    auto r = auroc({0.9, 0.8, 0.2, 0.1}, {true, true, false, false});
    REQUIRE(*r.auroc == 1.0);
  }
  SECTION("constant scores give 1/2") {
    auto r = auroc({0.5, 0.5, 0.5, 0.5}, {true, false, true, false});
    REQUIRE(*r.auroc == 0.5);
  }
  SECTION("worked four-case example by pair enumeration") {
    const std::vector<double> scores{0.9, 0.8, 0.4, 0.35};
    const std::vector<bool> labels{true, false, true, false};
    REQUIRE(auroc_pairs(scores, labels) == 0.75);
    REQUIRE(*auroc(scores, labels).auroc == 0.75);
  }
  SECTION("single-class labels are a distinct outcome") {
    REQUIRE(!auroc({0.4, 0.2}, {true, true}).auroc.has_value());
  }
  SECTION("monotone rescaling never changes the statistic") {
    Rng rng(41);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (int k = 0; k < 30; ++k) {
      scores.push_back(double(rng.uniform_int(0, 14)) / 14.0);
      labels.push_back(rng.bernoulli(0.5));
    }
    labels[0] = true;
    labels[1] = false;
    auto base = auroc(scores, labels);
    std::vector<double> cubed;
    for (double s : scores) cubed.push_back(0.2 + 0.5 * s * s * s);
    auto scaled = auroc(cubed, labels);
    REQUIRE(*base.auroc == *scaled.auroc);
  }
  SECTION("rank statistic equals the pair enumeration and the ROC area") {
    Rng rng(43);
    for (int trial = 0; trial < 300; ++trial) {
      const int n = static_cast<int>(rng.uniform_int(2, 12));
      std::vector<double> scores;
      std::vector<bool> labels;
      for (int k = 0; k < n; ++k) {
        scores.push_back(double(rng.uniform_int(0, 6)) / 6.0);
        labels.push_back(rng.bernoulli(0.5));
      }
      labels[0] = true;
      if (n > 1) labels[1] = false;
      auto r = auroc(scores, labels);
      REQUIRE(std::abs(*r.auroc - auroc_pairs(scores, labels)) <= 1e-12);
      double area = 0.0;
      for (std::size_t i = 1; i < r.curve.size(); ++i) {
        area += 0.5 * (r.curve[i].fpr - r.curve[i - 1].fpr) *
                (r.curve[i].tpr + r.curve[i - 1].tpr);
      }
      REQUIRE(std::abs(area - *r.auroc) <= 1e-12);
    }
  }
}

TEST_CASE("ranking score") {
  REQUIRE(*ranking_score(0.633, 0.881) == Catch::Approx(0.757).margin(1e-12));
  REQUIRE(*ranking_score(0.690, 0.909) == Catch::Approx(0.7995).margin(1e-12));
  REQUIRE(*ranking_score(1.0, 1.0) == 1.0);
  REQUIRE(!ranking_score(std::nullopt, 0.9).has_value());
}

TEST_CASE("whole-dataset evaluation and csv export") {
  const Dims3 d{4, 16, 16};
  std::vector<CaseEval> cases;

  CaseEval pos;
  pos.id = "p0";
  pos.positive = true;
  LesionCandidate hit;
  hit.voxels = box_voxels(d, {0, 2, 2}, {2, 6, 6});
  hit.confidence = 0.9;
  pos.candidates = {hit};
  pos.score = 0.9;
  pos.gt_lesions = {hit.voxels};
  cases.push_back(pos);

  CaseEval neg;
  neg.id = "n0";
  neg.positive = false;
  neg.score = 0.0;
  cases.push_back(neg);

  EvalReport rep = evaluate(cases);
  REQUIRE(*rep.ap == 1.0);
  REQUIRE(*rep.auroc == 1.0);
  REQUIRE(*rep.ranking == 1.0);
  REQUIRE(rep.cases == 2);
  REQUIRE(rep.gt_lesions == 1);

  std::filesystem::create_directories("/tmp/zmesh_tests");
  write_pr_csv(rep.pr, "/tmp/zmesh_tests/pr.csv");
  write_froc_csv(rep.froc, "/tmp/zmesh_tests/froc.csv");
  write_roc_csv(rep.roc, "/tmp/zmesh_tests/roc.csv");
  write_candidates_csv(cases, "/tmp/zmesh_tests/cand.csv");
  std::ifstream pr("/tmp/zmesh_tests/pr.csv");
  std::string line;
  std::getline(pr, line);
  REQUIRE(line == "threshold,precision,recall");
}
