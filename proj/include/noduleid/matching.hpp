#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "noduleid/detector.hpp"
#include "noduleid/siamese.hpp"

namespace noduleid {

// Raised when a candidate list is empty; carries which side was missing.
class NoMatchError : public std::runtime_error {
 public:
  NoMatchError(std::string case_id, TimePoint side)
      : std::runtime_error("no candidates at " + to_string(side) + " for case " + case_id),
        side_(side) {}
  TimePoint side() const { return side_; }

 private:
  TimePoint side_;
};

// All-pairs score table, row-major (t1 index major). higher_better is false
// for contrastive distances.
struct PairScores {
  int n1 = 0, n2 = 0;
  bool higher_better = true;
  std::vector<double> scores;  // n1 * n2

  double at(int i, int j) const { return scores[static_cast<std::size_t>(i) * n2 + j]; }
};

struct MatchResult {
  std::string case_id;
  Candidate t1, t2;
  int t1_index = -1, t2_index = -1;
  double score = 0.0;
  std::optional<bool> correct;
  double elapsed_s = 0.0;
};

// Argmax (or argmin for distances) with the deterministic tie-break: lowest T1
// index, then lowest T2 index.
inline std::pair<int, int> select_best_pair(const PairScores& ps) {
  if (ps.n1 < 1 || ps.n2 < 1) throw std::invalid_argument("select_best_pair: empty score table");
  int bi = 0, bj = 0;
  double best = ps.at(0, 0);
  for (int i = 0; i < ps.n1; ++i)
    for (int j = 0; j < ps.n2; ++j) {
      const double s = ps.at(i, j);
      const bool better = ps.higher_better ? s > best : s < best;
      if (better) {
        best = s;
        bi = i;
        bj = j;
      }
    }
  return {bi, bj};
}

// Evaluates every T1 x T2 candidate pair and returns the best one. The scorer
// is any callable (patches_t1, patches_t2) -> PairScores; stub scorers drive
// the exhaustive-oracle tests, the siamese adapter drives production.
template <typename Scorer>
MatchResult match_case(Scorer&& scorer, const std::string& case_id, const Volume& volume_t1,
                       const Volume& volume_t2, std::span<const Candidate> candidates_t1,
                       std::span<const Candidate> candidates_t2) {
  if (candidates_t1.empty()) throw NoMatchError(case_id, TimePoint::T1);
  if (candidates_t2.empty()) throw NoMatchError(case_id, TimePoint::T2);
  const auto t_start = std::chrono::steady_clock::now();

  std::vector<Patch> patches_t1, patches_t2;
  patches_t1.reserve(candidates_t1.size());
  patches_t2.reserve(candidates_t2.size());
  for (const Candidate& c : candidates_t1)
    patches_t1.push_back(extract_patch(volume_t1, c.center_world, kBackboneInputSide));
  for (const Candidate& c : candidates_t2)
    patches_t2.push_back(extract_patch(volume_t2, c.center_world, kBackboneInputSide));

  PairScores ps = scorer(patches_t1, patches_t2);
  if (ps.n1 != static_cast<int>(candidates_t1.size()) ||
      ps.n2 != static_cast<int>(candidates_t2.size()))
    throw std::logic_error("scorer returned a mis-sized score table");
  const auto [bi, bj] = select_best_pair(ps);

  MatchResult r;
  r.case_id = case_id;
  r.t1 = candidates_t1[static_cast<std::size_t>(bi)];
  r.t2 = candidates_t2[static_cast<std::size_t>(bj)];
  r.t1_index = bi;
  r.t2_index = bj;
  r.score = ps.at(bi, bj);
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return r;
}

// Siamese adapter: embeds each candidate patch once and scores all pairs in
// one batched sweep.
template <typename T>
class SiameseScorer {
 public:
  explicit SiameseScorer(SiameseModel<T>& model) : model_(model) {}

  PairScores operator()(const std::vector<Patch>& a, const std::vector<Patch>& b) {
    PairScores ps;
    ps.n1 = static_cast<int>(a.size());
    ps.n2 = static_cast<int>(b.size());
    ps.higher_better = model_.higher_is_better();
    std::vector<typename SiameseModel<T>::Embedding> ea, eb;
    ea.reserve(a.size());
    eb.reserve(b.size());
    for (const Patch& p : a) ea.push_back(model_.embed_patch(p));
    for (const Patch& p : b) eb.push_back(model_.embed_patch(p));
    ps.scores = model_.pair_score_matrix(ea, eb);
    return ps;
  }

 private:
  SiameseModel<T>& model_;
};

struct MatchingEvaluation {
  int correct = 0;
  int total = 0;
  double accuracy = 0.0;
  double total_elapsed_s = 0.0;
};

// A match is correct iff the chosen T2 candidate hits the annotated T2 nodule.
// Fills each result's `correct` field.
inline MatchingEvaluation evaluate_matching(
    std::vector<MatchResult>& results,
    const std::map<std::string, NoduleAnnotation>& annotations_t2) {
  MatchingEvaluation ev;
  for (MatchResult& r : results) {
    auto it = annotations_t2.find(r.case_id);
    if (it == annotations_t2.end())
      throw std::invalid_argument("evaluate_matching: missing T2 annotation for case " +
                                  r.case_id);
    r.correct = hit(r.t2, it->second);
    ev.correct += *r.correct ? 1 : 0;
    ev.total += 1;
    ev.total_elapsed_s += r.elapsed_s;
  }
  ev.accuracy = ev.total > 0 ? static_cast<double>(ev.correct) / ev.total : 0.0;
  return ev;
}

// Distance thresholds of the candidate-proximity analysis: the radius hit rule
// plus fixed Euclidean distances.
struct DistanceThreshold {
  bool radius_rule = false;
  double mm = 0.0;

  std::string label() const {
    if (radius_rule) return "r**2";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g mm", mm);
    return buf;
  }
};

inline std::vector<DistanceThreshold> default_distance_thresholds() {
  return {{true, 0.0}, {false, 30.0}, {false, 20.0}, {false, 15.0},
          {false, 10.0}, {false, 5.0}, {false, 3.0},  {false, 1.5}};
}

// N = number of candidates within each threshold of the annotation.
inline std::vector<int> count_within_distance(std::span<const Candidate> candidates,
                                              const NoduleAnnotation& annotation,
                                              std::span<const DistanceThreshold> thresholds) {
  std::vector<int> out(thresholds.size(), 0);
  for (std::size_t t = 0; t < thresholds.size(); ++t)
    for (const Candidate& c : candidates) {
      const bool inside = thresholds[t].radius_rule
                              ? hit(c, annotation)
                              : distance(c.center_world, annotation.center_world) < thresholds[t].mm;
      if (inside) ++out[t];
    }
  return out;
}

// Per-threshold detection accuracy: fraction of CTs with exactly one candidate
// within the distance.
inline double single_candidate_accuracy(std::span<const int> per_case_counts) {
  if (per_case_counts.empty()) return 0.0;
  int ones = 0;
  for (int n : per_case_counts) ones += n == 1;
  return static_cast<double>(ones) / static_cast<double>(per_case_counts.size());
}

// Match report CSV: case_id,t1_x,t1_y,t1_z,t2_x,t2_y,t2_z,probability,correct,elapsed_s
inline void save_match_report(std::span<const MatchResult> results,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << "case_id,t1_x,t1_y,t1_z,t2_x,t2_y,t2_z,probability,correct,elapsed_s\n";
  for (const auto& r : results) {
    f << r.case_id << "," << detail::format_double(r.t1.center_world[0]) << ","
      << detail::format_double(r.t1.center_world[1]) << ","
      << detail::format_double(r.t1.center_world[2]) << ","
      << detail::format_double(r.t2.center_world[0]) << ","
      << detail::format_double(r.t2.center_world[1]) << ","
      << detail::format_double(r.t2.center_world[2]) << ","
      << detail::format_double(r.score) << ","
      << (r.correct.has_value() ? (*r.correct ? "1" : "0") : "") << ","
      << detail::format_double(r.elapsed_s) << "\n";
  }
}

}  // namespace noduleid
