#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgdn/common.hpp"

namespace msgdn {

struct CandidateOption {
  int qp = 0;
  std::int64_t bits = 0;
  int width = 0;
  int height = 0;
  double quality_db = 0.0;

  double bpp() const { return static_cast<double>(bits) / (static_cast<double>(width) * height); }
};

struct ImageCandidates {
  std::string image;
  std::vector<CandidateOption> options;
};

// Per-image coding-point options. CSV round trip and rate-quality
// monotonicity diagnostics included.
struct CandidateSet {
  std::vector<ImageCandidates> images;

  void to_csv(const std::string& path) const;
  static CandidateSet from_csv(const std::string& path);
  // One message per image whose quality increases while bits decrease.
  std::vector<std::string> monotonicity_warnings() const;
};

struct AllocationPlan {
  struct Choice {
    std::string image;
    int qp = 0;
  };
  std::vector<Choice> choices;  // sorted by image path
  double achieved_mean_bpp = 0.0;
  double achieved_mean_quality_db = 0.0;
  bool exact = true;  // false if the search hit its node budget

  void to_csv(const std::string& path, const CandidateSet& candidates) const;
  static AllocationPlan from_csv(const std::string& path);
};

struct InfeasibleError : Error {
  InfeasibleError(const std::string& msg, double min_mean_bpp)
      : Error(msg), min_achievable_mean_bpp(min_mean_bpp) {}
  double min_achievable_mean_bpp;
};

// Picks one QP per image maximizing mean quality subject to the rate budget:
// a Lagrangian sweep over per-image maximization of (quality - lambda*rate),
// greedy feasible upgrades, then a branch-and-bound polish that certifies the
// optimum and the deterministic tie-break (image path order, then lower QP).
// total_bits_mode switches the budget from mean-of-bpp to
// total-bits/total-pixels.
AllocationPlan allocate(const CandidateSet& candidates, double target_bpp,
                        bool total_bits_mode = false);

double mean_bpp(const AllocationPlan& plan, const CandidateSet& candidates);
double mean_quality(const AllocationPlan& plan, const CandidateSet& candidates);

}  // namespace msgdn
