#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "msgdn/rate_allocation.hpp"
#include "msgdn/rng.hpp"
#include "test_support.hpp"

using namespace msgdn;

namespace {

constexpr double kBudgetTol = 1e-12;

CandidateOption option(int qp, std::int64_t bits, int w, int h, double q) {
  return {qp, bits, w, h, q};
}

// Exhaustive oracle: enumerate every plan, keep budget-feasible ones, pick
// max mean quality with the lex-smallest qp vector in path order.
struct BruteResult {
  bool feasible = false;
  double quality = -std::numeric_limits<double>::infinity();
  std::vector<int> qps;  // by path-sorted image
};

BruteResult brute_force(const CandidateSet& set, double target_bpp) {
  std::vector<ImageCandidates> images = set.images;
  std::sort(images.begin(), images.end(),
            [](const ImageCandidates& a, const ImageCandidates& b) { return a.image < b.image; });
  for (auto& img : images) {
    std::sort(img.options.begin(), img.options.end(),
              [](const CandidateOption& a, const CandidateOption& b) { return a.qp < b.qp; });
  }
  const std::size_t n = images.size();
  std::vector<std::size_t> pick(n, 0);
  BruteResult best;
  for (;;) {
    double sum_bpp = 0.0, sum_q = 0.0;
    std::vector<int> qps;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = images[i].options[pick[i]];
      sum_bpp += o.bpp();
      sum_q += o.quality_db;
      qps.push_back(o.qp);
    }
    if (sum_bpp / static_cast<double>(n) <= target_bpp + kBudgetTol) {
      if (!best.feasible || sum_q > best.quality ||
          (sum_q == best.quality && qps < best.qps)) {
        best.feasible = true;
        best.quality = sum_q;
        best.qps = qps;
      }
    }
    // next combination
    std::size_t i = 0;
    while (i < n) {
      if (++pick[i] < images[i].options.size()) break;
      pick[i] = 0;
      ++i;
    }
    if (i == n) break;
  }
  if (best.feasible) best.quality /= static_cast<double>(n);
  return best;
}

CandidateSet random_instance(Rng& rng, int max_images = 12, int max_options = 3) {
  CandidateSet set;
  const int n = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_images - 1)));
  for (int i = 0; i < n; ++i) {
    ImageCandidates img;
    img.image = "img" + std::to_string(100 + i) + ".png";
    const int w = 64 + static_cast<int>(rng.below(192));
    const int h = 64 + static_cast<int>(rng.below(192));
    const int opts = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_options)));
    for (int o = 0; o < opts; ++o) {
      const std::int64_t bits =
          static_cast<std::int64_t>((0.05 + 0.4 * rng.uniform()) * w * h);
      img.options.push_back(option(37 + o, bits, w, h, 28.0 + 10.0 * rng.uniform()));
    }
    set.images.push_back(std::move(img));
  }
  return set;
}

}  // namespace

TEST_CASE("allocate: single option per image at exactly the target") {
  CandidateSet set;
  for (int i = 0; i < 4; ++i) {
    ImageCandidates img;
    img.image = "img" + std::to_string(i);
    img.options.push_back(option(37, 3600, 120, 200, 30.0 + i));  // 0.15 bpp each
    set.images.push_back(img);
  }
  AllocationPlan plan = allocate(set, 0.15);
  CHECK(plan.choices.size() == 4);
  CHECK(plan.achieved_mean_bpp == doctest::Approx(0.15).epsilon(1e-12));
  for (const auto& c : plan.choices) CHECK(c.qp == 37);
}

TEST_CASE("allocate: 3 images x 3 QPs equals exhaustive search") {
  // hand-made tables: per image (bits, quality) trade-offs on 100x100 pixels
  CandidateSet set;
  const double q[3][3] = {{34.0, 32.5, 31.0}, {36.5, 35.0, 33.0}, {30.0, 29.2, 28.9}};
  const std::int64_t bits[3][3] = {{2600, 1700, 1100}, {3400, 2200, 1500}, {1900, 1400, 1200}};
  for (int i = 0; i < 3; ++i) {
    ImageCandidates img;
    img.image = "img" + std::to_string(i);
    for (int o = 0; o < 3; ++o) img.options.push_back(option(37 + o, bits[i][o], 100, 100, q[i][o]));
    set.images.push_back(img);
  }
  const double target = 0.19;
  AllocationPlan plan = allocate(set, target);
  BruteResult oracle = brute_force(set, target);
  REQUIRE(oracle.feasible);
  CHECK(plan.achieved_mean_quality_db == oracle.quality);
  for (std::size_t i = 0; i < plan.choices.size(); ++i) CHECK(plan.choices[i].qp == oracle.qps[i]);
  CHECK(plan.achieved_mean_bpp <= target + kBudgetTol);
}

TEST_CASE("allocate: infeasible target raises with the minimum achievable rate") {
  CandidateSet set;
  ImageCandidates img;
  img.image = "big";
  img.options.push_back(option(37, 40000, 100, 100, 40.0));  // 4.0 bpp minimum
  set.images.push_back(img);
  try {
    allocate(set, 0.15);
    FAIL("expected infeasibility");
  } catch (const InfeasibleError& e) {
    CHECK(e.min_achievable_mean_bpp == doctest::Approx(4.0).epsilon(1e-12));
  }
}

TEST_CASE("allocate: 200 randomized instances match the brute-force oracle") {
  Rng rng(424242);
  for (int trial = 0; trial < 200; ++trial) {
    CandidateSet set = random_instance(rng);
    const double min_possible = [&] {
      double s = 0.0;
      for (const auto& img : set.images) {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& o : img.options) m = std::min(m, o.bpp());
        s += m;
      }
      return s / static_cast<double>(set.images.size());
    }();
    // mix feasible and tight targets
    const double target = min_possible * (0.9 + 0.8 * rng.uniform());

    BruteResult oracle = brute_force(set, target);
    if (!oracle.feasible) {
      CHECK_THROWS_AS(allocate(set, target), InfeasibleError);
      continue;
    }
    AllocationPlan plan = allocate(set, target);
    CHECK(plan.exact);
    CHECK(plan.achieved_mean_quality_db == oracle.quality);
    CHECK(plan.achieved_mean_bpp <= target + kBudgetTol);
    REQUIRE(plan.choices.size() == oracle.qps.size());
    for (std::size_t i = 0; i < plan.choices.size(); ++i) {
      CHECK(plan.choices[i].qp == oracle.qps[i]);
    }
  }
}

TEST_CASE("allocate: raising the target never lowers achieved quality") {
  Rng rng(777);
  for (int trial = 0; trial < 20; ++trial) {
    CandidateSet set = random_instance(rng, 8, 3);
    double max_bpp = 0.0;
    for (const auto& img : set.images) {
      for (const auto& o : img.options) max_bpp = std::max(max_bpp, o.bpp());
    }
    double previous = -1e300;
    bool any = false;
    for (double frac : {0.3, 0.5, 0.7, 0.9, 1.1}) {
      try {
        AllocationPlan plan = allocate(set, max_bpp * frac);
        if (any) CHECK(plan.achieved_mean_quality_db >= previous);
        previous = plan.achieved_mean_quality_db;
        any = true;
      } catch (const InfeasibleError&) {
        CHECK_FALSE(any);  // once feasible, larger targets stay feasible
      }
    }
  }
}

TEST_CASE("allocate: deterministic and tie-broken towards lower QP") {
  CandidateSet set;
  for (int i = 0; i < 3; ++i) {
    ImageCandidates img;
    img.image = "tie" + std::to_string(i);
    // identical rate and quality across QPs: the tie-break must pick qp 37
    img.options.push_back(option(39, 1000, 100, 100, 30.0));
    img.options.push_back(option(37, 1000, 100, 100, 30.0));
    img.options.push_back(option(38, 1000, 100, 100, 30.0));
    set.images.push_back(img);
  }
  AllocationPlan a = allocate(set, 0.5);
  AllocationPlan b = allocate(set, 0.5);
  for (const auto& c : a.choices) CHECK(c.qp == 37);
  REQUIRE(a.choices.size() == b.choices.size());
  for (std::size_t i = 0; i < a.choices.size(); ++i) {
    CHECK(a.choices[i].image == b.choices[i].image);
    CHECK(a.choices[i].qp == b.choices[i].qp);
  }
}

TEST_CASE("mean_bpp and mean_quality: arithmetic and permutation invariance") {
  CandidateSet set;
  ImageCandidates a;
  a.image = "a";
  a.options.push_back(option(37, 3600, 120, 200, 31.0));  // 0.15
  ImageCandidates b;
  b.image = "b";
  b.options.push_back(option(37, 2000, 100, 100, 35.0));  // 0.2
  ImageCandidates c;
  c.image = "c";
  c.options.push_back(option(37, 1000, 100, 100, 33.0));  // 0.1
  set.images = {a, b, c};

  AllocationPlan plan;
  plan.choices = {{"a", 37}, {"b", 37}, {"c", 37}};
  CHECK(mean_bpp(plan, set) == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(mean_quality(plan, set) == doctest::Approx(33.0).epsilon(1e-12));

  // single image arithmetic
  AllocationPlan single;
  single.choices = {{"a", 37}};
  CandidateSet only_a;
  only_a.images = {a};
  CHECK(mean_bpp(single, only_a) == doctest::Approx(0.15).epsilon(1e-12));

  // permutation invariance
  CandidateSet permuted;
  permuted.images = {c, a, b};
  AllocationPlan shuffled;
  shuffled.choices = {{"c", 37}, {"a", 37}, {"b", 37}};
  CHECK(mean_bpp(shuffled, permuted) == doctest::Approx(mean_bpp(plan, set)).epsilon(1e-15));
  CHECK(mean_quality(shuffled, permuted) == doctest::Approx(mean_quality(plan, set)).epsilon(1e-15));
}

TEST_CASE("total-bits budget mode optimizes bits over pixels") {
  CandidateSet set;
  ImageCandidates small;
  small.image = "small";  // 100x100
  small.options.push_back(option(37, 5000, 100, 100, 40.0));  // 0.5 bpp
  small.options.push_back(option(38, 1000, 100, 100, 30.0));  // 0.1 bpp
  ImageCandidates large;
  large.image = "zlarge";  // 200x200
  large.options.push_back(option(37, 8000, 200, 200, 42.0));  // 0.2 bpp
  large.options.push_back(option(38, 4000, 200, 200, 36.0));  // 0.1 bpp
  set.images = {small, large};

  // mean-of-bpp budget 0.3: (0.5 + 0.1)/2 = 0.3 allows small@37 + large@38
  AllocationPlan per_image = allocate(set, 0.3, false);
  CHECK(mean_bpp(per_image, set) <= 0.3 + kBudgetTol);

  // total-bits budget 0.3: 0.3 * 50000 px = 15000 bits; 5000+8000 fits now
  AllocationPlan total_mode = allocate(set, 0.3, true);
  std::int64_t total_bits = 0;
  for (const auto& choice : total_mode.choices) {
    for (const auto& img : set.images) {
      if (img.image != choice.image) continue;
      for (const auto& o : img.options) {
        if (o.qp == choice.qp) total_bits += o.bits;
      }
    }
  }
  CHECK(total_bits <= static_cast<std::int64_t>(0.3 * 50000) + 1);
  CHECK(total_mode.achieved_mean_quality_db >= per_image.achieved_mean_quality_db);
}

TEST_CASE("candidate CSV round trip and monotonicity warnings") {
  const std::string dir = testing::temp_dir("alloc_csv");
  CandidateSet set;
  ImageCandidates img;
  img.image = "weird.png";
  img.options.push_back(option(37, 2000, 64, 64, 30.0));
  img.options.push_back(option(38, 1500, 64, 64, 32.5));  // quality UP while bits DOWN
  set.images.push_back(img);

  CHECK(set.monotonicity_warnings().size() == 1);

  const std::string path = dir + "/candidates.csv";
  set.to_csv(path);
  CandidateSet loaded = CandidateSet::from_csv(path);
  REQUIRE(loaded.images.size() == 1);
  REQUIRE(loaded.images[0].options.size() == 2);
  CHECK(loaded.images[0].image == "weird.png");
  CHECK(loaded.images[0].options[1].quality_db == 32.5);

  AllocationPlan plan = allocate(set, 1.0);
  const std::string plan_path = dir + "/plan.csv";
  plan.to_csv(plan_path, set);
  AllocationPlan plan_back = AllocationPlan::from_csv(plan_path);
  CHECK(plan_back.choices.size() == plan.choices.size());
  CHECK(plan_back.achieved_mean_bpp == plan.achieved_mean_bpp);
  CHECK(plan_back.achieved_mean_quality_db == plan.achieved_mean_quality_db);
  CHECK(plan_back.exact == plan.exact);
}

TEST_CASE("allocate rejects bad inputs") {
  CandidateSet empty;
  CHECK_THROWS_AS(allocate(empty, 0.15), ConfigError);

  CandidateSet no_options;
  no_options.images.push_back({"x", {}});
  CHECK_THROWS_AS(allocate(no_options, 0.15), ConfigError);

  CandidateSet dup;
  ImageCandidates img;
  img.image = "x";
  img.options.push_back(option(37, 100, 10, 10, 30.0));
  img.options.push_back(option(37, 200, 10, 10, 31.0));
  dup.images.push_back(img);
  CHECK_THROWS_AS(allocate(dup, 10.0), ConfigError);

  CandidateSet ok;
  ok.images.push_back({"x", {option(37, 100, 10, 10, 30.0)}});
  CHECK_THROWS_AS(allocate(ok, 0.0), ConfigError);
}
