#include "msgdn/rate_allocation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "msgdn/csv.hpp"

namespace msgdn {

namespace {

constexpr double kBudgetTolerance = 1e-12;
constexpr std::int64_t kNodeBudget = 4'000'000;

struct Problem {
  // Images sorted by path; options sorted by qp ascending.
  std::vector<ImageCandidates> images;
  std::vector<std::vector<double>> rate;     // per option: bpp or bits
  std::vector<std::vector<double>> quality;  // per option
  double budget_limit = 0.0;                 // feasible iff sum(rate) <= limit
  std::vector<double> min_rate_suffix;       // sum of per-image min rates from i..end
  std::vector<double> max_quality_suffix;    // sum of per-image max quality from i..end
};

Problem build_problem(const CandidateSet& candidates, double target_bpp, bool total_bits_mode) {
  Problem p;
  p.images = candidates.images;
  std::sort(p.images.begin(), p.images.end(),
            [](const ImageCandidates& a, const ImageCandidates& b) { return a.image < b.image; });
  double denom = 0.0;
  for (auto& img : p.images) {
    if (img.options.empty())
      throw ConfigError("allocate: image '" + img.image + "' has no options");
    std::sort(img.options.begin(), img.options.end(),
              [](const CandidateOption& a, const CandidateOption& b) { return a.qp < b.qp; });
    for (std::size_t j = 1; j < img.options.size(); ++j) {
      if (img.options[j].qp == img.options[j - 1].qp)
        throw ConfigError("allocate: duplicate qp " + std::to_string(img.options[j].qp) +
                          " for image '" + img.image + "'");
    }
    std::vector<double> r, q;
    for (const auto& o : img.options) {
      r.push_back(total_bits_mode ? static_cast<double>(o.bits) : o.bpp());
      q.push_back(o.quality_db);
    }
    p.rate.push_back(std::move(r));
    p.quality.push_back(std::move(q));
    denom += total_bits_mode ? static_cast<double>(img.options.front().width) *
                                   img.options.front().height
                             : 1.0;
  }
  p.budget_limit = (target_bpp + kBudgetTolerance) * denom;

  const std::size_t n = p.images.size();
  p.min_rate_suffix.assign(n + 1, 0.0);
  p.max_quality_suffix.assign(n + 1, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    p.min_rate_suffix[i] =
        p.min_rate_suffix[i + 1] + *std::min_element(p.rate[i].begin(), p.rate[i].end());
    p.max_quality_suffix[i] =
        p.max_quality_suffix[i + 1] + *std::max_element(p.quality[i].begin(), p.quality[i].end());
  }
  return p;
}

// Left-fold sums in image order; the canonical accumulation everywhere so
// float comparisons between search routes are exact.
double plan_quality(const Problem& p, const std::vector<int>& pick) {
  double q = 0.0;
  for (std::size_t i = 0; i < pick.size(); ++i) q += p.quality[i][static_cast<std::size_t>(pick[i])];
  return q;
}

double plan_rate(const Problem& p, const std::vector<int>& pick) {
  double r = 0.0;
  for (std::size_t i = 0; i < pick.size(); ++i) r += p.rate[i][static_cast<std::size_t>(pick[i])];
  return r;
}

bool lex_smaller(const Problem& p, const std::vector<int>& a, const std::vector<int>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int qa = p.images[i].options[static_cast<std::size_t>(a[i])].qp;
    const int qb = p.images[i].options[static_cast<std::size_t>(b[i])].qp;
    if (qa != qb) return qa < qb;
  }
  return false;
}

// Per-image argmax of (quality - lambda*rate); ties prefer lower rate, then
// lower qp (options are qp-sorted, so first wins).
std::vector<int> lagrangian_pick(const Problem& p, double lambda) {
  std::vector<int> pick(p.images.size(), 0);
  for (std::size_t i = 0; i < p.images.size(); ++i) {
    double best_score = -std::numeric_limits<double>::infinity();
    double best_rate = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < p.rate[i].size(); ++j) {
      const double score = p.quality[i][j] - lambda * p.rate[i][j];
      if (score > best_score ||
          (score == best_score && p.rate[i][j] < best_rate)) {
        best_score = score;
        best_rate = p.rate[i][j];
        best_j = static_cast<int>(j);
      }
    }
    pick[i] = best_j;
  }
  return pick;
}

struct Incumbent {
  std::vector<int> pick;
  double quality = -std::numeric_limits<double>::infinity();
  bool valid = false;
};

void consider(const Problem& p, Incumbent& best, const std::vector<int>& pick) {
  if (plan_rate(p, pick) > p.budget_limit) return;
  const double q = plan_quality(p, pick);
  if (!best.valid || q > best.quality ||
      (q == best.quality && lex_smaller(p, pick, best.pick))) {
    best.pick = pick;
    best.quality = q;
    best.valid = true;
  }
}

struct BnbState {
  const Problem* p = nullptr;
  Incumbent* best = nullptr;
  std::vector<int> pick;
  std::int64_t nodes = 0;
  bool exhausted = true;
};

void bnb(BnbState& st, std::size_t i, double cur_rate, double cur_quality) {
  const Problem& p = *st.p;
  if (++st.nodes > kNodeBudget) {
    st.exhausted = false;
    return;
  }
  if (i == p.images.size()) {
    if (!st.best->valid || cur_quality > st.best->quality ||
        (cur_quality == st.best->quality && lex_smaller(p, st.pick, st.best->pick))) {
      st.best->pick = st.pick;
      st.best->quality = cur_quality;
      st.best->valid = true;
    }
    return;
  }
  // Bound: even the best completion cannot beat the incumbent.
  if (st.best->valid &&
      cur_quality + p.max_quality_suffix[i] + 1e-9 < st.best->quality)
    return;
  for (std::size_t j = 0; j < p.rate[i].size(); ++j) {
    const double r = cur_rate + p.rate[i][j];
    if (r + p.min_rate_suffix[i + 1] > p.budget_limit) continue;
    st.pick[i] = static_cast<int>(j);
    bnb(st, i + 1, r, cur_quality + p.quality[i][j]);
    if (!st.exhausted) return;
  }
}

}  // namespace

AllocationPlan allocate(const CandidateSet& candidates, double target_bpp, bool total_bits_mode) {
  if (target_bpp <= 0.0) throw ConfigError("allocate: target bpp must be positive");
  if (candidates.images.empty()) throw ConfigError("allocate: empty candidate set");
  Problem p = build_problem(candidates, target_bpp, total_bits_mode);

  const double n_images = static_cast<double>(p.images.size());
  if (p.min_rate_suffix[0] > p.budget_limit) {
    double denom = n_images;
    if (total_bits_mode) {
      denom = 0.0;
      for (const auto& img : p.images)
        denom += static_cast<double>(img.options.front().width) * img.options.front().height;
    }
    const double min_mean = p.min_rate_suffix[0] / denom;
    throw InfeasibleError("allocate: infeasible target; minimum achievable mean bpp is " +
                              fmt_g17(min_mean),
                          min_mean);
  }

  // Lagrangian sweep over all pairwise rate-quality slopes.
  std::set<double> lambdas{0.0};
  for (std::size_t i = 0; i < p.images.size(); ++i) {
    for (std::size_t a = 0; a < p.rate[i].size(); ++a) {
      for (std::size_t b = 0; b < p.rate[i].size(); ++b) {
        const double dr = p.rate[i][a] - p.rate[i][b];
        const double dq = p.quality[i][a] - p.quality[i][b];
        if (dr > 0.0 && dq > 0.0) lambdas.insert(dq / dr);
      }
    }
  }
  Incumbent best;
  for (double lam : lambdas) consider(p, best, lagrangian_pick(p, lam));
  // Min-rate plan is always feasible at this point.
  {
    std::vector<int> min_pick(p.images.size(), 0);
    for (std::size_t i = 0; i < p.images.size(); ++i) {
      min_pick[i] = static_cast<int>(std::min_element(p.rate[i].begin(), p.rate[i].end()) -
                                     p.rate[i].begin());
    }
    consider(p, best, min_pick);
  }

  // Greedy upgrades: take the single-image switch with the best quality gain
  // that keeps the budget satisfied.
  for (;;) {
    double cur_rate = plan_rate(p, best.pick);
    double best_gain = 0.0;
    double best_dr = std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    int best_j = -1;
    for (std::size_t i = 0; i < p.images.size(); ++i) {
      const int cur = best.pick[i];
      for (std::size_t j = 0; j < p.rate[i].size(); ++j) {
        const double dq = p.quality[i][j] - p.quality[i][static_cast<std::size_t>(cur)];
        if (dq <= 0.0) continue;
        const double dr = p.rate[i][j] - p.rate[i][static_cast<std::size_t>(cur)];
        if (cur_rate + dr > p.budget_limit) continue;
        if (dq > best_gain || (dq == best_gain && dr < best_dr)) {
          best_gain = dq;
          best_dr = dr;
          best_i = i;
          best_j = static_cast<int>(j);
        }
      }
    }
    if (best_j < 0) break;
    best.pick[best_i] = best_j;
    best.quality = plan_quality(p, best.pick);
  }
  best.quality = plan_quality(p, best.pick);

  // Exact polish: depth-first search with quality and feasibility bounds.
  BnbState st;
  st.p = &p;
  st.best = &best;
  st.pick.assign(p.images.size(), 0);
  bnb(st, 0, 0.0, 0.0);

  AllocationPlan plan;
  plan.exact = st.exhausted;
  double sum_bpp = 0.0;
  double sum_quality = 0.0;
  for (std::size_t i = 0; i < p.images.size(); ++i) {
    const auto& opt = p.images[i].options[static_cast<std::size_t>(best.pick[i])];
    plan.choices.push_back({p.images[i].image, opt.qp});
    sum_bpp += opt.bpp();
    sum_quality += opt.quality_db;
  }
  plan.achieved_mean_bpp = sum_bpp / n_images;
  plan.achieved_mean_quality_db = sum_quality / n_images;
  return plan;
}

double mean_bpp(const AllocationPlan& plan, const CandidateSet& candidates) {
  double sum = 0.0;
  int n = 0;
  for (const auto& choice : plan.choices) {
    for (const auto& img : candidates.images) {
      if (img.image != choice.image) continue;
      for (const auto& o : img.options) {
        if (o.qp == choice.qp) {
          sum += o.bpp();
          ++n;
        }
      }
    }
  }
  if (n != static_cast<int>(plan.choices.size()))
    throw ConfigError("mean_bpp: plan references unknown (image, qp) entries");
  return sum / static_cast<double>(n);
}

double mean_quality(const AllocationPlan& plan, const CandidateSet& candidates) {
  double sum = 0.0;
  int n = 0;
  for (const auto& choice : plan.choices) {
    for (const auto& img : candidates.images) {
      if (img.image != choice.image) continue;
      for (const auto& o : img.options) {
        if (o.qp == choice.qp) {
          sum += o.quality_db;
          ++n;
        }
      }
    }
  }
  if (n != static_cast<int>(plan.choices.size()))
    throw ConfigError("mean_quality: plan references unknown (image, qp) entries");
  return sum / static_cast<double>(n);
}

// --- CSV ---

void CandidateSet::to_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("candidates: cannot open " + path);
  out << "# msgdn-candidates v1\n";
  out << "image,qp,bits,width,height,quality_db\n";
  for (const auto& img : images) {
    for (const auto& o : img.options) {
      out << img.image << ',' << o.qp << ',' << o.bits << ',' << o.width << ',' << o.height << ','
          << fmt_g17(o.quality_db) << '\n';
    }
  }
}

CandidateSet CandidateSet::from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("candidates: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# msgdn-candidates v1")
    throw IoError("candidates: bad or missing version line in " + path);
  if (!std::getline(in, line) || line != "image,qp,bits,width,height,quality_db")
    throw IoError("candidates: bad column header in " + path);

  CandidateSet set;
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) throw IoError("candidates: malformed row: " + line);
    CandidateOption o;
    o.qp = static_cast<int>(parse_int(f[1]));
    o.bits = parse_int(f[2]);
    o.width = static_cast<int>(parse_int(f[3]));
    o.height = static_cast<int>(parse_int(f[4]));
    o.quality_db = parse_double(f[5]);
    auto [it, inserted] = index.emplace(f[0], set.images.size());
    if (inserted) set.images.push_back({f[0], {}});
    set.images[it->second].options.push_back(o);
  }
  return set;
}

std::vector<std::string> CandidateSet::monotonicity_warnings() const {
  std::vector<std::string> warnings;
  for (const auto& img : images) {
    auto sorted = img.options;
    std::sort(sorted.begin(), sorted.end(),
              [](const CandidateOption& a, const CandidateOption& b) { return a.bits > b.bits; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
      if (sorted[i].quality_db > sorted[i - 1].quality_db) {
        warnings.push_back(img.image + ": quality rises from " + fmt_g17(sorted[i - 1].quality_db) +
                           " to " + fmt_g17(sorted[i].quality_db) + " while bits drop");
        break;
      }
    }
  }
  return warnings;
}

void AllocationPlan::to_csv(const std::string& path, const CandidateSet& candidates) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("plan: cannot open " + path);
  out << "# msgdn-plan v1\n";
  out << "# mean_bpp " << fmt_g17(achieved_mean_bpp) << "\n";
  out << "# mean_quality_db " << fmt_g17(achieved_mean_quality_db) << "\n";
  out << "# exact " << (exact ? 1 : 0) << "\n";
  out << "image,qp\n";
  for (const auto& c : choices) out << c.image << ',' << c.qp << '\n';
  (void)candidates;
}

AllocationPlan AllocationPlan::from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("plan: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "# msgdn-plan v1")
    throw IoError("plan: bad or missing version line in " + path);
  AllocationPlan plan;
  while (std::getline(in, line)) {
    if (line.rfind("# mean_bpp ", 0) == 0) {
      plan.achieved_mean_bpp = parse_double(line.substr(11));
    } else if (line.rfind("# mean_quality_db ", 0) == 0) {
      plan.achieved_mean_quality_db = parse_double(line.substr(18));
    } else if (line.rfind("# exact ", 0) == 0) {
      plan.exact = line.substr(8) == "1";
    } else if (line == "image,qp") {
      break;
    } else {
      throw IoError("plan: unexpected line: " + line);
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 2) throw IoError("plan: malformed row: " + line);
    plan.choices.push_back({f[0], static_cast<int>(parse_int(f[1]))});
  }
  return plan;
}

}  // namespace msgdn
