#pragma once

// Subdifferentials of univariate piecewise affine functions, and fixed-point
// residuals certifying d- and weak M-stationarity of the composite problem.

#include "snewton.hpp"

#include <random>
#include <set>

namespace dcmm {

class PiecewiseAffine1D {
 public:
  struct Piece {
    double slope, intercept;
    double at(double x) const { return slope * x + intercept; }
  };

  PiecewiseAffine1D() : pieces_{{0.0, 0.0}} {}
  PiecewiseAffine1D(std::vector<double> breakpoints, std::vector<Piece> pieces)
      : bp_(std::move(breakpoints)), pieces_(std::move(pieces)) {
    if (pieces_.size() != bp_.size() + 1)
      throw std::invalid_argument("PiecewiseAffine1D: need one more piece than breakpoints");
    if (!std::is_sorted(bp_.begin(), bp_.end()) ||
        std::adjacent_find(bp_.begin(), bp_.end()) != bp_.end())
      throw std::invalid_argument("PiecewiseAffine1D: breakpoints must be strictly increasing");
    for (std::size_t i = 0; i < bp_.size(); ++i) {
      const double x = bp_[i];
      const double scale = std::max(1.0, std::abs(pieces_[i].at(x)));
      if (std::abs(pieces_[i].at(x) - pieces_[i + 1].at(x)) > 1e-12 * scale)
        throw std::invalid_argument("PiecewiseAffine1D: discontinuous at a breakpoint");
    }
  }

  static PiecewiseAffine1D affine(double slope, double intercept) {
    return PiecewiseAffine1D({}, {{slope, intercept}});
  }

  const std::vector<double>& breakpoints() const { return bp_; }
  const std::vector<Piece>& pieces() const { return pieces_; }

  double operator()(double x) const { return pieces_[locate(x)].at(x); }

  // slopes of the pieces immediately left and right of x
  std::pair<double, double> side_slopes(double x) const {
    const auto it = std::lower_bound(bp_.begin(), bp_.end(), x);
    const auto i = static_cast<std::size_t>(it - bp_.begin());
    if (it != bp_.end() && *it == x) return {pieces_[i].slope, pieces_[i + 1].slope};
    return {pieces_[i].slope, pieces_[i].slope};
  }

  bool convex() const {
    for (std::size_t i = 0; i + 1 < pieces_.size(); ++i)
      if (pieces_[i].slope > pieces_[i + 1].slope) return false;
    return true;
  }

  PiecewiseAffine1D operator-() const {
    auto p = pieces_;
    for (auto& q : p) q = {-q.slope, -q.intercept};
    return {bp_, std::move(p)};
  }

  friend PiecewiseAffine1D max(const PiecewiseAffine1D& f, const PiecewiseAffine1D& g) {
    return combine(f, g, true);
  }
  friend PiecewiseAffine1D min(const PiecewiseAffine1D& f, const PiecewiseAffine1D& g) {
    return combine(f, g, false);
  }
  friend PiecewiseAffine1D operator+(const PiecewiseAffine1D& f, const PiecewiseAffine1D& g) {
    const auto pts = merged(f.bp_, g.bp_);
    std::vector<Piece> out;
    for (std::size_t i = 0; i <= pts.size(); ++i) {
      const double x = sample(pts, i);
      const Piece a = f.pieces_[f.locate(x)], b = g.pieces_[g.locate(x)];
      out.push_back({a.slope + b.slope, a.intercept + b.intercept});
    }
    return simplify(pts, out);
  }
  friend PiecewiseAffine1D operator-(const PiecewiseAffine1D& f, const PiecewiseAffine1D& g) {
    return f + (-g);
  }

 private:
  std::size_t locate(double x) const {
    return static_cast<std::size_t>(std::upper_bound(bp_.begin(), bp_.end(), x) - bp_.begin());
  }
  static std::vector<double> merged(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> pts(a);
    pts.insert(pts.end(), b.begin(), b.end());
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    return pts;
  }
  // a point strictly inside interval i of the partition given by pts
  static double sample(const std::vector<double>& pts, std::size_t i) {
    if (pts.empty()) return 0.0;
    if (i == 0) return pts.front() - 1.0;
    if (i == pts.size()) return pts.back() + 1.0;
    return 0.5 * (pts[i - 1] + pts[i]);
  }
  static PiecewiseAffine1D simplify(const std::vector<double>& pts, const std::vector<Piece>& pieces) {
    std::vector<double> bp;
    std::vector<Piece> out{pieces.front()};
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Piece& a = out.back();
      const Piece& b = pieces[i + 1];
      if (std::abs(a.slope - b.slope) <= 1e-12 && std::abs(a.intercept - b.intercept) <= 1e-12) continue;
      bp.push_back(pts[i]);
      out.push_back(b);
    }
    return {bp, out};
  }
  static PiecewiseAffine1D combine(const PiecewiseAffine1D& f, const PiecewiseAffine1D& g, bool take_max) {
    auto pts = merged(f.bp_, g.bp_);
    std::vector<double> cross;
    for (std::size_t i = 0; i <= pts.size(); ++i) {
      const double x = sample(pts, i);
      const Piece a = f.pieces_[f.locate(x)], b = g.pieces_[g.locate(x)];
      if (a.slope == b.slope) continue;
      const double xc = (b.intercept - a.intercept) / (a.slope - b.slope);
      const bool inside = (i == 0 || xc > pts[i - 1]) && (i == pts.size() || xc < pts[i]);
      if (inside) cross.push_back(xc);
    }
    pts = merged(pts, cross);
    std::vector<Piece> out;
    for (std::size_t i = 0; i <= pts.size(); ++i) {
      const double x = sample(pts, i);
      const Piece a = f.pieces_[f.locate(x)], b = g.pieces_[g.locate(x)];
      out.push_back((a.at(x) >= b.at(x)) == take_max ? a : b);
    }
    return simplify(pts, out);
  }

  std::vector<double> bp_;
  std::vector<Piece> pieces_;
};

struct Interval {
  double lo, hi;
  bool contains(double v, double tol = 0.0) const { return v >= lo - tol && v <= hi + tol; }
  bool operator==(const Interval&) const = default;
};

struct SubdifferentialReport {
  std::vector<double> b_sub;            // finite set
  std::optional<Interval> regular_sub;  // empty when absent
  std::vector<Interval> limiting_sub;   // union; degenerate intervals are points
  Interval clarke_sub;
};

inline SubdifferentialReport subdifferentials(const PiecewiseAffine1D& f, double x) {
  const auto [L, R] = f.side_slopes(x);
  SubdifferentialReport rep;
  if (L == R) {
    rep.b_sub = {L};
    rep.regular_sub = Interval{L, L};
    rep.limiting_sub = {{L, L}};
    rep.clarke_sub = {L, L};
    return rep;
  }
  rep.b_sub = {std::min(L, R), std::max(L, R)};
  rep.clarke_sub = {std::min(L, R), std::max(L, R)};
  if (L < R) {
    rep.regular_sub = Interval{L, R};
    rep.limiting_sub = {{L, R}};
  } else {
    rep.limiting_sub = {{R, R}, {L, L}};
  }
  return rep;
}

struct StationarityFlags {
  bool c_stationary = false;
  bool l_stationary = false;
  bool d_stationary = false;
  bool local_min = false;
};

inline StationarityFlags classify_point(const PiecewiseAffine1D& f, double x) {
  const auto rep = subdifferentials(f, x);
  const auto [L, R] = f.side_slopes(x);
  StationarityFlags fl;
  fl.c_stationary = rep.clarke_sub.contains(0.0);
  fl.l_stationary = std::any_of(rep.limiting_sub.begin(), rep.limiting_sub.end(),
                                [](const Interval& I) { return I.contains(0.0); });
  fl.d_stationary = R >= 0.0 && -L >= 0.0;
  // probe both neighbouring pieces halfway to the next breakpoint
  const auto& bp = f.breakpoints();
  double gap = 1.0;
  for (double b : bp)
    if (b != x) gap = std::min(gap, std::abs(b - x));
  const double fx = f(x);
  fl.local_min = f(x - 0.5 * gap) >= fx && f(x + 0.5 * gap) >= fx;
  return fl;
}

// ∂f1(x) ∩ ∂f2(x) ≠ ∅ for convex f1, f2.
inline bool dc_critical_check(const PiecewiseAffine1D& f1, const PiecewiseAffine1D& f2, double x) {
  if (!f1.convex() || !f2.convex()) throw std::invalid_argument("dc_critical_check: nonconvex input");
  const auto [l1, r1] = f1.side_slopes(x);
  const auto [l2, r2] = f2.side_slopes(x);
  return std::max(l1, l2) <= std::min(r1, r2);
}

struct ResidualReport {
  double residual = 0.0;
  PairSelection worst;
  std::size_t solved = 0;
  double total = 1.0;      // size of the exact-argmax product
  double coverage = 1.0;   // solved / total
  int sn_iterations = 0;
};

inline SNConfig tight_sn(SNConfig sn) {
  sn.tol_grad = std::min(sn.tol_grad, 1e-10);
  sn.max_iter = std::max(sn.max_iter, 500);
  return sn;
}

// ‖θ̄ − argmin Ψ̂_c(·, z̄)‖∞ for one selection, z̄ = (θ̄, ψ(θ̄), ψ(θ̄)).
inline double weak_mstat_residual(const CompositeProblem& P, const Vec& theta, const PairSelection& sel,
                                  double c, const SNConfig& sn = {}, int* iters = nullptr) {
  const auto z = init_state(P, theta);
  const auto sub = build_subproblem(P, z, sel, c);
  const auto res = sn_solve(sub, Vec(), tight_sn(sn));
  if (!res.z.theta.allFinite()) throw std::runtime_error("subproblem solver failure");
  if (iters) *iters += res.iterations;
  return (res.z.theta - theta).lpNorm<Eigen::Infinity>();
}

inline ResidualReport dstat_residual(const CompositeProblem& P, const Vec& theta, double c,
                                     std::size_t combo_cap = 64, std::uint64_t seed = 0,
                                     const SNConfig& sn = {}) {
  const auto sets = argmax_sets(P, theta, kTieTol);
  ResidualReport rep;
  rep.total = selection_count(sets);
  std::vector<PairSelection> sels;
  if (rep.total <= static_cast<double>(combo_cap)) {
    sels = enumerate_selections(sets, combo_cap);
  } else {
    const std::size_t head = std::max<std::size_t>(1, combo_cap / 2);
    sels = enumerate_selections(sets, head);
    std::mt19937_64 rng(seed);
    std::set<PairSelection> seen(sels.begin(), sels.end());
    for (std::size_t guard = 0; sels.size() < combo_cap && guard < 100 * combo_cap; ++guard) {
      PairSelection sel(sets.size());
      for (std::size_t s = 0; s < sets.size(); ++s) {
        std::uniform_int_distribution<std::size_t> pick(0, sets[s].pairs() - 1);
        const std::size_t k = pick(rng);
        sel[s] = {sets[s].g[k / sets[s].h.size()], sets[s].h[k % sets[s].h.size()]};
      }
      if (seen.insert(sel).second) sels.push_back(std::move(sel));
    }
  }
  rep.residual = -1.0;
  for (const auto& sel : sels) {
    const double r = weak_mstat_residual(P, theta, sel, c, sn, &rep.sn_iterations);
    if (r > rep.residual) {
      rep.residual = r;
      rep.worst = sel;
    }
  }
  rep.solved = sels.size();
  rep.coverage = static_cast<double>(rep.solved) / rep.total;
  return rep;
}

}  // namespace dcmm
