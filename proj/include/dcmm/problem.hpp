#pragma once

// The composite objective (1/N) Σ φ_s(ψ_s(θ)) + γ P(θ) and the augmented MM state.

#include "funcs.hpp"

#include <optional>

namespace dcmm {

struct Summand {
  MonotoneSplit loss;
  DiffMaxFunction model;
};

struct Box {
  Vec lower, upper;
  bool contains(const Vec& x, double tol = 0.0) const {
    return ((x - lower).array() >= -tol).all() && ((upper - x).array() >= -tol).all();
  }
};

// z = (θ, r, s, r̂, ŝ); slacks stacked per sample in atom order.
struct AugmentedIterate {
  Vec theta, r, s, r_hat, s_hat;

  double distance(const AugmentedIterate& o) const {
    return std::sqrt((theta - o.theta).squaredNorm() + (r - o.r).squaredNorm() +
                     (s - o.s).squaredNorm() + (r_hat - o.r_hat).squaredNorm() +
                     (s_hat - o.s_hat).squaredNorm());
  }
};

// one (i1, i2) per sample
using PairSelection = std::vector<std::pair<int, int>>;

class CompositeProblem {
 public:
  CompositeProblem(std::vector<Summand> summands, DcRegularizer reg, std::optional<Box> box = {})
      : summands_(std::move(summands)), reg_(std::move(reg)), box_(std::move(box)) {
    if (summands_.empty()) throw std::invalid_argument("problem needs at least one summand");
    m_ = summands_.front().model.dim();
    for (const auto& s : summands_) require_dim(s.model.dim(), m_, "summand");
    if (reg_.weights.size() == 0) reg_.weights = Vec::Zero(m_);
    require_dim(reg_.weights.size(), m_, "regularizer weights");
    if ((reg_.weights.array() < 0).any()) throw std::invalid_argument("negative penalty weight");
    if (reg_.gamma < 0) throw std::invalid_argument("negative penalty scale");
    if (!reg_.smooth.empty()) require_dim(static_cast<Index>(reg_.smooth.size()), m_, "smooth part");
    if (box_) {
      require_dim(box_->lower.size(), m_, "box lower");
      require_dim(box_->upper.size(), m_, "box upper");
      if ((box_->lower.array() > box_->upper.array()).any())
        throw std::invalid_argument("empty box");
    }
    g_off_.push_back(0);
    h_off_.push_back(0);
    for (const auto& s : summands_) {
      g_off_.push_back(g_off_.back() + s.model.g().size());
      h_off_.push_back(h_off_.back() + s.model.h().size());
    }
  }

  Index dim() const { return m_; }
  int size() const { return static_cast<int>(summands_.size()); }
  double weight() const { return 1.0 / size(); }
  const Summand& summand(int s) const { return summands_[static_cast<std::size_t>(s)]; }
  const std::vector<Summand>& summands() const { return summands_; }
  const DcRegularizer& regularizer() const { return reg_; }
  const std::optional<Box>& box() const { return box_; }
  bool is_affine() const {
    for (const auto& s : summands_)
      if (!s.model.g().is_affine() || !s.model.h().is_affine()) return false;
    return true;
  }
  // start of sample s's block in r̂ (g atoms) and ŝ (h atoms)
  Index g_offset(int s) const { return g_off_[static_cast<std::size_t>(s)]; }
  Index h_offset(int s) const { return h_off_[static_cast<std::size_t>(s)]; }
  Index g_rows() const { return g_off_.back(); }
  Index h_rows() const { return h_off_.back(); }

  bool feasible(const Vec& x) const { return !box_ || box_->contains(x); }

  Vec psi(const Vec& x) const {
    require_dim(x.size(), m_, "theta");
    Vec v(size());
    for (int s = 0; s < size(); ++s) v[s] = summands_[static_cast<std::size_t>(s)].model.value(x);
    return v;
  }

  double loss(const Vec& x) const {
    const Vec p = psi(x);
    double acc = 0.0;
    for (int s = 0; s < size(); ++s) acc += summands_[static_cast<std::size_t>(s)].loss.value(p[s]);
    return acc * weight();
  }
  double objective(const Vec& x) const { return loss(x) + reg_.value(x); }

  // (1/N) Σ [φ↑(r) + φ↓(s)] + γ P(θ)
  double surrogate(const AugmentedIterate& z) const {
    double acc = 0.0;
    for (int s = 0; s < size(); ++s) {
      const auto& L = summands_[static_cast<std::size_t>(s)].loss;
      acc += L.up.value(z.r[s]) + L.down.value(z.s[s]);
    }
    return acc * weight() + reg_.value(z.theta);
  }

 private:
  std::vector<Summand> summands_;
  DcRegularizer reg_;
  std::optional<Box> box_;
  Index m_ = 0;
  std::vector<Index> g_off_, h_off_;
};

// r = s = ψ(θ); slacks r̂_i = g − ψ_{1,i}, ŝ_j = h − ψ_{2,j}.
inline AugmentedIterate init_state(const CompositeProblem& P, const Vec& theta) {
  require_dim(theta.size(), P.dim(), "theta0");
  if (!P.feasible(theta)) throw std::invalid_argument("initial point outside the feasible box");
  AugmentedIterate z;
  z.theta = theta;
  z.r.resize(P.size());
  z.s.resize(P.size());
  z.r_hat.resize(P.g_rows());
  z.s_hat.resize(P.h_rows());
  for (int s = 0; s < P.size(); ++s) {
    const auto& psi = P.summand(s).model;
    const Vec gv = psi.g().atom_values(theta), hv = psi.h().atom_values(theta);
    const double g = gv.maxCoeff(), h = hv.maxCoeff();
    z.r[s] = z.s[s] = g - h;
    z.r_hat.segment(P.g_offset(s), gv.size()) = (g - gv.array()).matrix();
    z.s_hat.segment(P.h_offset(s), hv.size()) = (h - hv.array()).matrix();
  }
  return z;
}

struct SampleSets {
  std::vector<int> g, h;
  std::size_t pairs() const { return g.size() * h.size(); }
};

// Per-sample near-argmax sets of g and h; eps = kTieTol gives the exact argmax.
inline std::vector<SampleSets> argmax_sets(const CompositeProblem& P, const Vec& theta, double eps) {
  std::vector<SampleSets> out(static_cast<std::size_t>(P.size()));
  for (int s = 0; s < P.size(); ++s) {
    const auto& psi = P.summand(s).model;
    out[static_cast<std::size_t>(s)] = {psi.g().near_max(theta, eps), psi.h().near_max(theta, eps)};
  }
  return out;
}

inline PairSelection first_selection(const std::vector<SampleSets>& sets) {
  PairSelection sel;
  sel.reserve(sets.size());
  for (const auto& s : sets) sel.emplace_back(s.g.front(), s.h.front());
  return sel;
}

// Size of the product of per-sample pair sets (may be +inf).
inline double selection_count(const std::vector<SampleSets>& sets) {
  double n = 1.0;
  for (const auto& s : sets) n *= static_cast<double>(s.pairs());
  return n;
}

// The first `cap` selections of the product in lexicographic order
// (sample 0 most significant, pairs ordered by (i1, i2)).
inline std::vector<PairSelection> enumerate_selections(const std::vector<SampleSets>& sets,
                                                       std::size_t cap) {
  std::vector<PairSelection> out;
  if (cap == 0) return out;
  std::vector<std::size_t> digit(sets.size(), 0);
  std::vector<std::size_t> varying;
  for (std::size_t s = 0; s < sets.size(); ++s)
    if (sets[s].pairs() > 1) varying.push_back(s);
  auto current = [&] {
    PairSelection sel(sets.size());
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const auto& S = sets[s];
      sel[s] = {S.g[digit[s] / S.h.size()], S.h[digit[s] % S.h.size()]};
    }
    return sel;
  };
  while (true) {
    out.push_back(current());
    if (out.size() >= cap) break;
    std::size_t k = varying.size();
    while (k > 0) {
      const std::size_t s = varying[k - 1];
      if (++digit[s] < sets[s].pairs()) break;
      digit[s] = 0;
      --k;
    }
    if (k == 0) break;
  }
  return out;
}

}  // namespace dcmm
