#pragma once

// Semismooth Newton on the dual of the slack-form MM subproblem (affine atoms).
//
// Primal, for a fixed pair selection and anchor ẑ:
//   min  w Σ_s [φ↑(r_s) + φ↓(s_s)] + γ P̂(θ) + c/2 ‖θ − θ̂‖² + cw/2 ‖(r, s, r̂, ŝ) − anchor‖²
//   s.t. B1 θ − E1 r + r̂ = β1,   B2 θ + E2 s + ŝ = β2,   r̂, ŝ ≥ 0,   θ ∈ Θ
// with w = 1/N. Multipliers (λ, μ) are free.

#include "problem.hpp"

#include <Eigen/SparseCore>

namespace dcmm {

using RowSparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct DualSubproblem {
  RowSparse B1, B2;
  Vec beta1, beta2;
  std::vector<Index> off1, off2;  // row offsets per sample, size N+1
  std::vector<MonotoneSplit> splits;
  AugmentedIterate anchor;
  double c = 1.0;
  double w = 1.0;
  Vec l1, lin;
  double reg_const = 0.0;
  std::optional<Box> box;
  PairSelection selection;

  int samples() const { return static_cast<int>(splits.size()); }
  Index n1() const { return B1.rows(); }
  Index n2() const { return B2.rows(); }
  Index rows() const { return n1() + n2(); }
  Index dim() const { return B1.cols(); }
};

// b1 rows (ψ_{1,i} − ψ_{2,i2}) and b2 rows (ψ_{2,j} − ψ_{1,i1}) for every sample.
// Slack anchors are re-synced to the residuals of the chosen rows at θ̂, clamped at 0.
inline DualSubproblem build_subproblem(const CompositeProblem& P, const AugmentedIterate& z,
                                       const PairSelection& sel, double c) {
  if (!P.is_affine()) throw std::invalid_argument("subproblem solver supports affine atoms only");
  if (!(c > 0)) throw std::invalid_argument("proximal weight must be positive");
  require_dim(static_cast<Index>(sel.size()), P.size(), "pair selection");
  const Index m = P.dim();
  DualSubproblem sub;
  sub.c = c;
  sub.w = P.weight();
  sub.selection = sel;
  sub.box = P.box();
  const auto maj = regularizer_majorant(P.regularizer(), z.theta, z.theta);
  sub.l1 = maj.l1;
  sub.lin = maj.linear;
  sub.reg_const = maj.constant;

  std::vector<Eigen::Triplet<double>> t1, t2;
  sub.beta1.resize(P.g_rows());
  sub.beta2.resize(P.h_rows());
  sub.off1.assign(1, 0);
  sub.off2.assign(1, 0);
  sub.splits.reserve(static_cast<std::size_t>(P.size()));
  for (int s = 0; s < P.size(); ++s) {
    const auto& sm = P.summand(s);
    const auto& g = sm.model.g();
    const auto& h = sm.model.h();
    const auto [i1, i2] = sel[static_cast<std::size_t>(s)];
    if (i1 < 0 || i1 >= g.size() || i2 < 0 || i2 >= h.size())
      throw std::out_of_range("pair selection index out of range");
    const auto& a1 = g.atom(i1);
    const auto& a2 = h.atom(i2);
    for (int i = 0; i < g.size(); ++i) {
      const Index row = P.g_offset(s) + i;
      SpVec diff = g.atom(i).linear() - a2.linear();
      for (SpVec::InnerIterator it(diff); it; ++it) t1.emplace_back(row, it.index(), it.value());
      sub.beta1[row] = a2.offset() - g.atom(i).offset();
    }
    for (int j = 0; j < h.size(); ++j) {
      const Index row = P.h_offset(s) + j;
      SpVec diff = h.atom(j).linear() - a1.linear();
      for (SpVec::InnerIterator it(diff); it; ++it) t2.emplace_back(row, it.index(), it.value());
      sub.beta2[row] = a1.offset() - h.atom(j).offset();
    }
    sub.off1.push_back(P.g_offset(s) + g.size());
    sub.off2.push_back(P.h_offset(s) + h.size());
    sub.splits.push_back(sm.loss);
  }
  sub.B1.resize(P.g_rows(), m);
  sub.B2.resize(P.h_rows(), m);
  sub.B1.setFromTriplets(t1.begin(), t1.end());
  sub.B2.setFromTriplets(t2.begin(), t2.end());

  sub.anchor = z;
  const Vec a1 = sub.B1 * z.theta - sub.beta1;
  const Vec a2 = sub.beta2 - sub.B2 * z.theta;
  for (int s = 0; s < sub.samples(); ++s) {
    for (Index i = sub.off1[s]; i < sub.off1[s + 1]; ++i)
      sub.anchor.r_hat[i] = std::max(z.r[s] - a1[i], 0.0);
    for (Index j = sub.off2[s]; j < sub.off2[s + 1]; ++j)
      sub.anchor.s_hat[j] = std::max(a2[j] - z.s[s], 0.0);
  }
  return sub;
}

// Ψ̂_c(z, ẑ) without the indicator of the slack signs.
inline double subproblem_objective(const DualSubproblem& sub, const AugmentedIterate& z) {
  const auto& a = sub.anchor;
  double loss = 0.0;
  for (int s = 0; s < sub.samples(); ++s)
    loss += sub.splits[static_cast<std::size_t>(s)].up.value(z.r[s]) +
            sub.splits[static_cast<std::size_t>(s)].down.value(z.s[s]);
  const double reg = sub.l1.dot(z.theta.cwiseAbs()) - sub.lin.dot(z.theta) - sub.reg_const;
  const double aux = (z.r - a.r).squaredNorm() + (z.s - a.s).squaredNorm() +
                     (z.r_hat - a.r_hat).squaredNorm() + (z.s_hat - a.s_hat).squaredNorm();
  return sub.w * loss + reg + 0.5 * sub.c * (z.theta - a.theta).squaredNorm() +
         0.5 * sub.c * sub.w * aux;
}

inline Vec constraint_residual(const DualSubproblem& sub, const AugmentedIterate& z) {
  Vec res(sub.rows());
  Vec r1 = sub.B1 * z.theta + z.r_hat - sub.beta1;
  Vec r2 = sub.B2 * z.theta + z.s_hat - sub.beta2;
  for (int s = 0; s < sub.samples(); ++s) {
    r1.segment(sub.off1[s], sub.off1[s + 1] - sub.off1[s]).array() -= z.r[s];
    r2.segment(sub.off2[s], sub.off2[s + 1] - sub.off2[s]).array() += z.s[s];
  }
  res << r1, r2;
  return res;
}

// argmin over Θ of (agg − lin)ᵀθ + Σ l1_i|θ_i| + c/2‖θ − θ̂‖²; D marks the
// coordinates where the map has slope one (right branch at kinks).
inline Vec inner_theta(const DualSubproblem& sub, const Vec& agg, Vec* D = nullptr) {
  const Vec u = sub.anchor.theta - (agg - sub.lin) / sub.c;
  Vec th(u.size());
  if (D) D->resize(u.size());
  for (Index i = 0; i < u.size(); ++i) {
    const double thr = sub.l1[i] / sub.c;
    double v = u[i] >= thr ? u[i] - thr : (u[i] < -thr ? u[i] + thr : 0.0);
    bool live = u[i] >= thr || u[i] < -thr;
    if (sub.box) {
      if (v < sub.box->lower[i]) {
        v = sub.box->lower[i];
        live = false;
      } else if (v >= sub.box->upper[i]) {
        v = sub.box->upper[i];
        live = false;
      }
    }
    th[i] = v;
    if (D) (*D)[i] = live ? 1.0 : 0.0;
  }
  return th;
}

inline Vec inner_theta(const DualSubproblem& sub, const Vec& lambda, const Vec& mu) {
  return inner_theta(sub, Vec(sub.B1.transpose() * lambda + sub.B2.transpose() * mu));
}

// componentwise max(anchor − multiplier/c, 0)
inline Vec prox_slack(const Vec& anchor, const Vec& multiplier, double c) {
  return (anchor - multiplier / c).cwiseMax(0.0);
}

struct DualPoint {
  double value = 0.0;
  Vec grad;
  AugmentedIterate z;
  // generalized derivative selections
  Vec d_theta, d_r, d_s, d_rhat, d_shat;
};

inline DualPoint dual_eval(const DualSubproblem& sub, const Vec& x) {
  require_dim(x.size(), sub.rows(), "multipliers");
  const auto lam = x.head(sub.n1());
  const auto mu = x.tail(sub.n2());
  const double cw = sub.c * sub.w;
  DualPoint p;
  p.z.theta = inner_theta(sub, Vec(sub.B1.transpose() * lam + sub.B2.transpose() * mu), &p.d_theta);
  const int N = sub.samples();
  p.z.r.resize(N);
  p.z.s.resize(N);
  p.d_r.resize(N);
  p.d_s.resize(N);
  for (int s = 0; s < N; ++s) {
    const auto& L = sub.splits[static_cast<std::size_t>(s)];
    const double a = lam.segment(sub.off1[s], sub.off1[s + 1] - sub.off1[s]).sum();
    const double b = mu.segment(sub.off2[s], sub.off2[s + 1] - sub.off2[s]).sum();
    const auto pr = L.prox_up(a / sub.w, sub.anchor.r[s], sub.c);
    const auto ps = L.prox_down(b / sub.w, sub.anchor.s[s], sub.c);
    p.z.r[s] = pr.point;
    p.z.s[s] = ps.point;
    p.d_r[s] = pr.slope;
    p.d_s[s] = ps.slope;
  }
  const Vec vr = sub.anchor.r_hat - lam / cw;
  const Vec vs = sub.anchor.s_hat - mu / cw;
  p.z.r_hat = vr.cwiseMax(0.0);
  p.z.s_hat = vs.cwiseMax(0.0);
  p.d_rhat = (vr.array() >= 0).cast<double>();
  p.d_shat = (vs.array() >= 0).cast<double>();
  p.grad = constraint_residual(sub, p.z);
  p.value = subproblem_objective(sub, p.z) + x.dot(p.grad);
  return p;
}

inline std::pair<double, Vec> dual_value_grad(const DualSubproblem& sub, const Vec& x) {
  auto p = dual_eval(sub, x);
  return {p.value, std::move(p.grad)};
}

// V = (1/c) B D_θ Bᵀ + (1/(cw)) blockdiag(d_r 11ᵀ + D_r̂, d_s 11ᵀ + D_ŝ), an element of ∂_C(−∇ξ).
inline Mat gen_jacobian(const DualSubproblem& sub, const Vec& x) {
  const auto p = dual_eval(sub, x);
  const Index n = sub.rows();
  Mat B(n, sub.dim());
  B.topRows(sub.n1()) = Mat(sub.B1);
  B.bottomRows(sub.n2()) = Mat(sub.B2);
  Mat V = B * p.d_theta.asDiagonal() * B.transpose() / sub.c;
  const double k = 1.0 / (sub.c * sub.w);
  for (int s = 0; s < sub.samples(); ++s) {
    const Index a = sub.off1[s], la = sub.off1[s + 1] - a;
    V.block(a, a, la, la).array() += k * p.d_r[s];
    const Index b = sub.n1() + sub.off2[s], lb = sub.off2[s + 1] - sub.off2[s];
    V.block(b, b, lb, lb).array() += k * p.d_s[s];
  }
  V.diagonal().head(sub.n1()) += k * p.d_rhat;
  V.diagonal().tail(sub.n2()) += k * p.d_shat;
  return V;
}

struct SNConfig {
  double rho = 0.5;
  double sigma = 1e-4;
  double tol_grad = 1e-6;
  int max_iter = 200;
  int max_backtracks = 50;
  double eps_floor = 1e-8;
  double eps_cap = 1e-2;

  void validate() const {
    if (!(rho > 0 && rho < 1)) throw std::invalid_argument("sn.rho must lie in (0,1)");
    if (!(sigma > 0 && sigma < 1)) throw std::invalid_argument("sn.sigma must lie in (0,1)");
    if (!(tol_grad > 0)) throw std::invalid_argument("sn.tol_grad must be positive");
    if (max_iter < 1) throw std::invalid_argument("sn.max_iter must be at least 1");
  }
};

struct SNResult {
  Vec x;  // (λ, μ)
  AugmentedIterate z;  // feasible primal recovered from the inner minimizers
  double kkt_residual = 0.0;  // ‖∇ξ‖∞ at x
  double dual_value = 0.0;
  double primal_value = 0.0;
  double gap = 0.0;
  int iterations = 0;
  int backtracks = 0;
  bool converged = false;
  std::vector<double> history;  // dual value at every accepted iterate, start included
};

namespace detail {

// Solves (V + εI) d = rhs through per-sample Sherman–Morrison blocks and a
// Woodbury correction over the live θ coordinates.
class NewtonSystem {
 public:
  NewtonSystem(const DualSubproblem& sub, const DualPoint& p, double eps) : sub_(sub) {
    const double k = 1.0 / (sub.c * sub.w);
    delta_.resize(sub.rows());
    delta_.head(sub.n1()) = (k * p.d_rhat).array() + eps;
    delta_.tail(sub.n2()) = (k * p.d_shat).array() + eps;
    alpha_.resize(2 * sub.samples());
    for (int s = 0; s < sub.samples(); ++s) {
      alpha_[2 * s] = k * p.d_r[s];
      alpha_[2 * s + 1] = k * p.d_s[s];
    }
    for (Index i = 0; i < p.d_theta.size(); ++i)
      if (p.d_theta[i] > 0) live_.push_back(i);
    const Index n = sub.rows(), q = static_cast<Index>(live_.size());
    std::vector<Index> pos(static_cast<std::size_t>(sub.dim()), -1);
    for (Index j = 0; j < q; ++j) pos[static_cast<std::size_t>(live_[static_cast<std::size_t>(j)])] = j;
    U_.setZero(n, q);
    const double sc = 1.0 / std::sqrt(sub.c);
    auto fill = [&](const RowSparse& B, Index shift) {
      for (Index i = 0; i < B.outerSize(); ++i)
        for (RowSparse::InnerIterator it(B, i); it; ++it)
          if (const Index j = pos[static_cast<std::size_t>(it.col())]; j >= 0) U_(shift + i, j) = it.value() * sc;
    };
    fill(sub.B1, 0);
    fill(sub.B2, sub.n1());
    GiU_.resize(n, q);
    for (Index j = 0; j < q; ++j) GiU_.col(j) = apply_ginv(U_.col(j));
    Mat C = Mat::Identity(q, q) + U_.transpose() * GiU_;
    cap_.compute(C);
  }

  bool ok() const { return cap_.info() == Eigen::Success; }

  Vec apply(const Vec& x) const {
    Vec out = delta_.cwiseProduct(x);
    for_blocks([&](Index a, Index len, double al) {
      if (al != 0.0) out.segment(a, len).array() += al * x.segment(a, len).sum();
    });
    if (U_.cols() > 0) out.noalias() += U_ * (U_.transpose() * x);
    return out;
  }

  Vec solve(const Vec& rhs) const {
    Vec d = solve_once(rhs);
    for (int it = 0; it < 3; ++it) {
      const Vec res = rhs - apply(d);
      if (res.lpNorm<Eigen::Infinity>() <= 1e-14 * std::max(1.0, rhs.lpNorm<Eigen::Infinity>())) break;
      d += solve_once(res);
    }
    return d;
  }

 private:
  template <class F>
  void for_blocks(F&& f) const {
    for (int s = 0; s < sub_.samples(); ++s) {
      f(sub_.off1[s], sub_.off1[s + 1] - sub_.off1[s], alpha_[2 * s]);
      f(sub_.n1() + sub_.off2[s], sub_.off2[s + 1] - sub_.off2[s], alpha_[2 * s + 1]);
    }
  }

  Vec apply_ginv(const Vec& v) const {
    Vec y = v.cwiseQuotient(delta_);
    for_blocks([&](Index a, Index len, double al) {
      if (al == 0.0 || len == 0) return;
      const auto di = delta_.segment(a, len).cwiseInverse();
      const double num = al * y.segment(a, len).sum();
      const double den = 1.0 + al * di.sum();
      y.segment(a, len) -= (num / den) * di;
    });
    return y;
  }

  Vec solve_once(const Vec& rhs) const {
    Vec y = apply_ginv(rhs);
    if (U_.cols() == 0) return y;
    const Vec t = cap_.solve(U_.transpose() * y);
    return y - GiU_ * t;
  }

  const DualSubproblem& sub_;
  Vec delta_, alpha_;
  std::vector<Index> live_;
  Mat U_, GiU_;
  Eigen::LDLT<Mat> cap_;
};

inline bool finite(const Vec& v) { return v.allFinite(); }

}  // namespace detail

// Recovers an exactly feasible primal point from the inner minimizers:
// r_s is raised to cover every g row, s_s lowered below every h row, slacks recomputed.
inline AugmentedIterate repair_primal(const DualSubproblem& sub, const AugmentedIterate& inner) {
  AugmentedIterate z = inner;
  const Vec a1 = sub.B1 * z.theta - sub.beta1;
  const Vec a2 = sub.beta2 - sub.B2 * z.theta;
  for (int s = 0; s < sub.samples(); ++s) {
    const Index o1 = sub.off1[s], l1 = sub.off1[s + 1] - o1;
    const Index o2 = sub.off2[s], l2 = sub.off2[s + 1] - o2;
    z.r[s] = std::max(z.r[s], a1.segment(o1, l1).maxCoeff());
    z.s[s] = std::min(z.s[s], a2.segment(o2, l2).minCoeff());
    z.r_hat.segment(o1, l1) = (z.r[s] - a1.segment(o1, l1).array()).matrix();
    z.s_hat.segment(o2, l2) = (a2.segment(o2, l2).array() - z.s[s]).matrix();
  }
  return z;
}

inline SNResult sn_solve(const DualSubproblem& sub, const Vec& warm, const SNConfig& cfg) {
  cfg.validate();
  Vec x = warm.size() == sub.rows() ? warm : Vec::Zero(sub.rows());
  DualPoint cur = dual_eval(sub, x);
  SNResult res;
  res.history.push_back(cur.value);
  int k = 0;
  for (; k < cfg.max_iter; ++k) {
    const double gn = cur.grad.lpNorm<Eigen::Infinity>();
    if (gn <= cfg.tol_grad) {
      res.converged = true;
      break;
    }
    double eps = std::min(cfg.eps_floor + gn, cfg.eps_cap);
    Vec d;
    for (int attempt = 0; attempt < 3; ++attempt) {
      detail::NewtonSystem sys(sub, cur, eps);
      if (sys.ok()) {
        d = sys.solve(cur.grad);
        if (detail::finite(d)) break;
      }
      d.resize(0);
      eps *= 100.0;
    }
    double slope = d.size() ? cur.grad.dot(d) : -1.0;
    if (!(slope > 0)) {
      d = cur.grad;
      slope = d.squaredNorm();
    }
    bool accepted = false;
    // below rounding level the dual value cannot certify ascent; fall back to
    // accepting the unit step when it shrinks the gradient
    if (cfg.sigma * slope <= 1e-15 * std::max(1.0, std::abs(cur.value))) {
      DualPoint trial = dual_eval(sub, x + d);
      if (trial.grad.lpNorm<Eigen::Infinity>() < gn) {
        x += d;
        cur = std::move(trial);
        accepted = true;
        res.history.push_back(cur.value);
      }
      if (!accepted) break;
      continue;
    }
    for (int tries = 0; tries < 2 && !accepted; ++tries) {
      double step = 1.0;
      for (int bt = 0; bt <= cfg.max_backtracks; ++bt, step *= cfg.rho) {
        DualPoint trial = dual_eval(sub, x + step * d);
        if (std::isfinite(trial.value) && trial.value >= cur.value + cfg.sigma * step * slope) {
          x += step * d;
          cur = std::move(trial);
          accepted = true;
          res.history.push_back(cur.value);
          break;
        }
        ++res.backtracks;
      }
      if (!accepted) {
        if (d == cur.grad) break;
        d = cur.grad;
        slope = d.squaredNorm();
      }
    }
    if (!accepted) break;
  }
  res.iterations = k;
  res.x = x;
  res.kkt_residual = cur.grad.lpNorm<Eigen::Infinity>();
  if (!res.converged && res.kkt_residual <= cfg.tol_grad) res.converged = true;
  res.dual_value = cur.value;
  res.z = repair_primal(sub, cur.z);
  res.primal_value = subproblem_objective(sub, res.z);
  res.gap = res.primal_value - res.dual_value;
  return res;
}

}  // namespace dcmm
