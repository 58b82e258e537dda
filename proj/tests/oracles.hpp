#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include "dcmm/dcmm.hpp"

#include <Eigen/Dense>
#include <functional>
#include <random>

namespace oracle {

using dcmm::Index;
using dcmm::Mat;
using dcmm::Vec;

// ---- one-dimensional search ----------------------------------------------------

// Minimizer of a unimodal f on [lo, hi]: coarse grid, then golden-section refinement.
// Evaluated in long double, so the location is resolved to about 1e-9.
inline double golden_min(const std::function<long double(long double)>& f, double lo, double hi, int grid = 2001) {
  using R = long double;
  R best = lo, fb = f(lo);
  const R h = (R(hi) - R(lo)) / (grid - 1);
  for (int i = 1; i < grid; ++i) {
    const R x = lo + i * h, fx = f(x);
    if (fx < fb) best = x, fb = fx;
  }
  R a = std::max<R>(lo, best - h), b = std::min<R>(hi, best + h);
  const R g = 0.5L * (std::sqrt(5.0L) - 1.0L);
  R x1 = b - g * (b - a), x2 = a + g * (b - a), f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 300 && b - a > 1e-16L * (1.0L + std::abs(a)); ++it) {
    if (f1 <= f2) {
      b = x2, x2 = x1, f2 = f1;
      x1 = b - g * (b - a), f1 = f(x1);
    } else {
      a = x1, x1 = x2, f1 = f2;
      x2 = a + g * (b - a), f2 = f(x2);
    }
  }
  return static_cast<double>(0.5L * (a + b));
}

inline Vec central_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-6) {
  Vec g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vec p = x, m = x;
    p[i] += h;
    m[i] -= h;
    g[i] = (f(p) - f(m)) / (2 * h);
  }
  return g;
}

// ---- convex QP ------------------------------------------------------------------

// min ½xᵀHx + qᵀx + c0  s.t.  Ax = b,  Gx ≥ h
struct QP {
  Mat H;
  Vec q;
  Mat A;
  Vec b;
  Mat G;
  Vec h;
  double c0 = 0.0;

  double value(const Vec& x) const { return 0.5 * x.dot(H * x) + q.dot(x) + c0; }
};

struct QPSolution {
  Vec x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool polished = false;
};

// Mehrotra predictor-corrector, then an active-set crossover that re-solves the
// equality-constrained QP on the identified active constraints.
inline QPSolution solve_qp(const QP& P) {
  const Index n = P.H.rows(), p = P.A.rows(), mi = P.G.rows();
  Vec x = Vec::Zero(n), y = Vec::Zero(p), v = Vec::Ones(mi), z = Vec::Ones(mi);
  const double scale = 1.0 + P.q.lpNorm<Eigen::Infinity>() + P.b.lpNorm<Eigen::Infinity>() +
                       P.h.lpNorm<Eigen::Infinity>();
  QPSolution out;
  auto max_step = [](const Vec& u, const Vec& du) {
    double a = 1.0;
    for (Index i = 0; i < u.size(); ++i)
      if (du[i] < 0) a = std::min(a, -u[i] / du[i]);
    return a;
  };
  for (int it = 0; it < 200; ++it) {
    const Vec rd = P.H * x + P.q - P.A.transpose() * y - P.G.transpose() * z;
    const Vec rp = P.A * x - P.b;
    const Vec rg = P.G * x - v - P.h;
    const double mu = v.dot(z) / static_cast<double>(mi);
    out.iterations = it;
    const double res = std::max({rd.lpNorm<Eigen::Infinity>(), rp.lpNorm<Eigen::Infinity>(), rg.lpNorm<Eigen::Infinity>()});
    // the crossover below supplies the last digits; iterating into mu underflow only loses them
    if ((res <= 1e-12 * scale && mu <= 1e-14 * scale) || (res <= 1e-10 * scale && mu <= 1e-18 * scale)) {
      out.converged = true;
      break;
    }
    if (mu <= 1e-18 * scale) break;
    const Vec dz_over_v = z.cwiseQuotient(v);
    Mat M = Mat::Zero(n + p, n + p);
    M.topLeftCorner(n, n) = P.H + P.G.transpose() * dz_over_v.asDiagonal() * P.G;
    M.topRightCorner(n, p) = P.A.transpose();
    M.bottomLeftCorner(p, n) = P.A;
    const Eigen::PartialPivLU<Mat> lu(M);
    auto solve = [&](const Vec& rc, Vec& dx, Vec& dy, Vec& dv, Vec& dz) {
      Vec rhs(n + p);
      rhs.head(n) = -rd - P.G.transpose() * (rc + z.cwiseProduct(rg)).cwiseQuotient(v);
      rhs.tail(p) = -rp;
      const Vec sol = lu.solve(rhs);
      dx = sol.head(n);
      dy = -sol.tail(p);
      dv = P.G * dx + rg;
      dz = -(rc + z.cwiseProduct(dv)).cwiseQuotient(v);
    };
    Vec dx, dy, dv, dz;
    solve(v.cwiseProduct(z), dx, dy, dv, dz);
    const double a_aff = std::min(max_step(v, dv), max_step(z, dz));
    const double mu_aff = (v + a_aff * dv).dot(z + a_aff * dz) / static_cast<double>(mi);
    const double sigma = std::pow(mu_aff / mu, 3);
    const Vec rc = v.cwiseProduct(z) + dv.cwiseProduct(dz) - Vec::Constant(mi, sigma * mu);
    solve(rc, dx, dy, dv, dz);
    const double a = std::min(1.0, 0.995 * std::min(max_step(v, dv), max_step(z, dz)));
    x += a * dx;
    y += a * dy;
    v += a * dv;
    z += a * dz;
  }
  out.x = x;
  out.value = P.value(x);

  std::vector<Index> act;
  for (Index i = 0; i < mi; ++i)
    if (v[i] <= z[i]) act.push_back(i);
  const Index na = static_cast<Index>(act.size());
  Mat K = Mat::Zero(n + p + na, n + p + na);
  Vec rhs = Vec::Zero(n + p + na);
  K.topLeftCorner(n, n) = P.H;
  K.block(0, n, n, p) = P.A.transpose();
  K.block(n, 0, p, n) = P.A;
  rhs.head(n) = -P.q;
  rhs.segment(n, p) = P.b;
  for (Index k = 0; k < na; ++k) {
    K.block(0, n + p + k, n, 1) = P.G.row(act[k]).transpose();
    K.block(n + p + k, 0, 1, n) = P.G.row(act[k]);
    rhs[n + p + k] = P.h[act[k]];
  }
  const Vec sol = K.completeOrthogonalDecomposition().solve(rhs);
  const Vec xc = sol.head(n);
  const double tol = 1e-11 * scale;
  const bool feasible = (P.A * xc - P.b).lpNorm<Eigen::Infinity>() <= tol &&
                        (P.G * xc - P.h).minCoeff() >= -tol && xc.allFinite();
  if (feasible && P.value(xc) <= out.value + 1e-12 * std::max(1.0, std::abs(out.value))) {
    out.x = xc;
    out.value = P.value(xc);
    out.polished = true;
  }
  return out;
}

// ---- the MM subproblem as an explicit QP ------------------------------------------

struct SubproblemQP {
  QP qp;
  Index m = 0, N = 0, n1 = 0, n2 = 0;
  dcmm::AugmentedIterate unpack(const Vec& x) const {
    dcmm::AugmentedIterate z;
    z.theta = x.segment(0, m);
    z.r = x.segment(m, N);
    z.s = x.segment(m + N, N);
    z.r_hat = x.segment(m + 2 * N, n1);
    z.s_hat = x.segment(m + 2 * N + n1, n2);
    return z;
  }
};

// Kinked quadratic pieces become (t − kink) = a − b with a, b ≥ 0; ℓ1 terms get
// epigraph variables; the box becomes bound rows.
inline SubproblemQP subproblem_qp(const dcmm::DualSubproblem& sub) {
  SubproblemQP S;
  S.m = sub.dim();
  S.N = sub.samples();
  S.n1 = sub.n1();
  S.n2 = sub.n2();
  const Index m = S.m, N = S.N, n1 = S.n1, n2 = S.n2;
  const Index base = m + 2 * N + n1 + n2;
  const double w = sub.w, c = sub.c, cw = sub.c * sub.w;

  struct Extra {
    Index var;      // index of the primal scalar (r_s or s_s)
    const dcmm::KinkedQuadratic* f;
  };
  std::vector<Extra> kinked;
  std::vector<Index> l1_coords;
  for (Index s = 0; s < N; ++s) {
    kinked.push_back({m + s, &sub.splits[static_cast<std::size_t>(s)].up});
    kinked.push_back({m + N + s, &sub.splits[static_cast<std::size_t>(s)].down});
  }
  for (Index i = 0; i < m; ++i)
    if (sub.l1[i] > 0) l1_coords.push_back(i);
  std::vector<Extra> split_kinks;
  std::vector<Extra> smooth_kinks;
  for (const auto& e : kinked) {
    const auto& L = e.f->left();
    const auto& R = e.f->right();
    (L.curv == R.curv && L.slope == R.slope ? smooth_kinks : split_kinks).push_back(e);
  }
  const Index nk = static_cast<Index>(split_kinks.size());
  const Index nt = static_cast<Index>(l1_coords.size());
  const Index n = base + 2 * nk + nt;

  QP& P = S.qp;
  P.H = Mat::Zero(n, n);
  P.q = Vec::Zero(n);
  P.c0 = -sub.reg_const;
  auto prox = [&](Index i, double weight, double anchor) {
    P.H(i, i) += weight;
    P.q[i] -= weight * anchor;
    P.c0 += 0.5 * weight * anchor * anchor;
  };
  for (Index i = 0; i < m; ++i) {
    prox(i, c, sub.anchor.theta[i]);
    P.q[i] -= sub.lin[i];
  }
  for (Index s = 0; s < N; ++s) {
    prox(m + s, cw, sub.anchor.r[s]);
    prox(m + N + s, cw, sub.anchor.s[s]);
  }
  for (Index i = 0; i < n1; ++i) prox(m + 2 * N + i, cw, sub.anchor.r_hat[i]);
  for (Index i = 0; i < n2; ++i) prox(m + 2 * N + n1 + i, cw, sub.anchor.s_hat[i]);
  for (const auto& e : smooth_kinks) {
    // f0 + slope (t − k) + curv/2 (t − k)²
    const double k = e.f->kink(), sl = e.f->right().slope, cu = e.f->right().curv;
    P.H(e.var, e.var) += w * cu;
    P.q[e.var] += w * (sl - cu * k);
    P.c0 += w * (e.f->value(k) - sl * k + 0.5 * cu * k * k);
  }

  const Index neq = n1 + n2 + nk;
  P.A = Mat::Zero(neq, n);
  P.b = Vec::Zero(neq);
  const Mat B1 = Mat(sub.B1), B2 = Mat(sub.B2);
  for (Index s = 0; s < N; ++s) {
    for (Index i = sub.off1[s]; i < sub.off1[s + 1]; ++i) {
      P.A.block(i, 0, 1, m) = B1.row(i);
      P.A(i, m + s) = -1.0;
      P.A(i, m + 2 * N + i) = 1.0;
      P.b[i] = sub.beta1[i];
    }
    for (Index j = sub.off2[s]; j < sub.off2[s + 1]; ++j) {
      P.A.block(n1 + j, 0, 1, m) = B2.row(j);
      P.A(n1 + j, m + N + s) = 1.0;
      P.A(n1 + j, m + 2 * N + n1 + j) = 1.0;
      P.b[n1 + j] = sub.beta2[j];
    }
  }
  for (Index k = 0; k < nk; ++k) {
    const auto& e = split_kinks[static_cast<std::size_t>(k)];
    const Index a = base + 2 * k, b = a + 1;
    // t − a + b = kink
    P.A(n1 + n2 + k, e.var) = 1.0;
    P.A(n1 + n2 + k, a) = -1.0;
    P.A(n1 + n2 + k, b) = 1.0;
    P.b[n1 + n2 + k] = e.f->kink();
    const auto& L = e.f->left();
    const auto& R = e.f->right();
    P.H(a, a) += w * R.curv;
    P.H(b, b) += w * L.curv;
    P.q[a] += w * R.slope;
    P.q[b] -= w * L.slope;
    P.c0 += w * e.f->value(e.f->kink());
  }
  for (Index k = 0; k < nt; ++k) P.q[base + 2 * nk + k] = sub.l1[l1_coords[static_cast<std::size_t>(k)]];

  const Index nbox = sub.box ? 2 * m : 0;
  const Index nin = n1 + n2 + 2 * nk + 2 * nt + nbox;
  P.G = Mat::Zero(nin, n);
  P.h = Vec::Zero(nin);
  Index row = 0;
  for (Index i = 0; i < n1 + n2; ++i) P.G(row++, m + 2 * N + i) = 1.0;
  for (Index k = 0; k < 2 * nk; ++k) P.G(row++, base + k) = 1.0;
  for (Index k = 0; k < nt; ++k) {
    const Index t = base + 2 * nk + k, i = l1_coords[static_cast<std::size_t>(k)];
    P.G(row, t) = 1.0, P.G(row++, i) = -1.0;
    P.G(row, t) = 1.0, P.G(row++, i) = 1.0;
  }
  if (sub.box) {
    for (Index i = 0; i < m; ++i) {
      P.G(row, i) = 1.0, P.h[row++] = sub.box->lower[i];
      P.G(row, i) = -1.0, P.h[row++] = -sub.box->upper[i];
    }
  }
  return S;
}

// ---- random instances ---------------------------------------------------------------

struct InstanceSpec {
  int max_dim = 3;
  int max_samples = 3;
  int max_k1 = 3;
  int max_k2 = 3;
  int max_k_total = 6;
  bool allow_quantile = true;
  bool allow_regularizer = true;
  bool allow_box = true;
};

inline dcmm::CompositeProblem random_problem(std::mt19937_64& rng, const InstanceSpec& spec = {}) {
  std::uniform_int_distribution<int> dim_d(1, spec.max_dim), n_d(1, spec.max_samples);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int m = dim_d(rng), N = n_d(rng);
  int k1 = std::uniform_int_distribution<int>(1, spec.max_k1)(rng);
  int k2 = std::uniform_int_distribution<int>(0, std::max(0, std::min(spec.max_k2, spec.max_k_total - k1)))(rng);
  auto atom = [&] {
    Vec a(m);
    for (Index i = 0; i < m; ++i) a[i] = gauss(rng);
    return dcmm::SmoothConvexAtom::affine(a, gauss(rng));
  };
  std::vector<dcmm::Summand> sm;
  const bool quantile = spec.allow_quantile && unif(rng) < 0.4;
  const double tau = 0.2 + 0.6 * unif(rng);
  for (int s = 0; s < N; ++s) {
    std::vector<dcmm::SmoothConvexAtom> g, h;
    for (int i = 0; i < k1; ++i) g.push_back(atom());
    for (int j = 0; j < k2; ++j) h.push_back(atom());
    const double y = gauss(rng);
    const auto loss = quantile ? dcmm::UnivariateConvexLoss::quantile(y, tau) : dcmm::UnivariateConvexLoss::squared(y);
    sm.push_back({dcmm::monotone_split(loss), dcmm::DiffMaxFunction(dcmm::MaxFunction(g), h)});
  }
  dcmm::DcRegularizer reg = dcmm::DcRegularizer::none(m);
  if (spec.allow_regularizer) {
    const double u = unif(rng);
    if (u < 0.3) reg = dcmm::DcRegularizer::l1(m, 0.05 + 0.3 * unif(rng));
    else if (u < 0.6) reg = dcmm::DcRegularizer::scad(m, 0.05 + 0.3 * unif(rng), 0.3 + unif(rng));
  }
  std::optional<dcmm::Box> box;
  if (spec.allow_box && unif(rng) < 0.3) box = dcmm::Box{Vec::Constant(m, -1.0), Vec::Constant(m, 1.0)};
  return dcmm::CompositeProblem(std::move(sm), std::move(reg), std::move(box));
}

inline Vec random_point(std::mt19937_64& rng, const dcmm::CompositeProblem& P, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Vec x(P.dim());
  for (Index i = 0; i < x.size(); ++i) x[i] = gauss(rng);
  if (P.box()) x = x.cwiseMax(P.box()->lower).cwiseMin(P.box()->upper);
  return x;
}

// a uniformly drawn exact-argmax selection (any pair when ties are absent)
inline dcmm::PairSelection random_selection(std::mt19937_64& rng, const dcmm::CompositeProblem& P, const Vec& x,
                                            double eps = dcmm::kTieTol) {
  const auto sets = dcmm::argmax_sets(P, x, eps);
  dcmm::PairSelection sel;
  for (const auto& S : sets) {
    const auto k = std::uniform_int_distribution<std::size_t>(0, S.pairs() - 1)(rng);
    sel.emplace_back(S.g[k / S.h.size()], S.h[k % S.h.size()]);
  }
  return sel;
}

}  // namespace oracle
