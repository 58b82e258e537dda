#pragma once

// Atoms, pointwise maxima, monotone loss splits and majorants.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dcmm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SpVec = Eigen::SparseVector<double>;
using Index = Eigen::Index;

inline constexpr double kTieTol = 1e-9;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require_dim(Index got, Index want, const char* what) {
  if (got != want)
    throw DimensionError(std::string(what) + ": dimension " + std::to_string(got) +
                         ", expected " + std::to_string(want));
}

// value(θ) = wᵀθ + b, plus ½θᵀQθ for the quadratic kind.
class SmoothConvexAtom {
 public:
  SmoothConvexAtom() = default;

  static SmoothConvexAtom affine(SpVec w, double b) {
    SmoothConvexAtom a;
    a.w_ = std::move(w);
    a.b_ = b;
    return a;
  }
  static SmoothConvexAtom affine(const Vec& w, double b) {
    return affine(SpVec(w.sparseView(0.0, 0.0)), b);
  }
  static SmoothConvexAtom zero(Index dim) { return affine(SpVec(dim), 0.0); }

  // Q must be symmetric PSD; checked up to a small relative tolerance.
  static SmoothConvexAtom quadratic(const Mat& Q, const Vec& w, double b) {
    require_dim(Q.rows(), w.size(), "quadratic atom Q rows");
    require_dim(Q.cols(), w.size(), "quadratic atom Q cols");
    const double scale = std::max(1.0, Q.cwiseAbs().maxCoeff());
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw std::invalid_argument("quadratic atom: Q not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(Q, Eigen::EigenvaluesOnly);
    if (Q.size() > 0 && es.eigenvalues().minCoeff() < -1e-10 * scale)
      throw std::invalid_argument("quadratic atom: Q not positive semidefinite");
    SmoothConvexAtom a = affine(w, b);
    a.q_ = std::make_shared<const Mat>(Q);
    return a;
  }

  Index dim() const { return w_.size(); }
  bool is_affine() const { return !q_; }
  const SpVec& linear() const { return w_; }
  double offset() const { return b_; }
  const Mat* hessian() const { return q_.get(); }

  double value(const Vec& x) const {
    require_dim(x.size(), dim(), "atom argument");
    double v = w_.dot(x) + b_;
    if (q_) v += 0.5 * x.dot(*q_ * x);
    return v;
  }
  Vec gradient(const Vec& x) const {
    require_dim(x.size(), dim(), "atom argument");
    Vec g = Vec(w_);
    if (q_) g.noalias() += *q_ * x;
    return g;
  }
  double directional(const Vec& x, const Vec& v) const {
    double d = w_.dot(v);
    if (q_) d += v.dot(*q_ * x);
    return d;
  }

 private:
  SpVec w_;
  double b_ = 0.0;
  std::shared_ptr<const Mat> q_;
};

struct MaxEval {
  double value;
  std::vector<int> argmax;
};

class MaxFunction {
 public:
  MaxFunction() = default;
  explicit MaxFunction(std::vector<SmoothConvexAtom> atoms) : atoms_(std::move(atoms)) {
    if (atoms_.empty()) throw std::invalid_argument("MaxFunction needs at least one atom");
    for (const auto& a : atoms_) require_dim(a.dim(), atoms_.front().dim(), "atom");
  }

  Index dim() const { return atoms_.empty() ? 0 : atoms_.front().dim(); }
  int size() const { return static_cast<int>(atoms_.size()); }
  const SmoothConvexAtom& atom(int i) const { return atoms_.at(static_cast<std::size_t>(i)); }
  const std::vector<SmoothConvexAtom>& atoms() const { return atoms_; }
  bool is_affine() const {
    return std::all_of(atoms_.begin(), atoms_.end(), [](const auto& a) { return a.is_affine(); });
  }

  Vec atom_values(const Vec& x) const {
    require_dim(x.size(), dim(), "max argument");
    Vec v(size());
    for (int i = 0; i < size(); ++i) v[i] = atoms_[i].value(x);
    return v;
  }
  double value(const Vec& x) const { return atom_values(x).maxCoeff(); }

  // indices within eps of the max, in increasing order
  std::vector<int> near_max(const Vec& x, double eps) const {
    const Vec v = atom_values(x);
    const double m = v.maxCoeff();
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (v[i] >= m - eps) out.push_back(i);
    return out;
  }

 private:
  std::vector<SmoothConvexAtom> atoms_;
};

inline MaxEval max_eval(const MaxFunction& f, const Vec& x) {
  const Vec v = f.atom_values(x);
  const double m = v.maxCoeff();
  MaxEval r{m, {}};
  for (int i = 0; i < f.size(); ++i)
    if (v[i] >= m - kTieTol) r.argmax.push_back(i);
  return r;
}

inline std::vector<int> eps_argmax(const MaxFunction& f, const Vec& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("eps_argmax: eps must be positive");
  return f.near_max(x, eps);
}

// max over the active atoms of ∇ᵀv
inline double max_dir(const MaxFunction& f, const Vec& x, const Vec& v) {
  require_dim(v.size(), f.dim(), "direction");
  double best = -std::numeric_limits<double>::infinity();
  for (int i : max_eval(f, x).argmax) best = std::max(best, f.atom(i).directional(x, v));
  return best;
}

class DiffMaxFunction {
 public:
  DiffMaxFunction() = default;
  // An empty h becomes a single zero affine atom.
  DiffMaxFunction(MaxFunction g, std::vector<SmoothConvexAtom> h)
      : g_(std::move(g)),
        h_(h.empty() ? MaxFunction({SmoothConvexAtom::zero(g_.dim())}) : MaxFunction(std::move(h))) {
    require_dim(h_.dim(), g_.dim(), "h atoms");
  }
  DiffMaxFunction(MaxFunction g, MaxFunction h) : g_(std::move(g)), h_(std::move(h)) {
    require_dim(h_.dim(), g_.dim(), "h atoms");
  }

  const MaxFunction& g() const { return g_; }
  const MaxFunction& h() const { return h_; }
  Index dim() const { return g_.dim(); }
  double value(const Vec& x) const { return g_.value(x) - h_.value(x); }

 private:
  MaxFunction g_, h_;
};

inline double diffmax_dir(const DiffMaxFunction& psi, const Vec& x, const Vec& v) {
  return max_dir(psi.g(), x, v) - max_dir(psi.h(), x, v);
}

// Convex function of one variable with a single kink at t0:
//   f(t) = f0 + b (t - t0) + a/2 (t - t0)^2, with (a, b) taken from the side of t.
class KinkedQuadratic {
 public:
  struct Side {
    double curv = 0.0;
    double slope = 0.0;
  };

  KinkedQuadratic() = default;
  KinkedQuadratic(double kink, double base, Side left, Side right)
      : t0_(kink), f0_(base), l_(left), r_(right) {
    if (l_.curv < 0 || r_.curv < 0 || l_.slope > r_.slope)
      throw std::invalid_argument("KinkedQuadratic: not convex");
  }
  static KinkedQuadratic linear(double slope) {
    return KinkedQuadratic(0.0, 0.0, {0.0, slope}, {0.0, slope});
  }
  static KinkedQuadratic constant(double c) { return KinkedQuadratic(0.0, c, {}, {}); }

  double kink() const { return t0_; }
  const Side& left() const { return l_; }
  const Side& right() const { return r_; }

  double value(double t) const {
    const double u = t - t0_;
    const Side& s = u >= 0 ? r_ : l_;
    return f0_ + s.slope * u + 0.5 * s.curv * u * u;
  }
  double right_derivative(double t) const {
    const double u = t - t0_;
    const Side& s = u >= 0 ? r_ : l_;
    return s.slope + s.curv * u;
  }
  double left_derivative(double t) const {
    const double u = t - t0_;
    const Side& s = u > 0 ? r_ : l_;
    return s.slope + s.curv * u;
  }
  // f'(t; d)
  double directional(double t, double d) const {
    return d >= 0 ? d * right_derivative(t) : d * left_derivative(t);
  }

  struct Prox {
    double point;
    double slope;  // d point / d v, right branch at kinks
  };

  // argmin_t f(t) + c/2 (t - v)^2
  Prox prox(double v, double c) const {
    const double u = v - t0_;
    if (c * u >= r_.slope) return {t0_ + (c * u - r_.slope) / (r_.curv + c), c / (r_.curv + c)};
    if (c * u < l_.slope) return {t0_ + (c * u - l_.slope) / (l_.curv + c), c / (l_.curv + c)};
    return {t0_, 0.0};
  }

 private:
  double t0_ = 0.0;
  double f0_ = 0.0;
  Side l_, r_;
};

struct UnivariateConvexLoss {
  enum class Kind { squared, quantile };
  Kind kind = Kind::squared;
  double y = 0.0;
  double tau = 0.5;

  static UnivariateConvexLoss squared(double y) { return {Kind::squared, y, 0.5}; }
  static UnivariateConvexLoss quantile(double y, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("quantile level must lie in (0,1)");
    return {Kind::quantile, y, tau};
  }

  double pivot() const { return y; }
  double value(double t) const {
    const double u = t - y;
    if (kind == Kind::squared) return 0.5 * u * u;
    return std::max(tau * u, (tau - 1.0) * u);
  }
};

// φ = φ↑ + φ↓ with φ↑ non-decreasing and φ↓ non-increasing.
struct MonotoneSplit {
  KinkedQuadratic up;
  KinkedQuadratic down;
  double pivot = std::numeric_limits<double>::quiet_NaN();

  double value(double t) const { return up.value(t) + down.value(t); }
  double directional(double t, double d) const {
    return up.directional(t, d) + down.directional(t, d);
  }
  KinkedQuadratic::Prox prox_up(double a, double anchor, double c) const {
    return up.prox(anchor + a / c, c);
  }
  // argmin φ↓(s) + b s + c/2 (s - anchor)^2
  KinkedQuadratic::Prox prox_down(double b, double anchor, double c) const {
    return down.prox(anchor - b / c, c);
  }

  // Split of a loss already known to be monotone: one slope per part.
  static MonotoneSplit linear(double up_slope, double down_slope) {
    if (up_slope < 0 || down_slope > 0)
      throw std::invalid_argument("MonotoneSplit::linear: wrong monotonicity");
    return {KinkedQuadratic::linear(up_slope), KinkedQuadratic::linear(down_slope),
            std::numeric_limits<double>::quiet_NaN()};
  }
};

inline MonotoneSplit monotone_split(const UnivariateConvexLoss& phi) {
  const double t0 = phi.pivot();
  switch (phi.kind) {
    case UnivariateConvexLoss::Kind::squared:
      return {KinkedQuadratic(t0, 0.0, {0.0, 0.0}, {1.0, 0.0}),
              KinkedQuadratic(t0, 0.0, {1.0, 0.0}, {0.0, 0.0}), t0};
    case UnivariateConvexLoss::Kind::quantile:
      return {KinkedQuadratic(t0, 0.0, {0.0, 0.0}, {0.0, phi.tau}),
              KinkedQuadratic(t0, 0.0, {0.0, phi.tau - 1.0}, {0.0, 0.0}), t0};
  }
  throw std::invalid_argument("monotone_split: unsupported loss kind");
}

inline double composite_dir(const MonotoneSplit& split, const DiffMaxFunction& psi, const Vec& x,
                            const Vec& v) {
  return split.directional(psi.value(x), diffmax_dir(psi, x, v));
}

// φ↑(g(θ) − lin ψ_{2,i2}) + φ↓(lin ψ_{1,i1} − h(θ)); linearizations taken at θ̄
// with the max values g(θ̄), h(θ̄) as constants.
inline double majorant_value(const MonotoneSplit& split, const DiffMaxFunction& psi,
                             std::pair<int, int> pair, const Vec& x, const Vec& xbar) {
  const auto [i1, i2] = pair;
  if (i1 < 0 || i1 >= psi.g().size() || i2 < 0 || i2 >= psi.h().size())
    throw std::out_of_range("majorant_value: atom index out of range");
  const Vec dx = x - xbar;
  const double lin_h = psi.h().value(xbar) + psi.h().atom(i2).directional(xbar, dx);
  const double lin_g = psi.g().value(xbar) + psi.g().atom(i1).directional(xbar, dx);
  return split.up.value(psi.g().value(x) - lin_h) + split.down.value(lin_g - psi.h().value(x));
}

// Smooth convex part of a separable penalty, one coordinate at a time.
struct SmoothPart {
  enum class Kind { none, scad };
  Kind kind = Kind::none;
  double lambda = 1.0;
  double a = 3.7;

  static SmoothPart scad(double lambda, double a = 3.7) {
    if (!(lambda > 0) || !(a > 2)) throw std::invalid_argument("SCAD needs lambda > 0 and a > 2");
    return {Kind::scad, lambda, a};
  }

  // λ|t| − scad(t): zero on [−λ, λ], quadratic up to aλ, then linear.
  double value(double t) const {
    if (kind == Kind::none) return 0.0;
    const double u = std::abs(t);
    if (u <= lambda) return 0.0;
    if (u <= a * lambda) return (u - lambda) * (u - lambda) / (2.0 * (a - 1.0));
    return lambda * u - 0.5 * (a + 1.0) * lambda * lambda;
  }
  double derivative(double t) const {
    if (kind == Kind::none) return 0.0;
    const double u = std::abs(t);
    const double sgn = t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0);
    if (u <= lambda) return 0.0;
    if (u <= a * lambda) return sgn * (u - lambda) / (a - 1.0);
    return sgn * lambda;
  }
};

// P(θ) = Σ c_i|θ_i| − Σ p_i(θ_i), scaled by gamma.
struct DcRegularizer {
  Vec weights;
  std::vector<SmoothPart> smooth;  // empty means p ≡ 0
  double gamma = 0.0;

  static DcRegularizer none(Index m) { return {Vec::Zero(m), {}, 0.0}; }
  static DcRegularizer l1(Index m, double gamma, double c = 1.0) {
    return {Vec::Constant(m, c), {}, gamma};
  }
  static DcRegularizer scad(Index m, double gamma, double lambda = 1.0, double a = 3.7) {
    return {Vec::Constant(m, lambda), std::vector<SmoothPart>(static_cast<std::size_t>(m),
                                                              SmoothPart::scad(lambda, a)),
            gamma};
  }

  bool active() const { return gamma > 0.0; }
  double smooth_value(const Vec& x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < smooth.size(); ++i) s += smooth[i].value(x[static_cast<Index>(i)]);
    return s;
  }
  Vec smooth_gradient(const Vec& x) const {
    Vec g = Vec::Zero(x.size());
    for (std::size_t i = 0; i < smooth.size(); ++i)
      g[static_cast<Index>(i)] = smooth[i].derivative(x[static_cast<Index>(i)]);
    return g;
  }
  double value(const Vec& x) const {
    if (!active()) return 0.0;
    return gamma * (weights.cwiseProduct(x.cwiseAbs()).sum() - smooth_value(x));
  }
};

struct RegularizerMajorant {
  double value;
  Vec l1;      // per-coordinate soft-threshold weights γ c_i
  Vec linear;  // γ ∇p(θ̄)
  double constant;  // γ [p(θ̄) − ∇p(θ̄)ᵀθ̄], subtracted
};

// γ[Σ c_i|θ_i| − p(θ̄) − ∇p(θ̄)ᵀ(θ − θ̄)]
inline RegularizerMajorant regularizer_majorant(const DcRegularizer& P, const Vec& x, const Vec& xbar) {
  const Index m = x.size();
  if (!P.active()) return {0.0, Vec::Zero(m), Vec::Zero(m), 0.0};
  const Vec grad = P.smooth_gradient(xbar);
  RegularizerMajorant out;
  out.l1 = P.gamma * P.weights;
  out.linear = P.gamma * grad;
  out.constant = P.gamma * (P.smooth_value(xbar) - grad.dot(xbar));
  out.value = out.l1.dot(x.cwiseAbs()) - out.linear.dot(x) - out.constant;
  return out;
}

}  // namespace dcmm
