#pragma once

// Continuous piecewise affine regression: ψ(x) = max_i(aᵢᵀx + αᵢ) − max_j(bⱼᵀx + βⱼ).

#include "mm.hpp"

#include <atomic>
#include <mutex>
#include <numeric>
#include <thread>

namespace dcmm {

struct Dataset {
  Mat X;
  Vec y;

  Index size() const { return X.rows(); }
  Index dim() const { return X.cols(); }
  void validate() const {
    if (X.rows() < 1) throw std::invalid_argument("dataset is empty");
    require_dim(y.size(), X.rows(), "response");
    if (!X.allFinite() || !y.allFinite()) throw std::invalid_argument("dataset has non-finite entries");
  }
  Dataset subset(const std::vector<Index>& rows) const {
    Dataset d{Mat(static_cast<Index>(rows.size()), dim()), Vec(static_cast<Index>(rows.size()))};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      d.X.row(static_cast<Index>(i)) = X.row(rows[i]);
      d.y[static_cast<Index>(i)] = y[rows[i]];
    }
    return d;
  }
};

struct PWAModel {
  Mat A;
  Vec alpha;
  Mat B;  // zero rows when k2 = 0
  Vec beta;

  int k1() const { return static_cast<int>(A.rows()); }
  int k2() const { return static_cast<int>(B.rows()); }
  Index dim() const { return A.cols(); }

  double eval(const Vec& x) const {
    require_dim(x.size(), dim(), "model input");
    const double g = (A * x + alpha).maxCoeff();
    const double h = B.rows() ? (B * x + beta).maxCoeff() : 0.0;
    return g - h;
  }
  Vec eval(const Mat& X) const {
    Vec out(X.rows());
    for (Index i = 0; i < X.rows(); ++i) out[i] = eval(Vec(X.row(i).transpose()));
    return out;
  }
};

// θ = [a¹, α₁, …, a^{k1}, α_{k1}, b¹, β₁, …]
inline Index theta_size(Index d, int k1, int k2) { return (k1 + k2) * (d + 1); }

inline Vec flatten(const PWAModel& m) {
  const Index d = m.dim();
  Vec th(theta_size(d, m.k1(), m.k2()));
  for (int i = 0; i < m.k1(); ++i) {
    th.segment(i * (d + 1), d) = m.A.row(i).transpose();
    th[i * (d + 1) + d] = m.alpha[i];
  }
  for (int j = 0; j < m.k2(); ++j) {
    th.segment((m.k1() + j) * (d + 1), d) = m.B.row(j).transpose();
    th[(m.k1() + j) * (d + 1) + d] = m.beta[j];
  }
  return th;
}

inline PWAModel unflatten(const Vec& th, Index d, int k1, int k2) {
  require_dim(th.size(), theta_size(d, k1, k2), "theta");
  PWAModel m{Mat(k1, d), Vec(k1), Mat(k2, d), Vec(k2)};
  for (int i = 0; i < k1; ++i) {
    m.A.row(i) = th.segment(i * (d + 1), d).transpose();
    m.alpha[i] = th[i * (d + 1) + d];
  }
  for (int j = 0; j < k2; ++j) {
    m.B.row(j) = th.segment((k1 + j) * (d + 1), d).transpose();
    m.beta[j] = th[(k1 + j) * (d + 1) + d];
  }
  return m;
}

enum class LossKind { squared, quantile };
enum class PenaltyKind { l1, scad };

struct PWASpec {
  int k1 = 1;
  int k2 = 1;
  LossKind loss = LossKind::squared;
  double tau = 0.5;
  double gamma = 0.0;
  PenaltyKind penalty = PenaltyKind::scad;
  double lambda = 1.0;
  double scad_a = 3.7;
  double bound = 0.0;  // > 0 restricts θ to [−bound, bound]^m

  void validate() const {
    if (k1 < 1) throw std::invalid_argument("k1 must be at least 1");
    if (k2 < 0) throw std::invalid_argument("k2 must be nonnegative");
    if (loss == LossKind::quantile && !(tau > 0 && tau < 1))
      throw std::invalid_argument("quantile level must lie in (0,1)");
    if (!(gamma >= 0)) throw std::invalid_argument("gamma must be nonnegative");
    if (!(lambda > 0)) throw std::invalid_argument("penalty lambda must be positive");
    if (!(scad_a > 2)) throw std::invalid_argument("scad_a must exceed 2");
    if (!(bound >= 0)) throw std::invalid_argument("bound must be nonnegative");
  }
};

inline UnivariateConvexLoss make_loss(const PWASpec& spec, double y) {
  return spec.loss == LossKind::squared ? UnivariateConvexLoss::squared(y)
                                        : UnivariateConvexLoss::quantile(y, spec.tau);
}

inline CompositeProblem assemble(const Dataset& data, const PWASpec& spec) {
  data.validate();
  spec.validate();
  const Index d = data.dim();
  const Index m = theta_size(d, spec.k1, spec.k2);
  auto atom = [&](Index row, int block) {
    SpVec w(m);
    w.reserve(d + 1);
    for (Index j = 0; j < d; ++j)
      if (data.X(row, j) != 0.0) w.insert(block * (d + 1) + j) = data.X(row, j);
    w.insert(block * (d + 1) + d) = 1.0;
    return SmoothConvexAtom::affine(std::move(w), 0.0);
  };
  std::vector<Summand> sm;
  sm.reserve(static_cast<std::size_t>(data.size()));
  for (Index s = 0; s < data.size(); ++s) {
    std::vector<SmoothConvexAtom> g, h;
    for (int i = 0; i < spec.k1; ++i) g.push_back(atom(s, i));
    for (int j = 0; j < spec.k2; ++j) h.push_back(atom(s, spec.k1 + j));
    sm.push_back({monotone_split(make_loss(spec, data.y[s])), DiffMaxFunction(MaxFunction(std::move(g)), std::move(h))});
  }
  DcRegularizer reg = DcRegularizer::none(m);
  if (spec.gamma > 0)
    reg = spec.penalty == PenaltyKind::scad ? DcRegularizer::scad(m, spec.gamma, spec.lambda, spec.scad_a)
                                            : DcRegularizer::l1(m, spec.gamma, spec.lambda);
  std::optional<Box> box;
  if (spec.bound > 0) box = Box{Vec::Constant(m, -spec.bound), Vec::Constant(m, spec.bound)};
  return CompositeProblem(std::move(sm), std::move(reg), std::move(box));
}

// f_N as displayed with the unhalved squared residual: 2·loss + γP for squared loss.
inline double reported_objective(const CompositeProblem& P, const Vec& theta, LossKind loss) {
  const double l = P.loss(theta);
  return (loss == LossKind::squared ? 2.0 * l : l) + P.regularizer().value(theta);
}

inline double default_c(const Dataset& data) { return 1e-2 * (1.0 + data.y.squaredNorm() / data.size()); }

struct OLSFit {
  Vec coef;  // [a; α]
  bool ridge = false;
  double predict(const Vec& x) const { return coef.head(x.size()).dot(x) + coef[x.size()]; }
};

inline OLSFit ols_fit(const Dataset& data) {
  data.validate();
  Mat Z(data.size(), data.dim() + 1);
  Z << data.X, Vec::Ones(data.size());
  Eigen::ColPivHouseholderQR<Mat> qr(Z);
  OLSFit fit;
  if (qr.rank() == Z.cols()) {
    fit.coef = qr.solve(data.y);
  } else {
    fit.ridge = true;
    Mat G = Z.transpose() * Z;
    G.diagonal().array() += 1e-8;
    fit.coef = G.ldlt().solve(Z.transpose() * data.y);
  }
  return fit;
}

struct Synthetic {
  Dataset data;
  PWAModel truth;
};

namespace detail {
inline Synthetic synth(const PWAModel& truth, Index N, std::uint64_t seed) {
  if (N < 1) throw std::invalid_argument("sample size must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-1.0, 1.0), noise(-0.5, 0.5);
  Synthetic out{{Mat(N, truth.dim()), Vec(N)}, truth};
  for (Index s = 0; s < N; ++s) {
    for (Index j = 0; j < truth.dim(); ++j) out.data.X(s, j) = ux(rng);
    out.data.y[s] = truth.eval(Vec(out.data.X.row(s).transpose())) + noise(rng);
  }
  return out;
}
}  // namespace detail

inline PWAModel example1_model() {
  PWAModel m{Mat(4, 2), Vec::Zero(4), Mat(0, 2), Vec(0)};
  m.A << 1, 1, 1, -1, -2, 1, -2, -1;
  return m;
}

inline PWAModel example2_model() {
  PWAModel m{Mat(2, 2), Vec(2), Mat(2, 2), Vec::Zero(2)};
  m.A << 1, -2, -2, 1;
  m.alpha << 0, 1;
  m.B << 3, -2, 2, 5;
  return m;
}

inline Synthetic synth_example1(Index N, std::uint64_t seed) { return detail::synth(example1_model(), N, seed); }
inline Synthetic synth_example2(Index N, std::uint64_t seed) { return detail::synth(example2_model(), N, seed); }

inline double radical_inverse(std::uint64_t i, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

// RMS of ψ_A − ψ_B on [−1,1]^d: 101×101 grid for d = 2, else 1000 Halton points.
inline double model_rmse(const PWAModel& a, const PWAModel& b) {
  require_dim(a.dim(), b.dim(), "model dimension");
  const Index d = a.dim();
  double acc = 0.0;
  std::size_t n = 0;
  auto add = [&](const Vec& x) {
    const double e = a.eval(x) - b.eval(x);
    acc += e * e;
    ++n;
  };
  if (d == 2) {
    for (int i = 0; i <= 100; ++i)
      for (int j = 0; j <= 100; ++j) add(Vec{{-1.0 + 0.02 * i, -1.0 + 0.02 * j}});
  } else {
    static const unsigned primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};
    for (std::uint64_t k = 1; k <= 1000; ++k) {
      Vec x(d);
      for (Index j = 0; j < d; ++j) {
        // beyond the tabulated primes fall back to a scrambled low-discrepancy coordinate
        const double u = j < 16 ? radical_inverse(k, primes[j])
                                : std::fmod(static_cast<double>(k) * std::sqrt(2.0 + static_cast<double>(j)), 1.0);
        x[j] = 2.0 * u - 1.0;
      }
      add(x);
    }
  }
  return std::sqrt(acc / static_cast<double>(n));
}

enum class InitKind { gaussian, ols_perturb };

inline Vec init_sampler(const Dataset& data, const PWASpec& spec, InitKind kind, double scale,
                        std::mt19937_64& rng) {
  const Index d = data.dim();
  Vec th = Vec::Zero(theta_size(d, spec.k1, spec.k2));
  std::normal_distribution<double> n01(0.0, 1.0);
  if (kind == InitKind::ols_perturb) th.head(d + 1) = ols_fit(data).coef;
  for (Index i = 0; i < th.size(); ++i) th[i] += scale * n01(rng);
  if (spec.bound > 0) th = th.cwiseMax(-spec.bound).cwiseMin(spec.bound);
  return th;
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Runs f(i) for i in [0, n) on up to `threads` workers.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) f(i);
    });
  for (auto& th : pool) th.join();
}

struct FitOptions {
  PWASpec spec;
  MMConfig mm;  // mm.c <= 0 selects the data-driven default
  int starts = 20;
  InitKind init = InitKind::gaussian;
  double init_scale = 1.0;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct StartResult {
  int start = 0;
  bool failed = false;
  std::string error;
  SolveReport report;
  double objective = std::numeric_limits<double>::infinity();  // reported f_N
};

struct FitResult {
  std::vector<StartResult> starts;
  int best = -1;
  PWAModel model;
  double c = 0.0;
  const StartResult& best_start() const { return starts.at(static_cast<std::size_t>(best)); }
};

inline FitResult fit_multistart(const Dataset& data, const FitOptions& opt) {
  const auto P = assemble(data, opt.spec);
  MMConfig mm = opt.mm;
  if (!(mm.c > 0)) mm.c = default_c(data);
  mm.validate();
  if (opt.starts < 1) throw std::invalid_argument("starts must be at least 1");
  FitResult out;
  out.c = mm.c;
  out.starts.resize(static_cast<std::size_t>(opt.starts));
  parallel_for(opt.starts, opt.threads, [&](int i) {
    auto& sr = out.starts[static_cast<std::size_t>(i)];
    sr.start = i;
    try {
      std::mt19937_64 rng(stream_seed(opt.seed, static_cast<std::uint64_t>(i)));
      const Vec th0 = init_sampler(data, opt.spec, opt.init, opt.init_scale, rng);
      MMConfig cfg = mm;
      cfg.seed = stream_seed(opt.seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(i));
      sr.report = run(P, cfg, th0);
      sr.objective = reported_objective(P, sr.report.theta, opt.spec.loss);
    } catch (const std::exception& e) {
      sr.failed = true;
      sr.error = e.what();
    }
  });
  for (const auto& sr : out.starts)
    if (!sr.failed && (out.best < 0 || sr.objective < out.starts[static_cast<std::size_t>(out.best)].objective))
      out.best = sr.start;
  if (out.best < 0) throw std::runtime_error("every start failed: " + out.starts.front().error);
  out.model = unflatten(out.best_start().report.theta, data.dim(), opt.spec.k1, opt.spec.k2);
  return out;
}

// Groups values that lie within tol of the first member of their group (after sorting).
inline std::vector<std::pair<double, int>> objective_histogram(std::vector<double> v, double tol = 1e-4) {
  std::sort(v.begin(), v.end());
  std::vector<std::pair<double, int>> out;
  for (double x : v) {
    if (!out.empty() && x - out.back().first <= tol) ++out.back().second;
    else out.emplace_back(x, 1);
  }
  return out;
}

// Contiguous folds of a permutation; sizes differ by at most one.
inline std::vector<std::vector<Index>> make_folds(const std::vector<Index>& perm, int folds) {
  if (folds < 2) throw std::invalid_argument("folds must be at least 2");
  if (static_cast<std::size_t>(folds) > perm.size()) throw std::invalid_argument("more folds than samples");
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(folds));
  const std::size_t n = perm.size(), base = n / folds, extra = n % folds;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(folds); ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    out[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos), perm.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

inline std::vector<Index> permutation(Index n, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

struct CVCell {
  int k1 = 1, k2 = 1;
  double ratio = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> e_pa, e_ls, ratios;  // per simulation
  std::vector<std::vector<double>> fold_pa;  // per simulation, per fold
  std::vector<double> start_objectives;      // every start of every fold, for histograms
  bool failed = false;
  std::string reason;
};

struct CVOptions {
  FitOptions fit;
  int folds = 5;
  int simulations = 10;
  std::vector<std::pair<int, int>> grid{{1, 1}};
};

struct CVReport {
  std::vector<CVCell> cells;
  std::vector<std::vector<std::size_t>> fold_sizes;  // per simulation
};

inline double mean_sq_error(const Vec& a, const Vec& b) { return (a - b).squaredNorm() / static_cast<double>(a.size()); }

inline CVReport cv_ratio(const Dataset& data, const CVOptions& opt) {
  data.validate();
  CVReport rep;
  rep.cells.resize(opt.grid.size());
  for (std::size_t c = 0; c < opt.grid.size(); ++c) std::tie(rep.cells[c].k1, rep.cells[c].k2) = opt.grid[c];
  for (int sim = 0; sim < opt.simulations; ++sim) {
    const auto folds = make_folds(permutation(data.size(), stream_seed(opt.fit.seed, 1000003ULL + sim)), opt.folds);
    std::vector<std::size_t> sizes;
    double e_ls = 0.0;
    std::vector<Dataset> train, test;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      std::vector<Index> tr;
      for (std::size_t g = 0; g < folds.size(); ++g)
        if (g != f) tr.insert(tr.end(), folds[g].begin(), folds[g].end());
      train.push_back(data.subset(tr));
      test.push_back(data.subset(folds[f]));
      sizes.push_back(folds[f].size());
      const auto ols = ols_fit(train.back());
      Vec pred(test.back().size());
      for (Index s = 0; s < pred.size(); ++s) pred[s] = ols.predict(Vec(test.back().X.row(s).transpose()));
      e_ls += mean_sq_error(pred, test.back().y);
    }
    rep.fold_sizes.push_back(sizes);
    parallel_for(static_cast<int>(rep.cells.size()), std::max(1, opt.fit.threads), [&](int c) {
      auto& cell = rep.cells[static_cast<std::size_t>(c)];
      if (cell.failed) return;
      try {
        FitOptions fo = opt.fit;
        fo.spec.k1 = cell.k1;
        fo.spec.k2 = cell.k2;
        fo.threads = 1;
        double e_pa = 0.0;
        std::vector<double> per_fold;
        for (std::size_t f = 0; f < folds.size(); ++f) {
          fo.seed = stream_seed(opt.fit.seed, (static_cast<std::uint64_t>(sim) << 20) + f);
          const auto fit = fit_multistart(train[f], fo);
          for (const auto& s : fit.starts)
            if (!s.failed) cell.start_objectives.push_back(s.objective);
          const double e = mean_sq_error(fit.model.eval(test[f].X), test[f].y);
          per_fold.push_back(e);
          e_pa += e;
        }
        cell.e_pa.push_back(e_pa);
        cell.e_ls.push_back(e_ls);
        cell.ratios.push_back(e_pa / e_ls);
        cell.fold_pa.push_back(per_fold);
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.reason = e.what();
      }
    });
  }
  for (auto& cell : rep.cells)
    if (!cell.failed && !cell.ratios.empty())
      cell.ratio = std::accumulate(cell.ratios.begin(), cell.ratios.end(), 0.0) / static_cast<double>(cell.ratios.size());
  return rep;
}

// Largest useful γ: the ℓ1 weight at which θ = 0 satisfies the optimality condition.
inline double gamma_max(const Dataset& data, const PWASpec& spec) {
  const Index d = data.dim();
  Vec g = Vec::Zero(d + 1);
  for (Index s = 0; s < data.size(); ++s) {
    const auto split = monotone_split(make_loss(spec, data.y[s]));
    const double slope = split.up.right_derivative(0.0) + split.down.right_derivative(0.0);
    g.head(d) += slope * data.X.row(s).transpose();
    g[d] += slope;
  }
  g /= static_cast<double>(data.size());
  return g.lpNorm<Eigen::Infinity>() / spec.lambda;
}

inline std::vector<double> gamma_grid(double gmax, int n = 10, double ratio = 1e-3) {
  std::vector<double> out;
  for (int j = 0; j < n; ++j) out.push_back(gmax * std::pow(ratio, n > 1 ? static_cast<double>(j) / (n - 1) : 0.0));
  return out;
}

struct GammaSelection {
  double gamma = 0.0;
  std::vector<double> grid, errors;
};

// k-fold CV over the γ grid; error = Σ_f mean squared test error of the best-of-starts fit.
inline GammaSelection select_gamma_cv(const Dataset& data, const FitOptions& base, int folds) {
  GammaSelection sel;
  sel.grid = gamma_grid(gamma_max(data, base.spec));
  const auto parts = make_folds(permutation(data.size(), stream_seed(base.seed, 7777)), folds);
  for (double g : sel.grid) {
    FitOptions fo = base;
    fo.spec.gamma = g;
    double err = 0.0;
    for (std::size_t f = 0; f < parts.size(); ++f) {
      std::vector<Index> tr;
      for (std::size_t h = 0; h < parts.size(); ++h)
        if (h != f) tr.insert(tr.end(), parts[h].begin(), parts[h].end());
      const auto test = data.subset(parts[f]);
      fo.seed = stream_seed(base.seed, 9000 + f);
      const auto fit = fit_multistart(data.subset(tr), fo);
      err += mean_sq_error(fit.model.eval(test.X), test.y);
    }
    sel.errors.push_back(err);
  }
  const auto it = std::min_element(sel.errors.begin(), sel.errors.end());
  sel.gamma = sel.grid[static_cast<std::size_t>(it - sel.errors.begin())];
  return sel;
}

}  // namespace dcmm
