#include "oracles.hpp"

#include <dcmm/pwa.hpp>

#include <gtest/gtest.h>

#include <map>

using namespace dcmm;

namespace {

MMConfig base_config(double c = 0.5) {
  MMConfig cfg;
  cfg.c = c;
  cfg.terminal_residual = false;
  return cfg;
}

// r ≥ ψ(θ) ≥ s per sample
void expect_feasible(const CompositeProblem& P, const AugmentedIterate& z, double tol) {
  const Vec p = P.psi(z.theta);
  for (int s = 0; s < P.size(); ++s) {
    EXPECT_GE(z.r[s] - p[s], -tol);
    EXPECT_GE(p[s] - z.s[s], -tol);
  }
  if (P.box()) EXPECT_TRUE(P.box()->contains(z.theta, tol));
}

double prox_distance(const CompositeProblem& P, const AugmentedIterate& a, const AugmentedIterate& b, double c) {
  return 0.5 * c * (a.theta - b.theta).squaredNorm() +
         0.5 * c * P.weight() * ((a.r - b.r).squaredNorm() + (a.s - b.s).squaredNorm());
}

}  // namespace

TEST(SelectPairs, NoTiesGiveOneSelectionForEveryVariant) {
  std::mt19937_64 rng(1), pick(2);
  const auto P = oracle::random_problem(rng);
  const auto z = init_state(P, oracle::random_point(rng, P));
  const auto one = select_pairs(P, z, 1e-12, Variant::one, 64, pick);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(select_pairs(P, z, 1e-12, Variant::full, 64, pick), one);
  EXPECT_EQ(select_pairs(P, z, 1e-12, Variant::random, 64, pick), one);
}

TEST(SelectPairs, FullEnumeratesTheEpsilonProduct) {
  // at t = 0 both g atoms lie within ε = 1e-4 of the max, h has a single atom
  const auto atom = [](double a, double b) { return SmoothConvexAtom::affine(Vec::Constant(1, a), b); };
  const CompositeProblem P({{monotone_split(UnivariateConvexLoss::squared(0.0)),
                             DiffMaxFunction(MaxFunction({atom(1, 0), atom(2, -5e-5)}), {atom(1, -1)})}},
                           DcRegularizer::none(1));
  std::mt19937_64 pick(3);
  const auto z = init_state(P, Vec::Zero(1));
  const auto full = select_pairs(P, z, 1e-4, Variant::full, 64, pick);
  EXPECT_EQ(full, (std::vector<PairSelection>{{{0, 0}}, {{1, 0}}}));
  EXPECT_EQ(select_pairs(P, z, 1e-4, Variant::one, 64, pick), (std::vector<PairSelection>{{{0, 0}}}));
  std::mt19937_64 a(9), b(9);
  for (int k = 0; k < 20; ++k)
    EXPECT_EQ(select_pairs(P, z, 1e-4, Variant::random, 64, a), select_pairs(P, z, 1e-4, Variant::random, 64, b));
}

TEST(SelectPairs, RandomDrawsCoverTheProductUniformly) {
  const auto atom = [](double a) { return SmoothConvexAtom::affine(Vec::Constant(1, a), 0.0); };
  const CompositeProblem P({{monotone_split(UnivariateConvexLoss::squared(0.0)),
                             DiffMaxFunction(MaxFunction({atom(1), atom(2), atom(3)}), {atom(-1), atom(1)})}},
                           DcRegularizer::none(1));
  const auto z = init_state(P, Vec::Zero(1));
  std::mt19937_64 rng(4);
  std::map<std::pair<int, int>, int> counts;
  const int draws = 6000;
  for (int k = 0; k < draws; ++k) ++counts[select_pairs(P, z, 1e-4, Variant::random, 64, rng)[0][0]];
  EXPECT_EQ(counts.size(), 6u);
  for (const auto& [pair, n] : counts) EXPECT_NEAR(n / double(draws), 1.0 / 6, 0.03);
}

TEST(MMIterate, SurrogateDecreaseSandwichAndFeasibility) {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int inst = 0; inst < 40; ++inst) {
    const auto P = oracle::random_problem(rng);
    for (Variant v : {Variant::full, Variant::one, Variant::random}) {
      MMConfig cfg = base_config(0.3 + (inst % 3));
      cfg.variant = v;
      cfg.seed = inst;
      MMSolver solver(P, cfg);
      auto z = init_state(P, oracle::random_point(rng, P));
      double S = P.surrogate(z);
      EXPECT_NEAR(S, P.objective(z.theta), 1e-12 * (1 + std::abs(S)));
      for (int k = 0; k < 15; ++k) {
        auto [next, rec] = solver.iterate(z);
        EXPECT_NEAR(rec.surrogate, P.surrogate(next), 1e-12 * (1 + std::abs(S)));
        EXPECT_GE(rec.surrogate - rec.objective, -1e-10 * (1 + std::abs(S)));
        if (rec.accepted) {
          EXPECT_LE(rec.surrogate + prox_distance(P, next, z, cfg.c), S + 1e-9 * (1 + std::abs(S)));
          expect_feasible(P, next, 1e-8);
          ++checked;
        } else {
          EXPECT_EQ(next.theta, z.theta);
        }
        S = rec.surrogate;
        z = std::move(next);
      }
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(MMIterate, FixedPointAtLeastSquaresMinimizer) {
  const auto syn = synth_example2(40, 8);
  PWASpec spec;
  const auto P = assemble(syn.data, spec);
  Vec theta = Vec::Zero(6);
  theta.head(3) = ols_fit(syn.data).coef;
  theta.tail(3) << 0.3, -0.2, 0.1;
  theta.head(3) += theta.tail(3);
  const auto z = init_state(P, theta);
  for (Variant v : {Variant::full, Variant::one}) {
    MMConfig cfg = base_config(default_c(syn.data));
    cfg.variant = v;
    cfg.sn.tol_grad = 1e-12;
    cfg.sn_tol_floor = 1e-12;
    cfg.sn_tol_factor = 0.0;
    MMSolver solver(P, cfg);
    const auto [next, rec] = solver.iterate(z);
    EXPECT_LE(next.distance(z), 1e-8);
  }
}

TEST(MMIterate, RandomVariantRejectsWithoutStrictDecrease) {
  // noiseless k1 = k2 = 1 data at its generating θ: the surrogate is already 0
  Dataset data{Mat(6, 1), Vec(6)};
  data.X << -1, -0.5, 0, 0.25, 0.75, 1;
  data.y = 2.0 * data.X.col(0).array() + 0.5;
  const auto P = assemble(data, PWASpec{});
  Vec theta(4);
  theta << 2.5, 0.75, 0.5, 0.25;
  MMConfig cfg = base_config();
  cfg.variant = Variant::random;
  MMSolver solver(P, cfg);
  const auto z = init_state(P, theta);
  ASSERT_EQ(P.surrogate(z), 0.0);
  const auto [next, rec] = solver.iterate(z);
  EXPECT_FALSE(rec.accepted);
  EXPECT_EQ(next.theta, z.theta);
  EXPECT_EQ(next.r, z.r);
  EXPECT_EQ(next.s_hat, z.s_hat);

  const auto rep = run(P, cfg, theta);
  EXPECT_EQ(rep.reason, "stalled");
  EXPECT_EQ(rep.accepted_steps, 0);
  EXPECT_EQ(rep.mm_iterations, cfg.stall_limit);
}

TEST(MMRun, AffineModelMatchesLeastSquares) {
  const auto syn = synth_example2(80, 12);
  const auto P = assemble(syn.data, PWASpec{});
  const auto ols = ols_fit(syn.data);
  MMConfig cfg = base_config(default_c(syn.data));
  cfg.tol_rel = 0.0;
  cfg.tol_step = 1e-11;
  cfg.max_outer = 5000;
  cfg.sn_tol_floor = 1e-11;
  std::mt19937_64 rng(6);
  const auto rep = run(P, cfg, oracle::random_point(rng, P));
  const auto m = unflatten(rep.theta, 2, 1, 1);
  Vec coef(3);
  coef << (m.A.row(0) - m.B.row(0)).transpose(), m.alpha[0] - m.beta[0];
  EXPECT_LE((coef - ols.coef).lpNorm<Eigen::Infinity>(), 1e-6);
  Mat Z(80, 3);
  Z << syn.data.X, Vec::Ones(80);
  const double ols_obj = 0.5 * (Z * ols.coef - syn.data.y).squaredNorm() / 80;
  EXPECT_NEAR(P.objective(rep.theta), ols_obj, 1e-6 * ols_obj);
}

TEST(MMRun, InfiniteToleranceStopsAfterOneIteration) {
  std::mt19937_64 rng(7);
  const auto P = oracle::random_problem(rng);
  MMConfig cfg = base_config();
  cfg.tol_rel = std::numeric_limits<double>::infinity();
  const auto x0 = oracle::random_point(rng, P);
  // MM-2 may reject a draw; the full variant accepts its first step away from stationary points
  cfg.variant = Variant::full;
  const auto rep = run(P, cfg, x0);
  EXPECT_EQ(rep.mm_iterations, 1);
  EXPECT_EQ(rep.reason, "tolerance");
  EXPECT_EQ(rep.trace.size(), 1u);
}

TEST(MMRun, VariantsAgreeWithoutTies) {
  std::mt19937_64 rng(8);
  oracle::InstanceSpec spec;
  spec.max_samples = 4;
  int compared = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const auto P = oracle::random_problem(rng, spec);
    const Vec x0 = oracle::random_point(rng, P);
    MMConfig cfg = base_config(1.0);
    cfg.epsilon = kTieTol;
    cfg.max_outer = 10;
    cfg.tol_rel = 0.0;
    std::vector<SolveReport> reps;
    for (Variant v : {Variant::full, Variant::one, Variant::random}) {
      cfg.variant = v;
      reps.push_back(run(P, cfg, x0));
    }
    // compare the prefix on which every iterate strictly decreased (no null steps)
    const auto& a = reps[0].trace;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (k >= reps[1].trace.size() || k >= reps[2].trace.size()) break;
      if (!reps[2].trace[k].accepted || a[k].step <= 1e-9) break;
      EXPECT_EQ(a[k].selection_hash, reps[1].trace[k].selection_hash);
      EXPECT_EQ(a[k].selection_hash, reps[2].trace[k].selection_hash);
      EXPECT_EQ(a[k].objective, reps[1].trace[k].objective);
      EXPECT_EQ(a[k].objective, reps[2].trace[k].objective);
      ++compared;
    }
  }
  EXPECT_GT(compared, 50);
}

TEST(MMRun, SeededRunsAreReproducible) {
  std::mt19937_64 rng(9);
  const auto P = oracle::random_problem(rng);
  const Vec x0 = oracle::random_point(rng, P);
  MMConfig cfg = base_config();
  cfg.seed = 42;
  cfg.terminal_residual = true;
  const auto a = run(P, cfg, x0), b = run(P, cfg, x0);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    EXPECT_EQ(a.trace[k].objective, b.trace[k].objective);
    EXPECT_EQ(a.trace[k].selection_hash, b.trace[k].selection_hash);
    EXPECT_EQ(a.trace[k].sn_iterations, b.trace[k].sn_iterations);
  }
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.residual, b.residual);
  EXPECT_EQ(a.reason, b.reason);
}

TEST(MMRun, StepsVanishOnRandomInstances) {
  std::mt19937_64 rng(10);
  for (int inst = 0; inst < 15; ++inst) {
    const auto P = oracle::random_problem(rng);
    MMConfig cfg = base_config(1.0);
    cfg.variant = Variant::full;
    cfg.tol_rel = 0.0;
    cfg.tol_step = 1e-7;
    cfg.max_outer = 500;
    cfg.sn_tol_floor = 1e-10;
    const auto rep = run(P, cfg, oracle::random_point(rng, P));
    EXPECT_NE(rep.reason, "max_outer") << inst;
    double prev = rep.initial_objective;
    for (const auto& r : rep.trace)
      if (r.accepted) {
        EXPECT_LE(r.surrogate, prev + 1e-10 * (1 + std::abs(prev)));
        prev = r.surrogate;
      }
  }
}

TEST(MMConfig, Validation) {
  std::mt19937_64 rng(11);
  const auto P = oracle::random_problem(rng);
  MMConfig cfg;
  EXPECT_THROW(MMSolver(P, cfg), std::invalid_argument);  // c unset
  cfg.c = 1.0;
  cfg.epsilon = 0.0;
  EXPECT_THROW(MMSolver(P, cfg), std::invalid_argument);
  cfg.epsilon = 1e-4;
  cfg.max_outer = 0;
  EXPECT_THROW(MMSolver(P, cfg), std::invalid_argument);
  cfg.max_outer = 1;
  cfg.tol_rel = -1;
  EXPECT_THROW(MMSolver(P, cfg), std::invalid_argument);
  EXPECT_THROW(parse_variant("mm3"), std::invalid_argument);
  EXPECT_EQ(parse_variant(to_string(Variant::one)), Variant::one);
}
