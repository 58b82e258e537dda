#pragma once

// Nonmonotone MM outer loop: full enumeration, single pair (MM-1) and random pair (MM-2).

#include "stationarity.hpp"

#include <chrono>
#include <cstdint>
#include <random>

namespace dcmm {

enum class Variant { full, one, random };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::one: return "one";
    case Variant::random: return "random";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "one") return Variant::one;
  if (s == "random") return Variant::random;
  throw std::invalid_argument("unknown MM variant '" + s + "'");
}

struct MMConfig {
  double c = 0.0;  // must be set; the pwa layer fills in a data-driven default
  double epsilon = 1e-4;
  Variant variant = Variant::random;
  double p_floor = 0.0;  // 0: implied by uniform sampling
  double tol_rel = 1e-4;
  double tol_step = 0.0;
  int max_outer = 200;
  int combo_cap = 64;
  std::uint64_t seed = 0;
  int stall_limit = 50;
  double sn_tol_floor = 1e-6;
  double sn_tol_factor = 1e-2;
  bool terminal_residual = true;
  SNConfig sn;

  void validate() const {
    if (!(c > 0)) throw std::invalid_argument("mm.c must be positive");
    if (!(epsilon > 0)) throw std::invalid_argument("mm.epsilon must be positive");
    if (!(p_floor >= 0 && p_floor <= 1)) throw std::invalid_argument("mm.p_floor must lie in (0,1]");
    if (!(tol_rel >= 0)) throw std::invalid_argument("mm.tol_rel must be nonnegative");
    if (!(tol_step >= 0)) throw std::invalid_argument("mm.tol_step must be nonnegative");
    if (max_outer < 1) throw std::invalid_argument("mm.max_outer must be at least 1");
    if (combo_cap < 1) throw std::invalid_argument("mm.combo_cap must be at least 1");
    if (stall_limit < 1) throw std::invalid_argument("mm.stall_limit must be at least 1");
    if (!(sn_tol_floor > 0) || !(sn_tol_factor >= 0)) throw std::invalid_argument("bad SN tolerance rule");
    sn.validate();
  }
};

struct TraceRecord {
  int iteration = 0;
  double objective = 0.0;  // f_N at the iterate after the step
  double surrogate = 0.0;
  double step = 0.0;       // ‖z⁺ − z‖
  bool accepted = true;
  int selections = 0;      // subproblems solved
  int sn_iterations = 0;
  double sn_residual = 0.0;
  double gap = 0.0;
  std::uint64_t selection_hash = 0;
  double seconds = 0.0;
};

struct SolveReport {
  std::vector<TraceRecord> trace;
  Vec theta;
  AugmentedIterate state;
  double objective = 0.0;
  double initial_objective = 0.0;
  std::string reason;
  double residual = -1.0;  // dstat (full, random) or weak-M (one)
  double residual_coverage = 1.0;
  int mm_iterations = 0;
  int accepted_steps = 0;
  int sn_iterations = 0;
  int subproblems = 0;
  double seconds = 0.0;
};

inline std::uint64_t hash_selection(const PairSelection& sel) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [a, b] : sel) {
    h = (h ^ static_cast<std::uint64_t>(a)) * 1099511628211ULL;
    h = (h ^ static_cast<std::uint64_t>(b)) * 1099511628211ULL;
  }
  return h;
}

inline std::vector<PairSelection> select_pairs(const CompositeProblem& P, const AugmentedIterate& z,
                                               double eps, Variant variant, std::size_t combo_cap,
                                               std::mt19937_64& rng) {
  const auto exact = argmax_sets(P, z.theta, kTieTol);
  const PairSelection first = first_selection(exact);
  if (variant == Variant::one) return {first};
  const auto sets = argmax_sets(P, z.theta, eps);
  if (variant == Variant::random) {
    PairSelection sel(sets.size());
    for (std::size_t s = 0; s < sets.size(); ++s) {
      const auto& S = sets[s];
      std::size_t k = 0;
      if (S.pairs() > 1) k = std::uniform_int_distribution<std::size_t>(0, S.pairs() - 1)(rng);
      sel[s] = {S.g[k / S.h.size()], S.h[k % S.h.size()]};
    }
    return {sel};
  }
  auto sels = enumerate_selections(sets, combo_cap);
  if (std::find(sels.begin(), sels.end(), first) == sels.end()) sels.push_back(first);
  return sels;
}

class MMSolver {
 public:
  MMSolver(const CompositeProblem& P, MMConfig cfg) : P_(P), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    if (!P_.is_affine()) throw std::invalid_argument("MM solver supports affine atoms only");
  }

  const MMConfig& config() const { return cfg_; }

  // One outer step from z; returns the next state (z itself on a null step).
  std::pair<AugmentedIterate, TraceRecord> iterate(const AugmentedIterate& z) {
    const auto t0 = std::chrono::steady_clock::now();
    TraceRecord rec;
    const double S0 = P_.surrogate(z);
    const auto sels = select_pairs(P_, z, cfg_.epsilon, cfg_.variant,
                                   static_cast<std::size_t>(cfg_.combo_cap), rng_);
    SNConfig sn = cfg_.sn;
    sn.tol_grad = std::max(cfg_.sn_tol_floor, cfg_.sn_tol_factor * last_change_);
    const double slack = 1e-11 * std::max(1.0, std::abs(S0));

    struct Candidate {
      double value;
      AugmentedIterate z;
      Vec x;
      const PairSelection* sel;
      double residual, gap;
    };
    std::optional<Candidate> best;
    for (const auto& sel : sels) {
      const auto sub = build_subproblem(P_, z, sel, cfg_.c);
      auto res = sn_solve(sub, warm_, sn);
      rec.sn_iterations += res.iterations;
      if (res.primal_value > S0 + slack) {
        SNConfig tight = sn;
        tight.tol_grad = 1e-10;
        tight.max_iter = std::max(sn.max_iter, 500);
        res = sn_solve(sub, res.x, tight);
        rec.sn_iterations += res.iterations;
      }
      ++rec.selections;
      if (!res.z.theta.allFinite() || !std::isfinite(res.primal_value))
        throw std::runtime_error("subproblem solver produced a non-finite point");
      const bool better = !best || res.primal_value < best->value - 1e-14 * std::max(1.0, std::abs(best->value)) ||
                          (res.primal_value <= best->value + 1e-14 * std::max(1.0, std::abs(best->value)) &&
                           sel < *best->sel);
      if (better) best = Candidate{res.primal_value, std::move(res.z), std::move(res.x), &sel, res.kkt_residual, res.gap};
    }

    rec.sn_residual = best->residual;
    rec.gap = best->gap;
    rec.selection_hash = hash_selection(*best->sel);
    const bool ok = cfg_.variant == Variant::random ? best->value < S0 : best->value <= S0 + slack;
    AugmentedIterate next = z;
    if (ok) {
      rec.step = best->z.distance(z);
      next = std::move(best->z);
      warm_ = std::move(best->x);
    }
    rec.accepted = ok;
    rec.surrogate = P_.surrogate(next);
    rec.objective = P_.objective(next.theta);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(next), rec};
  }

  SolveReport run(const Vec& theta0) {
    const auto t0 = std::chrono::steady_clock::now();
    SolveReport rep;
    AugmentedIterate z = init_state(P_, theta0);
    double f = P_.objective(theta0);
    if (!std::isfinite(f)) throw std::runtime_error("non-finite objective at the initial point");
    rep.initial_objective = f;
    last_change_ = std::abs(f);
    warm_.resize(0);
    int stalled = 0;
    rep.reason = "max_outer";
    for (int k = 1; k <= cfg_.max_outer; ++k) {
      auto [next, rec] = iterate(z);
      rec.iteration = k;
      rep.sn_iterations += rec.sn_iterations;
      rep.subproblems += rec.selections;
      rep.mm_iterations = k;
      if (!std::isfinite(rec.objective)) throw std::runtime_error("non-finite objective");
      rep.trace.push_back(rec);
      if (!rec.accepted) {
        if (++stalled >= cfg_.stall_limit) {
          rep.reason = cfg_.variant == Variant::random ? "stalled" : "null_step";
          break;
        }
        if (cfg_.variant != Variant::random) {
          rep.reason = "null_step";
          break;
        }
        continue;
      }
      stalled = 0;
      ++rep.accepted_steps;
      const double change = std::abs(rec.objective - f);
      const double rel = change / std::max(1.0, std::abs(f));
      last_change_ = change;
      z = std::move(next);
      f = rec.objective;
      if (cfg_.tol_rel > 0 && rel <= cfg_.tol_rel) {
        rep.reason = "tolerance";
        break;
      }
      if (rec.step <= cfg_.tol_step) {
        rep.reason = "step";
        break;
      }
    }
    rep.state = z;
    rep.theta = z.theta;
    rep.objective = f;
    if (cfg_.terminal_residual) {
      if (cfg_.variant == Variant::one) {
        const auto sel = first_selection(argmax_sets(P_, z.theta, kTieTol));
        rep.residual = weak_mstat_residual(P_, z.theta, sel, cfg_.c, cfg_.sn);
      } else {
        const auto r = dstat_residual(P_, z.theta, cfg_.c, static_cast<std::size_t>(cfg_.combo_cap),
                                      cfg_.seed, cfg_.sn);
        rep.residual = r.residual;
        rep.residual_coverage = r.coverage;
      }
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  }

 private:
  const CompositeProblem& P_;
  MMConfig cfg_;
  std::mt19937_64 rng_;
  Vec warm_;
  double last_change_ = 1.0;
};

inline SolveReport run(const CompositeProblem& P, const MMConfig& cfg, const Vec& theta0) {
  return MMSolver(P, cfg).run(theta0);
}

}  // namespace dcmm
