#pragma once

// Batch front end: config parsing, CSV/JSON I/O and the fit/cv/synth/check/bench commands.

#include "pwa.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace dcmm::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kConfigError = 2, kSolverError = 3 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- CSV ----------------------------------------------------------------

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string num(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(17) << v;
  return os.str();
}

class CsvWriter {
 public:
  explicit CsvWriter(const fs::path& p) : os_(p, std::ios::binary) {
    if (!os_) throw ConfigError("cannot write " + p.string());
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) os_ << (i ? "," : "") << csv_field(fields[i]);
    os_ << '\n';
  }

 private:
  std::ofstream os_;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
      else if (ch == '"') quoted = false;
      else cur += ch;
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_number(std::string s, double& v) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  s = s.substr(b);
  if (s.empty()) return false;
  std::istringstream is(s);
  is.imbue(std::locale::classic());
  is >> v;
  return !is.fail() && is.eof();
}

// d feature columns then the response; header optional ("auto" detects a non-numeric first row).
inline Dataset read_dataset(const fs::path& p, const std::string& header = "auto") {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot read dataset " + p.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    std::vector<double> r(f.size());
    bool numeric = true;
    for (std::size_t i = 0; i < f.size(); ++i) numeric = numeric && parse_number(f[i], r[i]);
    if (rows.empty() && lineno == 1 && (header == "true" || (header == "auto" && !numeric))) continue;
    if (!numeric) throw ConfigError(p.string() + ":" + std::to_string(lineno) + ": non-numeric field");
    if (!rows.empty() && r.size() != rows.front().size())
      throw ConfigError(p.string() + ":" + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ConfigError("dataset " + p.string() + " has no rows");
  if (rows.front().size() < 2) throw ConfigError("dataset needs at least one feature and a response");
  const Index n = static_cast<Index>(rows.size()), d = static_cast<Index>(rows.front().size()) - 1;
  Dataset data{Mat(n, d), Vec(n)};
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) data.X(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    data.y[i] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
  }
  try {
    data.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return data;
}

inline void write_dataset(const fs::path& p, const Dataset& data) {
  CsvWriter w(p);
  std::vector<std::string> head;
  for (Index j = 0; j < data.dim(); ++j) head.push_back("x" + std::to_string(j + 1));
  head.push_back("y");
  w.row(head);
  for (Index i = 0; i < data.size(); ++i) {
    std::vector<std::string> r;
    for (Index j = 0; j < data.dim(); ++j) r.push_back(num(data.X(i, j)));
    r.push_back(num(data.y[i]));
    w.row(r);
  }
}

// ---- model JSON ------------------------------------------------------------

inline json model_to_json(const PWAModel& m) {
  auto rows = [](const Mat& M) {
    json a = json::array();
    for (Index i = 0; i < M.rows(); ++i) {
      json r = json::array();
      for (Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
      a.push_back(r);
    }
    return a;
  };
  auto vec = [](const Vec& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
  };
  return json{{"k1", m.k1()}, {"k2", m.k2()}, {"A", rows(m.A)}, {"alpha", vec(m.alpha)},
              {"B", rows(m.B)}, {"beta", vec(m.beta)}};
}

inline PWAModel model_from_json(const json& j) {
  try {
    const int k1 = j.at("k1").get<int>(), k2 = j.at("k2").get<int>();
    const auto& A = j.at("A");
    if (k1 < 1 || static_cast<int>(A.size()) != k1) throw ConfigError("model: A must have k1 rows");
    const Index d = static_cast<Index>(A.at(0).size());
    PWAModel m{Mat(k1, d), Vec(k1), Mat(k2, d), Vec(k2)};
    for (int i = 0; i < k1; ++i) {
      if (static_cast<Index>(A.at(i).size()) != d) throw ConfigError("model: ragged A");
      for (Index c = 0; c < d; ++c) m.A(i, c) = A.at(i).at(c).get<double>();
      m.alpha[i] = j.at("alpha").at(i).get<double>();
    }
    const auto& B = j.at("B");
    if (static_cast<int>(B.size()) != k2) throw ConfigError("model: B must have k2 rows");
    for (int i = 0; i < k2; ++i) {
      if (static_cast<Index>(B.at(i).size()) != d) throw ConfigError("model: ragged B");
      for (Index c = 0; c < d; ++c) m.B(i, c) = B.at(i).at(c).get<double>();
      m.beta[i] = j.at("beta").at(i).get<double>();
    }
    if (j.at("alpha").size() != static_cast<std::size_t>(k1) || j.at("beta").size() != static_cast<std::size_t>(k2))
      throw ConfigError("model: alpha/beta length mismatch");
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model JSON: ") + e.what());
  }
}

// ---- config ----------------------------------------------------------------

struct BenchEntry {
  std::string name;
  std::string path;  // CSV, or empty for a synthetic example
  int example = 1;
  long n = 500;
};

struct RunConfig {
  std::string command;
  std::string dataset;
  std::string header = "auto";
  PWASpec spec;
  bool gamma_cv = false;
  MMConfig mm;
  bool c_auto = true;
  int starts = 20;
  InitKind init = InitKind::gaussian;
  double init_scale = 1.0;
  int folds = 5;
  int simulations = 10;
  std::vector<std::pair<int, int>> grid;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = ".";
  int example = 1;
  long n = 500;
  std::string model;
  json univariate = json::array();
  std::vector<BenchEntry> bench;

  json to_json() const;
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline std::vector<std::pair<int, int>> full_grid(int max_k = 4) {
  std::vector<std::pair<int, int>> g;
  for (int k2 = 1; k2 <= max_k; ++k2)
    for (int k1 = 1; k1 <= max_k; ++k1) g.emplace_back(k1, k2);
  return g;
}

inline std::vector<std::pair<int, int>> parse_grid(const json& j) {
  std::vector<std::pair<int, int>> g;
  if (!j.is_array()) throw ConfigError("grid must be an array of [k1, k2] pairs");
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
      throw ConfigError("grid entries must be [k1, k2] integer pairs");
    g.emplace_back(p[0].get<int>(), p[1].get<int>());
  }
  return g;
}

inline json grid_json(const std::vector<std::pair<int, int>>& g) {
  json a = json::array();
  for (auto [k1, k2] : g) a.push_back({k1, k2});
  return a;
}

}  // namespace detail

inline const std::set<std::string>& commands() {
  static const std::set<std::string> c{"fit", "cv", "synth", "check", "bench"};
  return c;
}

inline RunConfig parse_config(const json& j, const std::string& command) {
  using detail::get;
  if (!commands().count(command)) throw ConfigError("unknown command '" + command + "'");
  detail::check_keys(j,
                     {"command", "dataset", "header", "k1", "k2", "loss", "tau", "gamma", "penalty", "lambda",
                      "scad_a", "bound", "mm", "sn", "starts", "init", "init_scale", "folds", "simulations",
                      "grid", "seed", "threads", "out", "example", "n", "model", "univariate", "datasets"},
                     "config");
  RunConfig c;
  c.command = command;
  if (j.contains("command") && j.at("command") != command)
    throw ConfigError("config is for command '" + j.at("command").dump() + "', not '" + command + "'");
  get(j, "dataset", c.dataset, "config");
  get(j, "header", c.header, "config");
  if (j.contains("header") && j.at("header").is_boolean()) c.header = j.at("header").get<bool>() ? "true" : "false";
  if (c.header != "auto" && c.header != "true" && c.header != "false")
    throw ConfigError("header must be true, false or \"auto\"");
  get(j, "k1", c.spec.k1, "config");
  get(j, "k2", c.spec.k2, "config");
  std::string s = "squared";
  get(j, "loss", s, "config");
  if (s == "squared") c.spec.loss = LossKind::squared;
  else if (s == "quantile") c.spec.loss = LossKind::quantile;
  else throw ConfigError("loss must be \"squared\" or \"quantile\"");
  get(j, "tau", c.spec.tau, "config");
  if (j.contains("gamma")) {
    if (j.at("gamma").is_string()) {
      if (j.at("gamma") != "cv") throw ConfigError("gamma must be a number or \"cv\"");
      c.gamma_cv = true;
    } else {
      get(j, "gamma", c.spec.gamma, "config");
    }
  }
  s = "scad";
  get(j, "penalty", s, "config");
  if (s == "scad") c.spec.penalty = PenaltyKind::scad;
  else if (s == "l1") c.spec.penalty = PenaltyKind::l1;
  else throw ConfigError("penalty must be \"scad\" or \"l1\"");
  get(j, "lambda", c.spec.lambda, "config");
  get(j, "scad_a", c.spec.scad_a, "config");
  get(j, "bound", c.spec.bound, "config");

  if (j.contains("mm")) {
    const auto& m = j.at("mm");
    detail::check_keys(m,
                       {"c", "epsilon", "variant", "p_floor", "tol_rel", "tol_step", "max_outer", "combo_cap",
                        "stall_limit", "sn_tol_floor", "sn_tol_factor", "terminal_residual"},
                       "mm");
    if (m.contains("c")) {
      if (m.at("c").is_string()) {
        if (m.at("c") != "auto") throw ConfigError("mm.c must be a number or \"auto\"");
      } else {
        get(m, "c", c.mm.c, "mm");
        c.c_auto = false;
      }
    }
    get(m, "epsilon", c.mm.epsilon, "mm");
    if (m.contains("variant")) {
      try {
        c.mm.variant = parse_variant(m.at("variant").get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(std::string("mm.variant: ") + e.what());
      }
    }
    get(m, "p_floor", c.mm.p_floor, "mm");
    if (m.contains("tol_rel") && m.at("tol_rel").is_string()) {
      if (m.at("tol_rel") != "inf") throw ConfigError("mm.tol_rel must be a number or \"inf\"");
      c.mm.tol_rel = std::numeric_limits<double>::infinity();
    } else {
      get(m, "tol_rel", c.mm.tol_rel, "mm");
    }
    get(m, "tol_step", c.mm.tol_step, "mm");
    get(m, "max_outer", c.mm.max_outer, "mm");
    get(m, "combo_cap", c.mm.combo_cap, "mm");
    get(m, "stall_limit", c.mm.stall_limit, "mm");
    get(m, "sn_tol_floor", c.mm.sn_tol_floor, "mm");
    get(m, "sn_tol_factor", c.mm.sn_tol_factor, "mm");
    get(m, "terminal_residual", c.mm.terminal_residual, "mm");
  }
  if (j.contains("sn")) {
    const auto& n = j.at("sn");
    detail::check_keys(n, {"rho", "sigma", "max_iter", "max_backtracks", "eps_floor", "eps_cap"}, "sn");
    get(n, "rho", c.mm.sn.rho, "sn");
    get(n, "sigma", c.mm.sn.sigma, "sn");
    get(n, "max_iter", c.mm.sn.max_iter, "sn");
    get(n, "max_backtracks", c.mm.sn.max_backtracks, "sn");
    get(n, "eps_floor", c.mm.sn.eps_floor, "sn");
    get(n, "eps_cap", c.mm.sn.eps_cap, "sn");
  }
  get(j, "starts", c.starts, "config");
  s = "gaussian";
  get(j, "init", s, "config");
  if (s == "gaussian") c.init = InitKind::gaussian;
  else if (s == "ols-perturb") c.init = InitKind::ols_perturb;
  else throw ConfigError("init must be \"gaussian\" or \"ols-perturb\"");
  get(j, "init_scale", c.init_scale, "config");
  get(j, "folds", c.folds, "config");
  get(j, "simulations", c.simulations, "config");
  c.grid = j.contains("grid") ? detail::parse_grid(j.at("grid")) : detail::full_grid();
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0)
      throw ConfigError("seed must be a nonnegative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  get(j, "threads", c.threads, "config");
  get(j, "out", c.out, "config");
  get(j, "example", c.example, "config");
  get(j, "n", c.n, "config");
  get(j, "model", c.model, "config");
  if (j.contains("univariate")) c.univariate = j.at("univariate");
  if (j.contains("datasets")) {
    if (!j.at("datasets").is_array()) throw ConfigError("datasets must be an array");
    for (const auto& e : j.at("datasets")) {
      detail::check_keys(e, {"name", "path", "example", "n"}, "datasets[]");
      BenchEntry b;
      get(e, "name", b.name, "datasets[]");
      get(e, "path", b.path, "datasets[]");
      get(e, "example", b.example, "datasets[]");
      get(e, "n", b.n, "datasets[]");
      if (b.name.empty()) b.name = b.path.empty() ? "example" + std::to_string(b.example) : b.path;
      c.bench.push_back(b);
    }
  }

  // validation
  try {
    c.spec.validate();
    MMConfig probe = c.mm;
    if (c.c_auto) probe.c = 1.0;
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.starts < 1) throw ConfigError("starts must be at least 1");
  if (!(c.init_scale >= 0)) throw ConfigError("init_scale must be nonnegative");
  if (c.threads < 1) throw ConfigError("threads must be at least 1");
  if (c.example != 1 && c.example != 2) throw ConfigError("example must be 1 or 2");
  if (c.n < 1) throw ConfigError("n must be positive");
  for (auto [k1, k2] : c.grid)
    if (k1 < 1 || k2 < 0) throw ConfigError("grid needs k1 >= 1 and k2 >= 0");
  const bool needs_data = command == "fit" || command == "cv" || (command == "check" && !c.model.empty());
  if (needs_data && c.dataset.empty()) throw ConfigError("config needs a dataset path");
  if (command == "cv") {
    if (c.folds < 2) throw ConfigError("folds must be at least 2");
    if (c.simulations < 1) throw ConfigError("simulations must be at least 1");
  }
  if (command == "fit" && c.gamma_cv && c.folds < 2) throw ConfigError("folds must be at least 2");
  if (command == "check" && c.model.empty() && c.univariate.empty())
    throw ConfigError("check needs a model (with dataset) or univariate fixtures");
  if (command == "bench") {
    if (c.bench.empty()) throw ConfigError("bench needs a non-empty datasets list");
    for (const auto& b : c.bench)
      if (b.path.empty() && b.example != 1 && b.example != 2) throw ConfigError("datasets[].example must be 1 or 2");
  }
  return c;
}

inline json RunConfig::to_json() const {
  json m{{"c", c_auto ? json("auto") : json(mm.c)},
         {"epsilon", mm.epsilon},
         {"variant", to_string(mm.variant)},
         {"p_floor", mm.p_floor},
         {"tol_rel", std::isinf(mm.tol_rel) ? json("inf") : json(mm.tol_rel)},
         {"tol_step", mm.tol_step},
         {"max_outer", mm.max_outer},
         {"combo_cap", mm.combo_cap},
         {"stall_limit", mm.stall_limit},
         {"sn_tol_floor", mm.sn_tol_floor},
         {"sn_tol_factor", mm.sn_tol_factor},
         {"terminal_residual", mm.terminal_residual}};
  json sn{{"rho", mm.sn.rho},         {"sigma", mm.sn.sigma},         {"max_iter", mm.sn.max_iter},
          {"max_backtracks", mm.sn.max_backtracks}, {"eps_floor", mm.sn.eps_floor}, {"eps_cap", mm.sn.eps_cap}};
  json j{{"command", command},
         {"dataset", dataset},
         {"header", header},
         {"k1", spec.k1},
         {"k2", spec.k2},
         {"loss", spec.loss == LossKind::squared ? "squared" : "quantile"},
         {"tau", spec.tau},
         {"gamma", gamma_cv ? json("cv") : json(spec.gamma)},
         {"penalty", spec.penalty == PenaltyKind::scad ? "scad" : "l1"},
         {"lambda", spec.lambda},
         {"scad_a", spec.scad_a},
         {"bound", spec.bound},
         {"mm", m},
         {"sn", sn},
         {"starts", starts},
         {"init", init == InitKind::gaussian ? "gaussian" : "ols-perturb"},
         {"init_scale", init_scale},
         {"folds", folds},
         {"simulations", simulations},
         {"grid", detail::grid_json(grid)},
         {"seed", seed},
         {"threads", threads},
         {"out", out},
         {"example", example},
         {"n", n},
         {"model", model},
         {"univariate", univariate}};
  json ds = json::array();
  for (const auto& b : bench) ds.push_back({{"name", b.name}, {"path", b.path}, {"example", b.example}, {"n", b.n}});
  j["datasets"] = ds;
  return j;
}

inline RunConfig load_config(const fs::path& p, const std::string& command) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read config " + p.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j, command);
}

// ---- univariate fixtures ------------------------------------------------------

// {"affine": [slope, intercept]} | {"max": [...]} | {"min": [...]} | {"sum": [...]} | {"neg": f} | {"abs": f}
inline PiecewiseAffine1D parse_pa1d(const json& j) {
  if (!j.is_object() || j.size() != 1) throw ConfigError("univariate expression must be a one-key object");
  const auto& [key, arg] = *j.items().begin();
  if (key == "affine") {
    if (!arg.is_array() || arg.size() != 2) throw ConfigError("affine takes [slope, intercept]");
    return PiecewiseAffine1D::affine(arg[0].get<double>(), arg[1].get<double>());
  }
  if (key == "neg") return -parse_pa1d(arg);
  if (key == "abs") {
    const auto f = parse_pa1d(arg);
    return max(f, -f);
  }
  if (key == "max" || key == "min" || key == "sum") {
    if (!arg.is_array() || arg.empty()) throw ConfigError(key + " takes a non-empty array");
    auto f = parse_pa1d(arg[0]);
    for (std::size_t i = 1; i < arg.size(); ++i) {
      const auto g = parse_pa1d(arg[i]);
      f = key == "max" ? max(f, g) : key == "min" ? min(f, g) : f + g;
    }
    return f;
  }
  throw ConfigError("unknown univariate operator '" + key + "'");
}

inline json interval_json(const Interval& I) { return json::array({I.lo, I.hi}); }

inline json subdiff_json(const SubdifferentialReport& r) {
  json lim = json::array();
  for (const auto& I : r.limiting_sub) lim.push_back(interval_json(I));
  return json{{"bouligand", r.b_sub},
              {"regular", r.regular_sub ? interval_json(*r.regular_sub) : json(nullptr)},
              {"limiting", lim},
              {"clarke", interval_json(r.clarke_sub)}};
}

// ---- commands -----------------------------------------------------------------

inline fs::path prepare_out(const RunConfig& c) {
  fs::path out(c.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string());
  return out;
}

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline FitOptions fit_options(const RunConfig& c) {
  FitOptions o;
  o.spec = c.spec;
  o.mm = c.mm;
  if (c.c_auto) o.mm.c = 0.0;
  o.starts = c.starts;
  o.init = c.init;
  o.init_scale = c.init_scale;
  o.seed = c.seed;
  o.threads = c.threads;
  return o;
}

inline json trace_summary(const SolveReport& r) {
  return json{{"objective_internal", r.objective},
              {"initial_objective_internal", r.initial_objective},
              {"mm_iterations", r.mm_iterations},
              {"accepted_steps", r.accepted_steps},
              {"sn_iterations", r.sn_iterations},
              {"subproblems", r.subproblems},
              {"residual", r.residual},
              {"residual_coverage", r.residual_coverage},
              {"reason", r.reason},
              {"seconds", r.seconds}};
}

inline void write_trace(const fs::path& p, const SolveReport& r) {
  CsvWriter w(p);
  w.row({"iteration", "objective", "surrogate", "step", "accepted", "subproblems", "sn_iterations",
         "sn_residual", "duality_gap", "selection", "seconds"});
  for (const auto& t : r.trace) {
    std::ostringstream h;
    h << std::hex << std::setw(16) << std::setfill('0') << t.selection_hash;
    w.row({std::to_string(t.iteration), num(t.objective), num(t.surrogate), num(t.step), t.accepted ? "1" : "0",
           std::to_string(t.selections), std::to_string(t.sn_iterations), num(t.sn_residual), num(t.gap), h.str(),
           num(t.seconds)});
  }
}

inline int cmd_fit(const RunConfig& c) {
  const auto data = read_dataset(c.dataset, c.header);
  const auto out = prepare_out(c);
  FitOptions o = fit_options(c);
  json report{{"command", "fit"}, {"config", c.to_json()}, {"seed", c.seed}};
  if (c.gamma_cv) {
    const auto sel = select_gamma_cv(data, o, c.folds);
    o.spec.gamma = sel.gamma;
    report["gamma_selection"] = {{"grid", sel.grid}, {"cv_error", sel.errors}, {"gamma", sel.gamma}};
  }
  const auto fit = fit_multistart(data, o);
  const auto P = assemble(data, o.spec);
  const auto& best = fit.best_start();
  json starts = json::array();
  CsvWriter w(out / "starts.csv");
  w.row({"start", "objective", "objective_internal", "mm_iterations", "sn_iterations", "residual", "reason",
         "seconds", "failed", "error"});
  std::vector<double> values;
  for (const auto& s : fit.starts) {
    w.row({std::to_string(s.start), num(s.objective), num(s.report.objective), std::to_string(s.report.mm_iterations),
           std::to_string(s.report.sn_iterations), num(s.report.residual), s.report.reason, num(s.report.seconds),
           s.failed ? "1" : "0", s.error});
    if (!s.failed) values.push_back(s.objective);
  }
  CsvWriter hw(out / "histogram.csv");
  hw.row({"objective", "count"});
  for (const auto& [v, k] : objective_histogram(values)) hw.row({num(v), std::to_string(k)});
  write_trace(out / "trace.csv", best.report);
  write_json(out / "model.json", model_to_json(fit.model));
  const auto ols = ols_fit(data);
  Vec ols_pred(data.size());
  for (Index i = 0; i < data.size(); ++i) ols_pred[i] = ols.predict(Vec(data.X.row(i).transpose()));
  report["gamma"] = o.spec.gamma;
  report["c"] = fit.c;
  report["best_start"] = fit.best;
  report["objective"] = best.objective;
  report["objective_internal"] = P.objective(best.report.theta);
  report["ols_objective"] = mean_sq_error(ols_pred, data.y);
  report["best"] = trace_summary(best.report);
  report["failed_starts"] = std::count_if(fit.starts.begin(), fit.starts.end(), [](auto& s) { return s.failed; });
  report["model"] = model_to_json(fit.model);
  write_json(out / "report.json", report);
  std::cout << "best objective " << num(best.objective) << " (start " << fit.best << ")\n";
  return kOk;
}

inline int cmd_cv(const RunConfig& c) {
  const auto data = read_dataset(c.dataset, c.header);
  const auto out = prepare_out(c);
  CVOptions o;
  o.fit = fit_options(c);
  o.folds = c.folds;
  o.simulations = c.simulations;
  o.grid = c.grid;
  json report{{"command", "cv"}, {"config", c.to_json()}, {"seed", c.seed}};
  if (c.gamma_cv) {
    const auto sel = select_gamma_cv(data, o.fit, c.folds);
    o.fit.spec.gamma = sel.gamma;
    report["gamma_selection"] = {{"grid", sel.grid}, {"cv_error", sel.errors}, {"gamma", sel.gamma}};
  }
  const auto rep = cv_ratio(data, o);
  json cells = json::array();
  CsvWriter fw(out / "cv_folds.csv");
  fw.row({"k1", "k2", "simulation", "fold", "test_size", "e_pa_fold"});
  CsvWriter hw(out / "cv_histogram.csv");
  hw.row({"k1", "k2", "objective", "count"});
  for (const auto& cell : rep.cells) {
    cells.push_back({{"k1", cell.k1},
                     {"k2", cell.k2},
                     {"ratio", cell.failed ? json(nullptr) : json(cell.ratio)},
                     {"e_pa", cell.e_pa},
                     {"e_ls", cell.e_ls},
                     {"ratios", cell.ratios},
                     {"fold_e_pa", cell.fold_pa},
                     {"failed", cell.failed},
                     {"reason", cell.reason}});
    for (std::size_t s = 0; s < cell.fold_pa.size(); ++s)
      for (std::size_t f = 0; f < cell.fold_pa[s].size(); ++f)
        fw.row({std::to_string(cell.k1), std::to_string(cell.k2), std::to_string(s), std::to_string(f),
                std::to_string(rep.fold_sizes[s][f]), num(cell.fold_pa[s][f])});
    for (const auto& [v, k] : objective_histogram(cell.start_objectives))
      hw.row({std::to_string(cell.k1), std::to_string(cell.k2), num(v), std::to_string(k)});
  }
  // Table layout: one row per k2, one column per k1
  std::set<int> k1s, k2s;
  for (auto [a, b] : c.grid) k1s.insert(a), k2s.insert(b);
  CsvWriter tw(out / "cv_ratio.csv");
  std::vector<std::string> head{"k2\\k1"};
  for (int a : k1s) head.push_back(std::to_string(a));
  tw.row(head);
  for (int b : k2s) {
    std::vector<std::string> r{std::to_string(b)};
    for (int a : k1s) {
      std::string v;
      for (const auto& cell : rep.cells)
        if (cell.k1 == a && cell.k2 == b) v = cell.failed ? "failed" : num(cell.ratio);
      r.push_back(v);
    }
    tw.row(r);
  }
  report["cells"] = cells;
  report["fold_sizes"] = rep.fold_sizes;
  write_json(out / "cv_report.json", report);
  for (const auto& cell : rep.cells)
    std::cout << "(" << cell.k1 << "," << cell.k2 << ") ratio " << (cell.failed ? "failed: " + cell.reason : num(cell.ratio)) << "\n";
  const bool any_failed = std::any_of(rep.cells.begin(), rep.cells.end(), [](auto& x) { return x.failed; });
  return any_failed ? kSolverError : kOk;
}

inline int cmd_synth(const RunConfig& c) {
  const auto out = prepare_out(c);
  const auto syn = c.example == 1 ? synth_example1(c.n, c.seed) : synth_example2(c.n, c.seed);
  write_dataset(out / "data.csv", syn.data);
  write_json(out / "truth.json", model_to_json(syn.truth));
  write_json(out / "synth_report.json", {{"command", "synth"}, {"config", c.to_json()}, {"seed", c.seed}});
  std::cout << "wrote " << syn.data.size() << " samples\n";
  return kOk;
}

inline int cmd_check(const RunConfig& c) {
  const auto out = prepare_out(c);
  json report{{"command", "check"}, {"config", c.to_json()}, {"seed", c.seed}};
  if (!c.model.empty()) {
    std::ifstream is(c.model);
    if (!is) throw ConfigError("cannot read model " + c.model);
    json mj;
    try {
      mj = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("model is not valid JSON: ") + e.what());
    }
    const auto model = model_from_json(mj);
    const auto data = read_dataset(c.dataset, c.header);
    if (model.dim() != data.dim()) throw ConfigError("model and dataset dimensions differ");
    PWASpec spec = c.spec;
    spec.k1 = model.k1();
    spec.k2 = model.k2();
    const auto P = assemble(data, spec);
    const Vec th = flatten(model);
    const double cval = c.c_auto ? default_c(data) : c.mm.c;
    const auto r = dstat_residual(P, th, cval, static_cast<std::size_t>(c.mm.combo_cap), c.seed, c.mm.sn);
    const auto sel = first_selection(argmax_sets(P, th, kTieTol));
    const double weak = weak_mstat_residual(P, th, sel, cval, c.mm.sn);
    report["composite"] = {{"objective", reported_objective(P, th, spec.loss)},
                           {"c", cval},
                           {"dstat_residual", r.residual},
                           {"enumerated", r.solved},
                           {"selections_total", r.total},
                           {"coverage", r.coverage},
                           {"weak_mstat_residual", weak},
                           {"d_stationary", r.residual <= 1e-5},
                           {"tolerance", 1e-5}};
    std::cout << "dstat residual " << num(r.residual) << " (coverage " << num(r.coverage) << ")\n";
  }
  json uni = json::array();
  for (const auto& fx : c.univariate) {
    detail::check_keys(fx, {"name", "f", "points", "dc"}, "univariate[]");
    json entry{{"name", fx.value("name", "")}};
    json pts = json::array();
    if (fx.contains("f")) {
      const auto f = parse_pa1d(fx.at("f"));
      for (const auto& xv : fx.value("points", json::array())) {
        const double x = xv.get<double>();
        const auto fl = classify_point(f, x);
        pts.push_back({{"x", x},
                       {"subdifferentials", subdiff_json(subdifferentials(f, x))},
                       {"c_stationary", fl.c_stationary},
                       {"l_stationary", fl.l_stationary},
                       {"d_stationary", fl.d_stationary},
                       {"local_min", fl.local_min}});
      }
    }
    if (fx.contains("dc")) {
      detail::check_keys(fx.at("dc"), {"f1", "f2"}, "univariate[].dc");
      const auto f1 = parse_pa1d(fx.at("dc").at("f1"));
      const auto f2 = parse_pa1d(fx.at("dc").at("f2"));
      json crit = json::array();
      for (const auto& xv : fx.value("points", json::array())) {
        try {
          crit.push_back({{"x", xv}, {"critical", dc_critical_check(f1, f2, xv.get<double>())}});
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      }
      entry["dc_critical"] = crit;
    }
    entry["points"] = pts;
    uni.push_back(entry);
  }
  if (!uni.empty()) report["univariate"] = uni;
  write_json(out / "check_report.json", report);
  return kOk;
}

inline int cmd_bench(const RunConfig& c) {
  const auto out = prepare_out(c);
  json report{{"command", "bench"}, {"config", c.to_json()}, {"seed", c.seed}};
  json rows = json::array();
  CsvWriter w(out / "bench.csv");
  w.row({"dataset", "N", "d", "mm_iterations", "sn_iterations", "sn_per_mm", "seconds"});
  for (const auto& b : c.bench) {
    const Dataset data = b.path.empty()
                             ? (b.example == 1 ? synth_example1(b.n, c.seed) : synth_example2(b.n, c.seed)).data
                             : read_dataset(b.path, c.header);
    double mm = 0, sn = 0, secs = 0;
    int runs = 0;
    for (auto [k1, k2] : c.grid) {
      FitOptions o = fit_options(c);
      o.spec.k1 = k1;
      o.spec.k2 = k2;
      const auto fit = fit_multistart(data, o);
      for (const auto& s : fit.starts) {
        if (s.failed) continue;
        mm += s.report.mm_iterations;
        sn += s.report.sn_iterations;
        secs += s.report.seconds;
        ++runs;
      }
    }
    mm /= runs;
    sn /= runs;
    secs /= runs;
    w.row({b.name, std::to_string(data.size()), std::to_string(data.dim()), num(mm), num(sn), num(sn / mm), num(secs)});
    rows.push_back({{"dataset", b.name}, {"N", data.size()}, {"d", data.dim()}, {"mm_iterations", mm},
                    {"sn_iterations", sn}, {"sn_per_mm", sn / mm}, {"seconds", secs}, {"runs", runs}});
    std::cout << b.name << ": MM " << num(mm) << ", SN " << num(sn) << "\n";
  }
  report["rows"] = rows;
  write_json(out / "bench_report.json", report);
  return kOk;
}

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

// Loads the config, applies command-line overrides and dispatches; returns the exit code.
inline int run_command(const std::string& command, const fs::path& config, const Overrides& ov,
                       std::ostream& err = std::cerr) {
  try {
    RunConfig c = load_config(config, command);
    if (ov.out) c.out = *ov.out;
    if (ov.seed) c.seed = *ov.seed;
    if (ov.threads) {
      if (*ov.threads < 1) throw ConfigError("threads must be at least 1");
      c.threads = *ov.threads;
    }
    if (command == "fit") return cmd_fit(c);
    if (command == "cv") return cmd_cv(c);
    if (command == "synth") return cmd_synth(c);
    if (command == "check") return cmd_check(c);
    return cmd_bench(c);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "solver failure: " << e.what() << "\n";
    return kSolverError;
  }
}

}  // namespace dcmm::cli
