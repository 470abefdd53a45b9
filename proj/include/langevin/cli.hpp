#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "langevin/diagnostics.hpp"
#include "langevin/estimator.hpp"
#include "langevin/integrators.hpp"
#include "langevin/output.hpp"
#include "langevin/registry.hpp"

namespace langevin::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kFail = 1, kUsage = 2, kDiverged = 3 };

/// Usage or configuration problem (exit 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using KeyMap = std::map<std::string, std::string>;

inline const std::vector<std::string>& probe_names() {
  static const std::vector<std::string> names{"lyapunov", "moments",    "tangent", "tangent-coupling",
                                              "coupling", "kolmogorov", "poisson"};
  return names;
}

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

/// "2^-3", "0.125", "1e-3".
inline double parse_step(const std::string& token) {
  const auto caret = token.find('^');
  try {
    if (caret != std::string::npos) {
      const double base = detail::parse_double(token.substr(0, caret), "h");
      const double exp = detail::parse_double(token.substr(caret + 1), "h");
      return std::pow(base, exp);
    }
    return detail::parse_double(token, "h");
  } catch (const std::invalid_argument&) {
    throw ConfigError("invalid h value '" + token + "'");
  }
}

inline std::vector<double> parse_step_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& tok : detail::split(text, ',')) {
    const double h = parse_step(tok);
    if (!(h > 0.0)) throw ConfigError("invalid h value '" + tok + "' (must be > 0)");
    out.push_back(h);
  }
  return out;
}

inline double parse_real(const KeyMap& k, const std::string& key) {
  try {
    return detail::parse_double(k.at(key), key);
  } catch (const std::invalid_argument&) {
    throw ConfigError("--" + key + ": cannot parse '" + k.at(key) + "'");
  }
}

inline long long parse_count(const KeyMap& k, const std::string& key) {
  const std::string& s = k.at(key);
  std::size_t pos = 0;
  long long v = 0;
  try {
    // Accept 1e5 style integers.
    const double d = std::stod(s, &pos);
    v = std::llround(d);
    if (pos != s.size() || std::abs(d - static_cast<double>(v)) > 0.0) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("--" + key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

inline std::uint64_t parse_seed(const std::string& s) {
  try {
    std::size_t pos = 0;
    const bool hex = s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X');
    const auto v = std::stoull(hex ? s.substr(2) : s, &pos, hex ? 16 : 10);
    if (pos != (hex ? s.size() - 2 : s.size()) || s.front() == '-') throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("--seed: cannot parse '" + s + "'");
  }
}

inline std::vector<double> parse_reals(const std::string& text, const std::string& key) {
  std::vector<double> out;
  for (const auto& tok : detail::split(text, ',')) {
    try {
      out.push_back(detail::parse_double(tok, key));
    } catch (const std::invalid_argument&) {
      throw ConfigError("--" + key + ": cannot parse '" + tok + "'");
    }
  }
  return out;
}

/// "x,v;x,v;..."
inline std::vector<std::pair<double, double>> parse_points(const std::string& text) {
  std::vector<std::pair<double, double>> out;
  for (const auto& item : detail::split(text, ';')) {
    const auto xy = parse_reals(item, "points");
    if (xy.size() != 2) throw ConfigError("--points: expected 'x,v', got '" + item + "'");
    out.emplace_back(xy[0], xy[1]);
  }
  return out;
}

inline std::vector<IntegratorKind> parse_integrators(const std::string& text) {
  std::vector<IntegratorKind> out;
  for (const auto& tok : detail::split(text, ',')) {
    try {
      out.push_back(parse_integrator(tok));
    } catch (const std::invalid_argument&) {
      throw ConfigError("--integrator: unknown integrator '" + tok + "' (valid: em, ubu, sg-em, sg-ubu)");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Keys and defaults
// ---------------------------------------------------------------------------

struct Command {
  std::string name;
  std::string probe;
  KeyMap given;
};

namespace detail_cli {

inline const KeyMap& common_defaults() {
  static const KeyMap m{{"model", "sine"}, {"gamma", "2"}, {"seed", "1"}, {"out", "."}, {"workers", ""}};
  return m;
}

inline KeyMap defaults_for(const std::string& command, const std::string& probe) {
  KeyMap m = common_defaults();
  auto add = [&m](const KeyMap& extra) {
    for (const auto& [k, v] : extra) m[k] = v;
  };
  const KeyMap start{{"x0", "0.2"}, {"v0", "-0.3"}};
  if (command == "sweep") {
    add({{"integrator", "em,ubu,sg-em,sg-ubu"},
         {"h", "2^-1,2^-2,2^-3,2^-4,2^-5,2^-6"},
         {"T", ""},
         {"M", "100"},
         {"f", "x"},
         {"h-max", "0.5"},
         {"burn-in", "0"},
         {"full-scale", "false"}});
    add(start);
  } else if (command == "strong-order") {
    add({{"integrator", "em"},
         {"h", "2^-4,2^-5,2^-6,2^-7,2^-8"},
         {"T", "1"},
         {"M", "1000"},
         {"band", ""},
         {"ref-factor", "16"}});
    add(start);
  } else if (command == "reference-mean") {
    m = {{"model", "sine"}, {"f", "x"}, {"out", ""}};
  } else if (command == "diagnose") {
    if (probe == "lyapunov") {
      add({{"grid-half", "5"}, {"grid-points", "41"}});
    } else if (probe == "moments") {
      add({{"integrator", "ubu"}, {"h", "0.25"}, {"r", "2"}, {"steps", "100000"}, {"M", "1000"}, {"limit", "50"}});
      add(start);
    } else if (probe == "tangent" || probe == "tangent-coupling" || probe == "coupling") {
      add({{"gamma", "2.5"}, {"h", "0.01"}, {"T", "20"}});
      add(start);
      if (probe != "coupling") add({{"init", "x"}});
      if (probe != "tangent") add({{"gap", "0.1"}});
    } else if (probe == "kolmogorov") {
      add({{"f", "x"}, {"points", "2,0"}, {"t", "0,1,2,4,8,12,16,20"}, {"n-mc", "4000"}, {"h-mc", "0.0625"}});
    } else if (probe == "poisson") {
      add({{"f", "x"},
           {"points", "0,0;1,-1;-2,0.5"},
           {"h", "0.25"},
           {"n-max", "80"},
           {"n-mc", "10000"},
           {"h-mc", "0.0625"}});
    } else {
      std::string valid;
      for (const auto& p : probe_names()) valid += (valid.empty() ? "" : ", ") + p;
      throw ConfigError("unknown probe '" + probe + "' (valid: " + valid + ")");
    }
  } else {
    throw ConfigError("unknown command '" + command + "' (valid: sweep, strong-order, diagnose, reference-mean)");
  }
  return m;
}

inline std::string key_help(const std::string& key) {
  static const KeyMap help{
      {"model", "sine | quadratic[:k[,d]] | minibatch-quadratic:M,B[,d]"},
      {"integrator", "comma list of em, ubu, sg-em, sg-ubu"},
      {"gamma", "friction"},
      {"h", "step sizes, e.g. 2^-1,2^-2 or 0.25"},
      {"T", "time horizon"},
      {"M", "trajectories, paths or ensemble size"},
      {"seed", "master seed, decimal or 0x hex"},
      {"f", "observable: x | v | x2 | v2 | const:c"},
      {"out", "output directory"},
      {"workers", "worker threads (default: available cores)"},
      {"h-max", "largest admissible step"},
      {"burn-in", "steps discarded before averaging"},
      {"x0", "initial position (every coordinate)"},
      {"v0", "initial velocity (every coordinate)"},
      {"band", "accepted slope interval lo,hi"},
      {"ref-factor", "h_min / h_ref, a power of two >= 16"},
      {"grid-half", "half-width of the (x, v) grid"},
      {"grid-points", "grid points per axis"},
      {"r", "moment order"},
      {"steps", "number of steps"},
      {"limit", "allowed growth over the initial moment"},
      {"init", "tangent initial data: x | v | zero"},
      {"gap", "initial position gap of the coupled copy"},
      {"points", "start points x,v;x,v;..."},
      {"t", "time grid t1,t2,..."},
      {"n-mc", "Monte Carlo paths per point"},
      {"n-max", "truncation index of the discrete Poisson sum"},
      {"h-mc", "simulation step of the Monte Carlo paths"},
  };
  const auto it = help.find(key);
  return it == help.end() ? "" : it->second;
}

// Union of keys a subcommand's parser accepts.
inline std::set<std::string> accepted_keys(const std::string& command) {
  std::set<std::string> keys;
  if (command == "diagnose") {
    for (const auto& p : probe_names()) {
      for (const auto& [k, v] : defaults_for(command, p)) keys.insert(k);
    }
  } else {
    for (const auto& [k, v] : defaults_for(command, "")) keys.insert(k);
  }
  return keys;
}

}  // namespace detail_cli

/// Defaults overlaid with given values; derived defaults filled in.
inline KeyMap resolve(const Command& cmd) {
  KeyMap k = detail_cli::defaults_for(cmd.name, cmd.probe);
  for (const auto& [key, value] : cmd.given) {
    if (!k.count(key)) {
      throw ConfigError("option --" + key + " does not apply to " + cmd.name +
                        (cmd.probe.empty() ? "" : " " + cmd.probe));
    }
    k[key] = value;
  }
  if (k.count("workers") && k["workers"].empty()) k["workers"] = std::to_string(default_workers());
  if (k.count("full-scale")) {
    const auto& fs = k["full-scale"];
    if (fs != "true" && fs != "false") throw ConfigError("--full-scale: expected true or false");
  }
  if (k.count("T") && k["T"].empty()) k["T"] = k["full-scale"] == "true" ? "1e7" : "1e5";
  if (k.count("band") && k["band"].empty()) {
    const auto kinds = parse_integrators(k["integrator"]);
    k["band"] = kinds.size() == 1 && kinds[0] == IntegratorKind::ubu ? "1.8,2.2" : "0.8,1.2";
  }
  return k;
}

inline std::string manifest_text(const Command& cmd, const KeyMap& resolved) {
  KeyMap all = resolved;
  all["command"] = cmd.name;
  if (!cmd.probe.empty()) all["probe"] = cmd.probe;
  all["version"] = kVersion;
  std::string out;
  for (const auto& [k, v] : all) out += k + "=" + v + "\n";
  return out;
}

/// key=value lines; blank lines and '#' comments are skipped.
inline KeyMap read_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  KeyMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail_cli {

inline std::filesystem::path out_dir(const KeyMap& k) { return k.at("out"); }

inline int workers(const KeyMap& k) {
  const auto w = parse_count(k, "workers");
  if (w < 1) throw ConfigError("--workers must be >= 1");
  return static_cast<int>(w);
}

inline std::string verdict(bool pass, const std::string& what, const std::string& detail) {
  return std::string(pass ? "PASS " : "FAIL ") + what + " " + detail;
}

inline std::string kind_name(IntegratorKind kind) { return std::string(to_string(kind)); }

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline int cmd_sweep(const Command& cmd, const KeyMap& k, std::ostream& out) {
  SweepConfig base;
  base.h_grid = parse_step_list(k.at("h"));
  base.total_time = parse_real(k, "T");
  base.trajectories = static_cast<int>(parse_count(k, "M"));
  base.gamma = parse_real(k, "gamma");
  base.model_id = k.at("model");
  base.f_id = k.at("f");
  base.master_seed = parse_seed(k.at("seed"));
  base.x0 = {parse_real(k, "x0")};
  base.v0 = {parse_real(k, "v0")};
  base.burn_in = parse_count(k, "burn-in");
  base.h_max = parse_real(k, "h-max");
  base.workers = workers(k);
  const auto kinds = parse_integrators(k.at("integrator"));
  parse_model(base.model_id);
  if (base.trajectories < 2) throw ConfigError("--M must be >= 2");
  for (double h : base.h_grid) {
    if (h > base.h_max) {
      throw ConfigError("h = " + format_double(h) + " exceeds h-max = " + format_double(base.h_max));
    }
  }

  CsvWriter sweep({"integrator", "potential", "f", "gamma", "seed", "h", "N", "M", "mse", "mse_stderr", "bias",
                   "variance", "diverged"});
  CsvWriter slopes({"integrator", "floor", "h_lo", "h_hi", "cells", "slope"});
  std::vector<PlotSeries> series;
  for (IntegratorKind kind : kinds) {
    SweepConfig cfg = base;
    cfg.integrator = kind;
    ErrorReport report;
    try {
      report = run_sweep(cfg);
    } catch (const AllDivergedError& e) {
      throw AllDivergedError(e.h(), std::string("all trajectories diverged in cell integrator=") +
                                        kind_name(kind) + " h=" + format_double(e.h()));
    }
    PlotSeries s{kind_name(kind), {}, {}};
    for (const auto& c : report.cells) {
      sweep.row({kind_name(kind), cfg.model_id, cfg.f_id, format_double(cfg.gamma),
                 std::to_string(cfg.master_seed), format_double(c.h), std::to_string(c.n_steps),
                 std::to_string(cfg.trajectories), format_double(c.mse), format_double(c.mse_stderr),
                 format_double(c.bias), format_double(c.variance), std::to_string(c.diverged)});
      s.x.push_back(c.h);
      s.y.push_back(c.mse);
      out << kind_name(kind) << " h=" << fmt(c.h) << " mse=" << fmt(c.mse) << " +- " << fmt(c.mse_stderr)
          << (c.diverged ? " diverged=" + std::to_string(c.diverged) : "") << "\n";
    }
    series.push_back(std::move(s));
    const double h_lo = *std::min_element(cfg.h_grid.begin(), cfg.h_grid.end());
    const double h_hi = *std::max_element(cfg.h_grid.begin(), cfg.h_grid.end());
    for (auto [mode, name] : {std::pair{FloorMode::none, "none"}, std::pair{FloorMode::smallest_h, "smallest_h"},
                              std::pair{FloorMode::variance, "variance"}}) {
      try {
        const SlopeFit fit = fit_slope(report, h_lo, h_hi, mode);
        slopes.row({kind_name(kind), name, format_double(h_lo), format_double(h_hi),
                    std::to_string(fit.cells_used), format_double(fit.slope)});
      } catch (const std::runtime_error&) {
        // Too few usable cells for a slope.
      }
    }
  }
  const auto dir = out_dir(k);
  write_atomic(dir / "sweep.csv", sweep.str());
  write_atomic(dir / "slopes.csv", slopes.str());
  write_atomic(dir / "sweep.svg", loglog_svg(series, "mean square error of time averages (" + base.model_id +
                                                        ", f = " + base.f_id + ")",
                                             "h", "E[e^2]"));
  write_atomic(dir / "manifest", manifest_text(cmd, k));
  out << "wrote " << (dir / "sweep.csv").string() << "\n";
  return kOk;
}

inline int cmd_strong_order(const Command& cmd, const KeyMap& k, std::ostream& out) {
  StrongOrderConfig cfg;
  const auto kinds = parse_integrators(k.at("integrator"));
  if (kinds.size() != 1 || traits(kinds[0]).stochastic_gradient) {
    throw ConfigError("--integrator: strong-order takes exactly one of em, ubu");
  }
  cfg.kind = kinds[0];
  cfg.gamma = parse_real(k, "gamma");
  cfg.h_grid = parse_step_list(k.at("h"));
  cfg.horizon = parse_real(k, "T");
  cfg.paths = static_cast<int>(parse_count(k, "M"));
  cfg.master_seed = parse_seed(k.at("seed"));
  cfg.reference_factor = static_cast<int>(parse_count(k, "ref-factor"));
  cfg.workers = workers(k);
  cfg.x0 = {parse_real(k, "x0")};
  cfg.v0 = {parse_real(k, "v0")};
  const auto band = parse_reals(k.at("band"), "band");
  if (band.size() != 2 || band[0] > band[1]) throw ConfigError("--band: expected 'lo,hi' with lo <= hi");
  if (cfg.paths < 1) throw ConfigError("--M: need at least one path");
  const ModelSpec spec = parse_model(k.at("model"));

  StrongOrderResult res;
  try {
    res = with_model(spec, [&](const auto& model, const auto&) { return strong_order_probe(model, cfg); });
  } catch (const DivergenceError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  CsvWriter csv({"integrator", "potential", "gamma", "seed", "paths", "h", "h_ref", "rms_error"});
  for (std::size_t i = 0; i < res.h.size(); ++i) {
    csv.row({kind_name(cfg.kind), spec.id, format_double(cfg.gamma), std::to_string(cfg.master_seed),
             std::to_string(cfg.paths), format_double(res.h[i]), format_double(res.h_ref),
             format_double(res.rms_error[i])});
    out << kind_name(cfg.kind) << " h=" << fmt(res.h[i]) << " rms=" << fmt(res.rms_error[i]) << "\n";
  }
  const bool pass = std::isfinite(res.slope) && res.slope >= band[0] && res.slope <= band[1];
  CsvWriter fit({"integrator", "potential", "slope", "band_lo", "band_hi", "verdict"});
  fit.row({kind_name(cfg.kind), spec.id, format_double(res.slope), format_double(band[0]), format_double(band[1]),
           pass ? "PASS" : "FAIL"});
  const auto dir = out_dir(k);
  write_atomic(dir / "strong_order.csv", csv.str());
  write_atomic(dir / "strong_order_fit.csv", fit.str());
  write_atomic(dir / "manifest", manifest_text(cmd, k));
  out << verdict(pass, "strong-order", kind_name(cfg.kind) + " slope=" + fmt(res.slope) +
                                           " band=[" + fmt(band[0]) + "," + fmt(band[1]) + "]")
      << "\n";
  return pass ? kOk : kFail;
}

inline int cmd_diagnose(const Command& cmd, const KeyMap& k, std::ostream& out) {
  const ModelSpec spec = parse_model(k.at("model"));
  const double gamma = parse_real(k, "gamma");
  const std::uint64_t seed = parse_seed(k.at("seed"));
  const int nworkers = workers(k);
  const auto dir = out_dir(k);
  const std::string& probe = cmd.probe;

  const int code = with_model(spec, [&](const auto& model, const auto&) -> int {
    using M = std::decay_t<decltype(model)>;
    constexpr int Dim = M::dim_tag;
    const int d = model.dim();
    auto point_state = [d](double x, double v) {
      return State<Dim>{Vector<Dim>::Constant(d, x), Vector<Dim>::Constant(d, v)};
    };

    if (probe == "lyapunov") {
      if (d != 1) throw ConfigError("lyapunov probe supports d = 1 models only");
      if (!(gamma > 1.0)) throw ConfigError("--gamma must be > 1 for the lyapunov probe");
      const auto grid = state_grid<Dim>(d, parse_real(k, "grid-half"),
                                        static_cast<int>(parse_count(k, "grid-points")));
      const LyapunovFit fit = lyapunov_drift_check(model, gamma, grid);
      CsvWriter csv({"x", "v", "H", "LH", "bound"});
      for (const auto& z : grid) {
        const double h = lyapunov(gamma, z.x, z.v);
        const double g = lyapunov_generator(model, gamma, z.x, z.v);
        csv.row({format_double(z.x[0]), format_double(z.v[0]), format_double(h), format_double(g),
                 format_double(-fit.a * h + fit.b)});
      }
      write_atomic(dir / "lyapunov.csv", csv.str());
      out << verdict(fit.feasible, "lyapunov",
                     "a_fit=" + fmt(fit.a) + " b_fit=" + fmt(fit.b) +
                         " violations=" + std::to_string(fit.violations) + " threshold=a>0")
          << "\n";
      return fit.feasible ? kOk : kFail;
    }

    if (probe == "moments") {
      MomentConfig cfg;
      const auto kinds = parse_integrators(k.at("integrator"));
      if (kinds.size() != 1 || traits(kinds[0]).stochastic_gradient) {
        throw ConfigError("--integrator: moments takes exactly one of em, ubu");
      }
      cfg.kind = kinds[0];
      cfg.gamma = gamma;
      cfg.h = parse_step(k.at("h"));
      cfg.r = parse_real(k, "r");
      cfg.steps = parse_count(k, "steps");
      cfg.ensemble = static_cast<int>(parse_count(k, "M"));
      cfg.growth_limit = parse_real(k, "limit");
      cfg.master_seed = seed;
      cfg.workers = nworkers;
      cfg.x0 = {parse_real(k, "x0")};
      cfg.v0 = {parse_real(k, "v0")};
      if (!(gamma > 1.0)) throw ConfigError("--gamma must be > 1 for the moments probe");
      const MomentSeries s = moment_stability_probe(model, cfg);
      CsvWriter csv({"step", "moment", "ratio"});
      for (std::size_t i = 0; i < s.steps.size(); ++i) {
        csv.row({std::to_string(s.steps[i]), format_double(s.moment[i]), format_double(s.moment[i] / s.initial)});
      }
      write_atomic(dir / "moments.csv", csv.str());
      out << verdict(s.within_limit, "moments",
                     "max_ratio=" + fmt(s.max_ratio) + " threshold=" + fmt(cfg.growth_limit) +
                         " diverged=" + std::to_string(s.diverged))
          << "\n";
      return s.within_limit ? kOk : kFail;
    }

    if (probe == "tangent" || probe == "tangent-coupling" || probe == "coupling") {
      TangentConfig cfg;
      cfg.gamma = gamma;
      cfg.horizon = parse_real(k, "T");
      cfg.h_state = parse_step(k.at("h"));
      const State<Dim> z0 = point_state(parse_real(k, "x0"), parse_real(k, "v0"));
      RngStream noise = trajectory_stream(seed, 0, Channel::noise);
      auto init = [&] {
        if (probe == "coupling") return TangentState<Dim>::zero(d);
        const auto& which = k.at("init");
        if (which == "x") return TangentState<Dim>::position_derivative(d);
        if (which == "v") return TangentState<Dim>::velocity_derivative(d);
        if (which == "zero") return TangentState<Dim>::zero(d);
        throw ConfigError("--init: expected x, v or zero, got '" + which + "'");
      }();
      if (probe != "coupling" && !model.has_hessian()) {
        throw ConfigError("model " + spec.id + " has no hessian");
      }
      if (probe == "tangent") {
        const TangentSeries s = tangent_decay_probe(model, cfg, init, z0, noise);
        CsvWriter csv({"t", "sqrt_H"});
        for (std::size_t i = 0; i < s.times.size(); ++i) {
          csv.row({format_double(s.times[i]), format_double(s.values[i])});
        }
        write_atomic(dir / "tangent.csv", csv.str());
        const bool pass = s.fit.valid() && s.fit.rate > 0.0 && s.fit.r2 > 0.95;
        out << verdict(pass, "tangent",
                       "rate=" + fmt(s.fit.rate) + " r2=" + fmt(s.fit.r2) + " threshold=rate>0,r2>0.95")
            << "\n";
        return pass ? kOk : kFail;
      }
      const double gap = parse_real(k, "gap");
      const State<Dim> shift = point_state(gap, 0.0);
      if (probe == "tangent-coupling") {
        const CouplingLinearity c = tangent_coupling_linearity(model, cfg, init, z0, shift, noise);
        CsvWriter csv({"t", "diff_gap", "diff_half_gap"});
        bool all_zero = true;
        for (std::size_t i = 0; i < c.full_gap.times.size(); ++i) {
          csv.row({format_double(c.full_gap.times[i]), format_double(c.full_gap.values[i]),
                   format_double(c.half_gap.values[i])});
          all_zero = all_zero && c.full_gap.values[i] == 0.0 && c.half_gap.values[i] == 0.0;
        }
        write_atomic(dir / "tangent_coupling.csv", csv.str());
        const bool pass = all_zero || (c.amplitude_ratio >= 1.6 && c.amplitude_ratio <= 2.4);
        out << verdict(pass, "tangent-coupling",
                       all_zero ? std::string("difference identically 0")
                                : "amplitude_ratio=" + fmt(c.amplitude_ratio) + " threshold=[1.6,2.4]")
            << "\n";
        return pass ? kOk : kFail;
      }
      const State<Dim> z1{z0.x + shift.x, z0.v + shift.v};
      const TangentSeries s = sync_coupling_probe(model, gamma, z0, z1, cfg.horizon, cfg.h_state, noise);
      CsvWriter csv({"t", "gap"});
      for (std::size_t i = 0; i < s.times.size(); ++i) {
        csv.row({format_double(s.times[i]), format_double(s.values[i])});
      }
      write_atomic(dir / "coupling.csv", csv.str());
      const bool pass = s.fit.valid() && s.fit.rate > 0.0 && s.fit.r2 > 0.95;
      out << verdict(pass, "coupling", "rate=" + fmt(s.fit.rate) + " r2=" + fmt(s.fit.r2) +
                                           " threshold=rate>0,r2>0.95")
          << "\n";
      return pass ? kOk : kFail;
    }

    // kolmogorov and poisson
    const auto f = make_test_function<Dim>(k.at("f"));
    const auto points = parse_points(k.at("points"));
    MonteCarloConfig mc;
    mc.gamma = gamma;
    mc.h_mc = parse_step(k.at("h-mc"));
    mc.n_mc = static_cast<int>(parse_count(k, "n-mc"));
    mc.master_seed = seed;
    mc.workers = nworkers;
    if (mc.n_mc < 2) throw ConfigError("--n-mc must be >= 2");
    if (model.dim() > 2 && !requires { model.stiffness(); }) {
      throw ConfigError("stationary mean needs d <= 2");
    }
    const double pi_f = stationary_mean(model, f).value;

    if (probe == "kolmogorov") {
      const auto t_grid = parse_reals(k.at("t"), "t");
      CsvWriter csv({"point", "x", "v", "t", "u", "stderr"});
      bool pass = true;
      std::string detail;
      for (std::size_t p = 0; p < points.size(); ++p) {
        const auto z = point_state(points[p].first, points[p].second);
        const KolmogorovEstimate e = kolmogorov_probe(model, f, pi_f, z, t_grid, mc, p);
        for (std::size_t j = 0; j < e.t.size(); ++j) {
          csv.row({std::to_string(p), format_double(points[p].first), format_double(points[p].second),
                   format_double(e.t[j]), format_double(e.u[j]), format_double(e.stderr_[j])});
        }
        const bool ok = std::abs(e.u.back()) <= 3.0 * e.stderr_.back();
        pass = pass && ok;
        detail += " point" + std::to_string(p) + ":u_final=" + fmt(e.u.back()) + ",stderr=" +
                  fmt(e.stderr_.back()) + (e.fit.valid() ? ",rate=" + fmt(e.fit.rate) : "") +
                  (e.inconclusive ? ",inconclusive" : "");
      }
      write_atomic(dir / "kolmogorov.csv", csv.str());
      out << verdict(pass, "kolmogorov", "threshold=|u(t_max)|<=3*stderr" + detail) << "\n";
      return pass ? kOk : kFail;
    }

    const double h = parse_step(k.at("h"));
    const long long n_max = parse_count(k, "n-max");
    CsvWriter csv({"point", "x", "v", "residual", "stderr", "phi", "phi_next", "tail", "tail_stderr"});
    bool pass = true;
    bool tails = true;
    std::string detail;
    for (std::size_t p = 0; p < points.size(); ++p) {
      const auto z = point_state(points[p].first, points[p].second);
      const PoissonResidual r = discrete_poisson_residual(model, f, pi_f, z, h, n_max, mc, p);
      csv.row({std::to_string(p), format_double(points[p].first), format_double(points[p].second),
               format_double(r.residual), format_double(r.stderr_), format_double(r.phi),
               format_double(r.phi_next), format_double(r.tail), format_double(r.tail_stderr)});
      pass = pass && std::abs(r.residual) <= 3.0 * r.stderr_;
      tails = tails && r.tail_ok;
      detail += " point" + std::to_string(p) + ":residual=" + fmt(r.residual) + ",stderr=" + fmt(r.stderr_);
    }
    write_atomic(dir / "poisson.csv", csv.str());
    if (!tails) detail += " (tail bound not achieved at n-max; widen --n-max)";
    out << verdict(pass && tails, "poisson", "threshold=|residual|<=3*stderr" + detail) << "\n";
    return pass && tails ? kOk : kFail;
  });
  write_atomic(dir / "manifest", manifest_text(cmd, k));
  return code;
}

inline int cmd_reference_mean(const Command& cmd, const KeyMap& k, std::ostream& out) {
  const ModelSpec spec = parse_model(k.at("model"));
  if (spec.dim > 2) throw ConfigError("reference-mean needs d <= 2 (model " + spec.id + ")");
  const ReferenceMean r = with_model(spec, [&](const auto& model, const auto&) {
    constexpr int Dim = std::decay_t<decltype(model)>::dim_tag;
    return stationary_mean(model, make_test_function<Dim>(k.at("f")));
  });
  out << "pi(f) = " << format_double(r.value) << " +- " << format_double(r.abs_error_bound) << " (" << r.method
      << ")\n";
  if (!k.at("out").empty()) {
    const std::filesystem::path dir = k.at("out");
    CsvWriter csv({"potential", "f", "value", "abs_error_bound", "method"});
    csv.row({spec.id, k.at("f"), format_double(r.value), format_double(r.abs_error_bound), r.method});
    write_atomic(dir / "reference_mean.csv", csv.str());
    write_atomic(dir / "manifest", manifest_text(cmd, k));
  }
  return kOk;
}

}  // namespace detail_cli

inline int dispatch(const Command& cmd, std::ostream& out) {
  const KeyMap k = resolve(cmd);
  if (cmd.name == "sweep") return detail_cli::cmd_sweep(cmd, k, out);
  if (cmd.name == "strong-order") return detail_cli::cmd_strong_order(cmd, k, out);
  if (cmd.name == "diagnose") return detail_cli::cmd_diagnose(cmd, k, out);
  return detail_cli::cmd_reference_mean(cmd, k, out);
}

/// Parses argv (manifest via --config, then flags; later wins) into a
/// Command. Returns false when help was printed.
inline bool parse_command(int argc, const char* const* argv, Command& cmd, std::ostream& out) {
  std::vector<std::string> args(argv + 1, argv + argc);
  KeyMap file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a file");
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
    } else {
      continue;
    }
    file = read_config(path);
    break;
  }
  if (!file.empty() && (args.empty() || args[0].rfind("-", 0) == 0)) {
    if (!file.count("command")) throw ConfigError("config file has no 'command' key");
    std::vector<std::string> head{file["command"]};
    if (file["command"] == "diagnose" && file.count("probe")) head.push_back(file["probe"]);
    args.insert(args.begin(), head.begin(), head.end());
  }
  file.erase("command");
  file.erase("probe");
  file.erase("version");

  CLI::App app{"Underdamped Langevin integrators: error sweeps and diagnostics", "langevin"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.footer("--config FILE loads key=value settings (e.g. an emitted manifest); flags given after it win.");
  std::map<std::string, std::map<std::string, std::string>> raw;
  std::map<std::string, bool> full_scale;
  std::string probe;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"sweep", "time-average mse over an h grid, one series per integrator"},
      {"strong-order", "endpoint RMS error against a fine same-path reference"},
      {"diagnose", "run one diagnostics probe"},
      {"reference-mean", "pi(f): closed form where known, quadrature otherwise"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->set_help_flag("--help", "print help for " + name);
    if (name == "diagnose") {
      sub->add_option("probe", probe, "lyapunov, moments, tangent, tangent-coupling, coupling, kolmogorov, poisson")
          ->required();
    }
    for (const auto& key : detail_cli::accepted_keys(name)) {
      if (key == "full-scale") {
        sub->add_flag("--full-scale", full_scale[name], "use the long horizon T = 1e7");
        continue;
      }
      sub->add_option("--" + key, raw[name][key], detail_cli::key_help(key));
    }
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return false;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return false;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return false;
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }

  CLI::App* chosen = app.get_subcommands().front();
  cmd.name = chosen->get_name();
  cmd.probe = cmd.name == "diagnose" ? probe : "";
  if (cmd.name == "diagnose") detail_cli::defaults_for(cmd.name, cmd.probe);  // validates the probe name
  const auto keys = detail_cli::accepted_keys(cmd.name);
  for (const auto& [key, value] : file) {
    if (!keys.count(key)) throw ConfigError("unknown key '" + key + "' in config for " + cmd.name);
    cmd.given[key] = value;
  }
  for (const auto& key : keys) {
    if (key == "full-scale") {
      if (chosen->count("--full-scale")) cmd.given[key] = "true";
      continue;
    }
    if (chosen->count("--" + key)) cmd.given[key] = raw[cmd.name][key];
  }
  return true;
}

/// Entry point. Exit codes: 0 success/PASS, 1 quantitative FAIL,
/// 2 usage/config error, 3 divergence.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    Command cmd;
    if (!parse_command(argc, argv, cmd, out)) return kOk;
    return dispatch(cmd, out);
  } catch (const AllDivergedError& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFail;
  }
}

}  // namespace langevin::cli
