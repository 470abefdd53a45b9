#pragma once

#include <charconv>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "langevin/estimator.hpp"
#include "langevin/model.hpp"

namespace langevin {

/// Parsed model id:
///   sine
///   quadratic[:k[,d]]
///   minibatch-quadratic:M,B[,d]
struct ModelSpec {
  enum class Family { sine, quadratic, minibatch };
  Family family = Family::sine;
  double k = 1.0;
  int dim = 1;
  int parts = 0;
  int batch = 0;
  std::string id = "sine";
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& token, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (token.empty() || end != token.c_str() + token.size()) {
    throw std::invalid_argument(what + ": cannot parse '" + token + "'");
  }
  return v;
}

inline int parse_int(const std::string& token, const std::string& what) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (token.empty() || ec != std::errc() || ptr != token.data() + token.size()) {
    throw std::invalid_argument(what + ": cannot parse '" + token + "'");
  }
  return v;
}

}  // namespace detail

inline ModelSpec parse_model(const std::string& id) {
  ModelSpec spec;
  spec.id = id;
  const auto colon = id.find(':');
  const std::string name = id.substr(0, colon);
  const auto args = colon == std::string::npos ? std::vector<std::string>{}
                                               : detail::split(std::string_view(id).substr(colon + 1), ',');
  if (name == "sine") {
    if (!args.empty()) throw std::invalid_argument("model 'sine' takes no parameters");
    spec.family = ModelSpec::Family::sine;
  } else if (name == "quadratic") {
    if (args.size() > 2) throw std::invalid_argument("model 'quadratic' takes at most k,d");
    spec.family = ModelSpec::Family::quadratic;
    if (args.size() >= 1) spec.k = detail::parse_double(args[0], "model quadratic k");
    if (args.size() == 2) spec.dim = detail::parse_int(args[1], "model quadratic d");
    if (!(spec.k > 0.0)) throw std::invalid_argument("model quadratic: k must be > 0");
  } else if (name == "minibatch-quadratic") {
    if (args.size() < 2 || args.size() > 3) {
      throw std::invalid_argument("model 'minibatch-quadratic' needs M,B[,d]");
    }
    spec.family = ModelSpec::Family::minibatch;
    spec.parts = detail::parse_int(args[0], "model minibatch-quadratic M");
    spec.batch = detail::parse_int(args[1], "model minibatch-quadratic B");
    if (args.size() == 3) spec.dim = detail::parse_int(args[2], "model minibatch-quadratic d");
    if (spec.batch < 1 || spec.batch > spec.parts) {
      throw std::invalid_argument("model minibatch-quadratic: need 1 <= B <= M");
    }
  } else {
    throw std::invalid_argument("unknown model '" + id +
                                "' (valid: sine, quadratic[:k[,d]], minibatch-quadratic:M,B[,d])");
  }
  if (spec.dim < 1) throw std::invalid_argument("model " + id + ": d must be >= 1");
  return spec;
}

/// Calls fn(base_model, stochastic_gradient) with the concrete types of `spec`.
template <class Fn>
decltype(auto) with_model(const ModelSpec& spec, Fn&& fn) {
  switch (spec.family) {
    case ModelSpec::Family::sine:
      return fn(sine_potential(), sine_stochastic_gradient());
    case ModelSpec::Family::quadratic:
      if (spec.dim == 1) {
        const auto base = QuadraticModel<1>(spec.k, 1);
        return fn(base, QuadraticStochasticGradient<1>(base));
      } else {
        const auto base = QuadraticModel<Dynamic>(spec.k, spec.dim);
        return fn(base, QuadraticStochasticGradient<Dynamic>(base));
      }
    case ModelSpec::Family::minibatch:
      if (spec.dim == 1) {
        const MinibatchQuadraticModel<1> sg(spec.parts, spec.batch, 1);
        return fn(sg.base(), sg);
      } else {
        const MinibatchQuadraticModel<Dynamic> sg(spec.parts, spec.batch, spec.dim);
        return fn(sg.base(), sg);
      }
  }
  throw std::logic_error("with_model: bad family");
}

/// Observable ids: x, v, x2, v2, const:c.
template <int Dim>
TestFunction<Dim> make_test_function(const std::string& id) {
  if (id == "x") return first_position<Dim>();
  if (id == "v") return first_velocity<Dim>();
  if (id == "x2") return position_squared<Dim>();
  if (id == "v2") return velocity_squared<Dim>();
  if (id.rfind("const:", 0) == 0) {
    auto f = constant_function<Dim>(detail::parse_double(id.substr(6), "f const"));
    f.id = id;
    return f;
  }
  throw std::invalid_argument("unknown f '" + id + "' (valid: x, v, x2, v2, const:c)");
}

/// pi(f): exact for constants and for quadratic potentials, quadrature
/// otherwise.
template <PotentialModel Model>
ReferenceMean stationary_mean(const Model& model, const TestFunction<Model::dim_tag>& f) {
  if (f.id.rfind("const:", 0) == 0) {
    return {f(zero_vector<Model::dim_tag>(model.dim()), zero_vector<Model::dim_tag>(model.dim())), 0.0,
            "exact"};
  }
  if constexpr (requires { model.stiffness(); }) {
    const double d = model.dim();
    if (f.id == "x" || f.id == "v") return {0.0, 0.0, "exact"};
    if (f.id == "x2") return {d / model.stiffness(), 0.0, "exact"};
    if (f.id == "v2") return {d, 0.0, "exact"};
  }
  return reference_mean(model, f);
}

/// run_sweep with the model and observable resolved from cfg's ids.
inline ErrorReport run_sweep(const SweepConfig& cfg) {
  const ModelSpec spec = parse_model(cfg.model_id);
  return with_model(spec, [&](const auto& base, const auto& sg) {
    constexpr int Dim = std::decay_t<decltype(base)>::dim_tag;
    const auto f = make_test_function<Dim>(cfg.f_id);
    const double pi_f = stationary_mean(base, f).value;
    if (traits(cfg.integrator).stochastic_gradient) return run_sweep(cfg, sg, f, pi_f);
    return run_sweep(cfg, ExactGradient(base), f, pi_f);
  });
}

}  // namespace langevin
