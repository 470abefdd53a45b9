#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

#include "langevin/brownian.hpp"
#include "langevin/model.hpp"
#include "langevin/rng.hpp"
#include "langevin/types.hpp"

namespace langevin {

enum class IntegratorKind { em, ubu, sg_em, sg_ubu };

/// Strong order (p, q) and gradient type of each scheme.
struct IntegratorTraits {
  int strong_order;
  int moment_order;
  bool stochastic_gradient;
};

constexpr IntegratorTraits traits(IntegratorKind kind) {
  switch (kind) {
    case IntegratorKind::em: return {1, 1, false};
    case IntegratorKind::ubu: return {2, 2, false};
    case IntegratorKind::sg_em: return {1, 1, true};
    case IntegratorKind::sg_ubu: return {2, 2, true};
  }
  return {0, 0, false};
}

inline std::string_view to_string(IntegratorKind kind) {
  switch (kind) {
    case IntegratorKind::em: return "em";
    case IntegratorKind::ubu: return "ubu";
    case IntegratorKind::sg_em: return "sg-em";
    case IntegratorKind::sg_ubu: return "sg-ubu";
  }
  return "?";
}

inline IntegratorKind parse_integrator(std::string_view name) {
  if (name == "em") return IntegratorKind::em;
  if (name == "ubu") return IntegratorKind::ubu;
  if (name == "sg-em") return IntegratorKind::sg_em;
  if (name == "sg-ubu") return IntegratorKind::sg_ubu;
  throw std::invalid_argument("unknown integrator '" + std::string(name) +
                              "' (expected em, ubu, sg-em, sg-ubu)");
}

struct StepParams {
  double gamma = 2.0;
  double h = 0.1;
  double h_max = 0.5;

  void validate() const {
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be > 0");
    if (!(h > 0.0)) throw std::invalid_argument("h must be > 0");
    if (h > h_max) {
      throw std::invalid_argument("h = " + std::to_string(h) + " exceeds h_max = " +
                                  std::to_string(h_max) + " (raise h_max to override)");
    }
  }
};

// ---------------------------------------------------------------------------
// Deterministic kernels (noise supplied by the caller)
// ---------------------------------------------------------------------------

/// x' = x + h v,  v' = v - h g - gamma h v + noise.
template <int Dim>
void em_update(State<Dim>& z, const Vector<Dim>& grad, double gamma, double h,
               const Vector<Dim>& noise) {
  Vector<Dim> v_next = (1.0 - gamma * h) * z.v - h * grad + noise;
  z.x += h * z.v;
  z.v = std::move(v_next);
}

/// Exact flow of dx = v dt, dv = -gamma v dt + sqrt(2 gamma) dB over t with
/// the stochastic integrals supplied.
template <int Dim>
void ou_update(State<Dim>& z, double decay, double drift, const Vector<Dim>& xi_x,
               const Vector<Dim>& xi_v) {
  z.x += drift * z.v + xi_x;
  z.v = decay * z.v + xi_v;
}

/// Precomputed half-step data for UBU.
struct UbuCoefficients {
  double h = 0.0;
  double decay = 1.0;  // E(h/2)
  double drift = 0.0;  // F(h/2)
  OuCovariance cov;
  OuFactor factor;

  UbuCoefficients(double gamma, double h_)
      : h(h_),
        decay(ou_decay(gamma, 0.5 * h_)),
        drift(ou_drift_integral(gamma, 0.5 * h_)),
        cov(ou_covariance(gamma, 0.5 * h_)),
        factor(cov) {}
};

/// U(h/2) B(h) U(h/2) with both OU half-step increments supplied.
template <int Dim, class GradientFn>
void ubu_update(State<Dim>& z, const UbuCoefficients& c, GradientFn&& gradient,
                const Vector<Dim>& xi_x1, const Vector<Dim>& xi_v1,
                const Vector<Dim>& xi_x2, const Vector<Dim>& xi_v2) {
  ou_update(z, c.decay, c.drift, xi_x1, xi_v1);
  z.v -= c.h * gradient(z.x);
  ou_update(z, c.decay, c.drift, xi_x2, xi_v2);
}

namespace detail {
template <int Dim>
void require_finite(const State<Dim>& z, long long step) {
  if (!z.finite()) throw DivergenceError(step);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Steppers: one object per (scheme, gamma, h), reused along a trajectory
// ---------------------------------------------------------------------------

class EmStepper {
 public:
  explicit EmStepper(double gamma, double h)
      : gamma_(gamma), h_(h), noise_scale_(std::sqrt(2.0 * gamma * h)) {}

  template <int Dim, class GradientFn>
  void step(State<Dim>& z, GradientFn&& gradient, RngStream& noise) const {
    Vector<Dim> xi(z.dim());
    for (int i = 0; i < z.dim(); ++i) xi[i] = noise_scale_ * noise.normal();
    em_update(z, gradient(z.x), gamma_, h_, xi);
  }

 private:
  double gamma_;
  double h_;
  double noise_scale_;
};

class UbuStepper {
 public:
  UbuStepper(double gamma, double h) : coeffs_(gamma, h) {}

  template <int Dim, class GradientFn>
  void step(State<Dim>& z, GradientFn&& gradient, RngStream& noise) const {
    const int d = z.dim();
    auto [xx1, xv1] = sample_ou_increment<Dim>(coeffs_.factor, d, noise);
    ou_update(z, coeffs_.decay, coeffs_.drift, xx1, xv1);
    z.v -= coeffs_.h * gradient(z.x);
    auto [xx2, xv2] = sample_ou_increment<Dim>(coeffs_.factor, d, noise);
    ou_update(z, coeffs_.decay, coeffs_.drift, xx2, xv2);
  }

  const UbuCoefficients& coefficients() const { return coeffs_; }

 private:
  UbuCoefficients coeffs_;
};

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

template <PotentialModel Model>
State<Model::dim_tag> em_step(State<Model::dim_tag> z, const Model& model,
                              const StepParams& p, RngStream& noise) {
  EmStepper(p.gamma, p.h).step(z, [&](const auto& x) { return model.gradient(x); }, noise);
  detail::require_finite(z, 0);
  return z;
}

template <PotentialModel Model>
State<Model::dim_tag> ubu_step(State<Model::dim_tag> z, const Model& model,
                               const StepParams& p, RngStream& noise) {
  UbuStepper(p.gamma, p.h).step(z, [&](const auto& x) { return model.gradient(x); }, noise);
  detail::require_finite(z, 0);
  return z;
}

/// SG-EM: the gradient is replaced by b(x, w) with w drawn from `omega`.
template <StochasticGradientModel SG>
State<SG::base_type::dim_tag> sgem_step(State<SG::base_type::dim_tag> z, const SG& sg,
                                        const StepParams& p, RngStream& noise,
                                        RngStream& omega) {
  const auto w = sg.sample_omega(omega);
  EmStepper(p.gamma, p.h).step(z, [&](const auto& x) { return sg.b(x, w); }, noise);
  detail::require_finite(z, 0);
  return z;
}

/// SG-UBU: one w per full step, used in the B substep.
template <StochasticGradientModel SG>
State<SG::base_type::dim_tag> sgubu_step(State<SG::base_type::dim_tag> z, const SG& sg,
                                         const StepParams& p, RngStream& noise,
                                         RngStream& omega) {
  const auto w = sg.sample_omega(omega);
  UbuStepper(p.gamma, p.h).step(z, [&](const auto& x) { return sg.b(x, w); }, noise);
  detail::require_finite(z, 0);
  return z;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Noise and stochastic-gradient streams of one trajectory.
struct TrajectoryStreams {
  RngStream noise;
  RngStream omega;

  static TrajectoryStreams for_trajectory(std::uint64_t master_seed, std::uint64_t index) {
    return {trajectory_stream(master_seed, index, Channel::noise),
            trajectory_stream(master_seed, index, Channel::omega)};
  }
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double value) {
    const double t = sum_ + value;
    if (std::abs(sum_) >= std::abs(value)) {
      correction_ += (sum_ - t) + value;
    } else {
      correction_ += (value - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + correction_; }

 private:
  double sum_ = 0.0;
  double correction_ = 0.0;
};

template <int Dim>
struct TimeAverage {
  double average;
  State<Dim> final_state;
};

/// Runs `burn_in` unrecorded steps, then returns (1/N) sum_{n=0}^{N-1} f(Z_n)
/// together with Z_N.
template <int Dim, class StepFn>
TimeAverage<Dim> accumulate_time_average(State<Dim> z, const TestFunction<Dim>& f,
                                         long long n_steps, long long burn_in,
                                         StepFn&& step) {
  if (n_steps < 1) throw std::invalid_argument("simulate_time_average: N must be >= 1");
  long long index = 0;
  for (; index < burn_in; ++index) {
    step(z);
    detail::require_finite(z, index);
  }
  CompensatedSum sum;
  for (long long n = 0; n < n_steps; ++n, ++index) {
    sum.add(f(z));
    step(z);
    detail::require_finite(z, index);
  }
  return {sum.value() / static_cast<double>(n_steps), std::move(z)};
}

/// Time average along any of the four schemes. EM and UBU use the exact
/// gradient of sg.base(); the SG schemes draw one w per step.
template <StochasticGradientModel SG>
TimeAverage<SG::base_type::dim_tag> simulate_time_average(
    IntegratorKind kind, const SG& sg, const StepParams& params,
    const TestFunction<SG::base_type::dim_tag>& f, State<SG::base_type::dim_tag> z0,
    long long n_steps, TrajectoryStreams& streams, long long burn_in = 0) {
  params.validate();
  const auto& model = sg.base();
  auto exact = [&](const auto& x) { return model.gradient(x); };
  switch (kind) {
    case IntegratorKind::em: {
      const EmStepper s(params.gamma, params.h);
      return accumulate_time_average(std::move(z0), f, n_steps, burn_in,
                                     [&](auto& z) { s.step(z, exact, streams.noise); });
    }
    case IntegratorKind::ubu: {
      const UbuStepper s(params.gamma, params.h);
      return accumulate_time_average(std::move(z0), f, n_steps, burn_in,
                                     [&](auto& z) { s.step(z, exact, streams.noise); });
    }
    case IntegratorKind::sg_em: {
      const EmStepper s(params.gamma, params.h);
      return accumulate_time_average(std::move(z0), f, n_steps, burn_in, [&](auto& z) {
        const auto w = sg.sample_omega(streams.omega);
        s.step(z, [&](const auto& x) { return sg.b(x, w); }, streams.noise);
      });
    }
    case IntegratorKind::sg_ubu: {
      const UbuStepper s(params.gamma, params.h);
      return accumulate_time_average(std::move(z0), f, n_steps, burn_in, [&](auto& z) {
        const auto w = sg.sample_omega(streams.omega);
        s.step(z, [&](const auto& x) { return sg.b(x, w); }, streams.noise);
      });
    }
  }
  throw std::logic_error("unreachable");
}

/// Full-gradient overload; SG schemes are rejected.
template <PotentialModel Model>
TimeAverage<Model::dim_tag> simulate_time_average(
    IntegratorKind kind, const Model& model, const StepParams& params,
    const TestFunction<Model::dim_tag>& f, State<Model::dim_tag> z0, long long n_steps,
    TrajectoryStreams& streams, long long burn_in = 0) {
  if (traits(kind).stochastic_gradient) {
    throw std::invalid_argument("simulate_time_average: " + std::string(to_string(kind)) +
                                " needs a stochastic-gradient model");
  }
  return simulate_time_average(kind, ExactGradient<Model>(model), params, f, std::move(z0),
                               n_steps, streams, burn_in);
}

/// Advances z by n steps of a full-gradient scheme.
template <PotentialModel Model>
State<Model::dim_tag> advance(IntegratorKind kind, const Model& model, double gamma, double h,
                              State<Model::dim_tag> z, long long n_steps, RngStream& noise) {
  auto grad = [&](const auto& x) { return model.gradient(x); };
  if (kind == IntegratorKind::em) {
    const EmStepper s(gamma, h);
    for (long long n = 0; n < n_steps; ++n) {
      s.step(z, grad, noise);
      detail::require_finite(z, n);
    }
  } else if (kind == IntegratorKind::ubu) {
    const UbuStepper s(gamma, h);
    for (long long n = 0; n < n_steps; ++n) {
      s.step(z, grad, noise);
      detail::require_finite(z, n);
    }
  } else {
    throw std::invalid_argument("advance: full-gradient schemes only");
  }
  return z;
}

}  // namespace langevin
