#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "langevin/rng.hpp"
#include "langevin/types.hpp"

namespace langevin {

/// Constants attached to a potential.
///   growth:     |grad U(x)| <= c1 (|x| + 1)
///   drift:      x . grad U(x) >= m |x|^2 - c0
///   convexity:  hess U(x) >= convexity * I  for |x| >= big_r
struct ModelConstants {
  double m = 0.0;
  double c0 = 0.0;
  double c1 = 1.0;
  double convexity = 0.0;
  double big_r = 0.0;
};

template <class M>
concept PotentialModel = requires(const M& m, const typename M::vector_type& x) {
  { M::dim_tag } -> std::convertible_to<int>;
  { m.dim() } -> std::convertible_to<int>;
  { m.value(x) } -> std::convertible_to<double>;
  { m.gradient(x) } -> std::convertible_to<typename M::vector_type>;
  { m.hessian(x) } -> std::convertible_to<typename M::matrix_type>;
  { m.has_hessian() } -> std::convertible_to<bool>;
  { m.constants() } -> std::convertible_to<ModelConstants>;
};

template <int Dim>
struct ModelBase {
  static constexpr int dim_tag = Dim;
  using vector_type = Vector<Dim>;
  using matrix_type = Matrix<Dim>;
};

/// U(x) = x^2/2 + sin x on the real line.
struct SineModel : ModelBase<1> {
  int dim() const { return 1; }
  double value(const vector_type& x) const { return 0.5 * x[0] * x[0] + std::sin(x[0]); }
  vector_type gradient(const vector_type& x) const {
    return vector_type::Constant(x[0] + std::cos(x[0]));
  }
  matrix_type hessian(const vector_type& x) const {
    return matrix_type::Constant(1.0 - std::sin(x[0]));
  }
  bool has_hessian() const { return true; }
  // x(x + cos x) >= x^2 - |x| >= x^2/2 - 1/2, so (m, c0) = (0.5, 2) holds
  // with margin. U'' = 1 - sin x only touches 0, hence convexity 0.
  ModelConstants constants() const { return {0.5, 2.0, 2.0, 0.0, 0.0}; }
};

inline SineModel sine_potential() { return {}; }

/// U(x) = k |x|^2 / 2.
template <int Dim>
class QuadraticModel : public ModelBase<Dim> {
 public:
  using typename ModelBase<Dim>::vector_type;
  using typename ModelBase<Dim>::matrix_type;

  QuadraticModel(double k, int dim) : k_(k), dim_(dim) {
    if (!(k > 0.0)) throw std::invalid_argument("quadratic_potential: k must be > 0");
    if (dim < 1 || (Dim != Dynamic && dim != Dim)) {
      throw std::invalid_argument("quadratic_potential: bad dimension");
    }
  }

  int dim() const { return dim_; }
  double stiffness() const { return k_; }
  double value(const vector_type& x) const { return 0.5 * k_ * x.squaredNorm(); }
  vector_type gradient(const vector_type& x) const { return k_ * x; }
  matrix_type hessian(const vector_type&) const {
    return k_ * matrix_type::Identity(dim_, dim_);
  }
  bool has_hessian() const { return true; }
  ModelConstants constants() const { return {k_, 0.0, k_, k_, 0.0}; }

 private:
  double k_;
  int dim_;
};

template <int Dim = 1>
QuadraticModel<Dim> quadratic_potential(double k, int dim = Dim == Dynamic ? 1 : Dim) {
  return QuadraticModel<Dim>(k, dim);
}

/// U = 0. Used as a free-particle stub in tests and diagnostics.
template <int Dim>
class ZeroModel : public ModelBase<Dim> {
 public:
  using typename ModelBase<Dim>::vector_type;
  using typename ModelBase<Dim>::matrix_type;

  explicit ZeroModel(int dim = Dim == Dynamic ? 1 : Dim) : dim_(dim) {}
  int dim() const { return dim_; }
  double value(const vector_type&) const { return 0.0; }
  vector_type gradient(const vector_type&) const { return zero_vector<Dim>(dim_); }
  matrix_type hessian(const vector_type&) const { return matrix_type::Zero(dim_, dim_); }
  bool has_hessian() const { return true; }
  ModelConstants constants() const { return {0.0, 0.0, 1.0, 0.0, 0.0}; }

 private:
  int dim_;
};

/// Potential given by callables; the hessian is optional.
template <int Dim>
class FunctionModel : public ModelBase<Dim> {
 public:
  using typename ModelBase<Dim>::vector_type;
  using typename ModelBase<Dim>::matrix_type;
  using ValueFn = std::function<double(const vector_type&)>;
  using GradientFn = std::function<vector_type(const vector_type&)>;
  using HessianFn = std::function<matrix_type(const vector_type&)>;

  FunctionModel(int dim, ValueFn value, GradientFn gradient, ModelConstants constants,
                HessianFn hessian = {})
      : dim_(dim),
        value_(std::move(value)),
        gradient_(std::move(gradient)),
        hessian_(std::move(hessian)),
        constants_(constants) {}

  int dim() const { return dim_; }
  double value(const vector_type& x) const { return value_(x); }
  vector_type gradient(const vector_type& x) const { return gradient_(x); }
  bool has_hessian() const { return static_cast<bool>(hessian_); }
  matrix_type hessian(const vector_type& x) const {
    if (!hessian_) throw std::logic_error("model has no hessian");
    return hessian_(x);
  }
  ModelConstants constants() const { return constants_; }

 private:
  int dim_;
  ValueFn value_;
  GradientFn gradient_;
  HessianFn hessian_;
  ModelConstants constants_;
};

// ---------------------------------------------------------------------------
// Test functions
// ---------------------------------------------------------------------------

/// Observable f(x, v) with its gradient (stacked as [d/dx; d/dv]).
template <int Dim>
struct TestFunction {
  using vector_type = Vector<Dim>;
  std::function<double(const vector_type&, const vector_type&)> f;
  std::function<std::pair<vector_type, vector_type>(const vector_type&, const vector_type&)> grad_f;
  double c2 = 1.0;
  std::string id;
  /// Depends on x only; lets quadrature skip the velocity integral.
  bool position_only = false;

  double operator()(const State<Dim>& z) const { return f(z.x, z.v); }
  double operator()(const vector_type& x, const vector_type& v) const { return f(x, v); }
};

template <int Dim>
TestFunction<Dim> first_position() {
  using V = Vector<Dim>;
  return {[](const V& x, const V&) { return x[0]; },
          [](const V& x, const V& v) {
            V gx = V::Zero(x.size());
            gx[0] = 1.0;
            return std::pair{gx, V(V::Zero(v.size()))};
          },
          1.0, "x", true};
}

template <int Dim>
TestFunction<Dim> first_velocity() {
  using V = Vector<Dim>;
  return {[](const V&, const V& v) { return v[0]; },
          [](const V& x, const V& v) {
            V gv = V::Zero(v.size());
            gv[0] = 1.0;
            return std::pair{V(V::Zero(x.size())), gv};
          },
          1.0, "v", false};
}

template <int Dim>
TestFunction<Dim> position_squared() {
  using V = Vector<Dim>;
  return {[](const V& x, const V&) { return x.squaredNorm(); },
          [](const V& x, const V& v) { return std::pair{V(2.0 * x), V(V::Zero(v.size()))}; },
          2.0, "x2", true};
}

template <int Dim>
TestFunction<Dim> velocity_squared() {
  using V = Vector<Dim>;
  return {[](const V&, const V& v) { return v.squaredNorm(); },
          [](const V& x, const V& v) { return std::pair{V(V::Zero(x.size())), V(2.0 * v)}; },
          2.0, "v2", false};
}

template <int Dim>
TestFunction<Dim> constant_function(double c) {
  using V = Vector<Dim>;
  return {[c](const V&, const V&) { return c; },
          [](const V& x, const V& v) { return std::pair{V(V::Zero(x.size())), V(V::Zero(v.size()))}; },
          0.0, "const:" + std::to_string(c), true};
}

// ---------------------------------------------------------------------------
// Stochastic gradients
// ---------------------------------------------------------------------------

template <class S>
concept StochasticGradientModel =
    requires(const S& s, RngStream& stream, const typename S::vector_type& x,
             const typename S::omega_type& omega) {
      typename S::base_type;
      requires PotentialModel<typename S::base_type>;
      { s.base() } -> std::convertible_to<const typename S::base_type&>;
      { s.sample_omega(stream) } -> std::convertible_to<typename S::omega_type>;
      { s.b(x, omega) } -> std::convertible_to<typename S::vector_type>;
    };

/// b(x, w) = w1 x + w2 + cos x with w1 ~ U(0.2, 1.8), w2 ~ N(0, 0.4^2).
class SineStochasticGradient {
 public:
  using base_type = SineModel;
  using vector_type = Vector<1>;
  struct omega_type {
    double scale;
    double shift;
  };

  const base_type& base() const { return base_; }
  omega_type sample_omega(RngStream& stream) const {
    const double w1 = stream.uniform(0.2, 1.8);
    const double w2 = 0.4 * stream.normal();
    return {w1, w2};
  }
  vector_type b(const vector_type& x, const omega_type& w) const {
    return vector_type::Constant(w.scale * x[0] + w.shift + std::cos(x[0]));
  }

 private:
  base_type base_;
};

inline SineStochasticGradient sine_stochastic_gradient() { return {}; }

/// Quadratic analogue of the sine-model noise: b(x, w) = w1 k x + w2 1.
template <int Dim>
class QuadraticStochasticGradient {
 public:
  using base_type = QuadraticModel<Dim>;
  using vector_type = Vector<Dim>;
  using omega_type = SineStochasticGradient::omega_type;

  explicit QuadraticStochasticGradient(base_type base) : base_(std::move(base)) {}
  const base_type& base() const { return base_; }
  omega_type sample_omega(RngStream& stream) const {
    const double w1 = stream.uniform(0.2, 1.8);
    const double w2 = 0.4 * stream.normal();
    return {w1, w2};
  }
  vector_type b(const vector_type& x, const omega_type& w) const {
    return (w.scale * base_.stiffness()) * x +
           vector_type::Constant(base_.dim(), w.shift);
  }

 private:
  base_type base_;
};

/// Zero-variance wrapper: b(x, w) = grad U(x).
template <PotentialModel Model>
class ExactGradient {
 public:
  using base_type = Model;
  using vector_type = typename Model::vector_type;
  struct omega_type {};

  explicit ExactGradient(Model base) : base_(std::move(base)) {}
  const base_type& base() const { return base_; }
  omega_type sample_omega(RngStream&) const { return {}; }
  vector_type b(const vector_type& x, const omega_type&) const { return base_.gradient(x); }

 private:
  Model base_;
};

/// Uniform size-`batch` subset of {0, ..., parts-1} by partial Fisher-Yates.
inline std::vector<int> sample_subset(int parts, int batch, RngStream& stream) {
  if (batch < 1 || batch > parts) {
    throw std::invalid_argument("minibatch: batch size must satisfy 1 <= B <= M");
  }
  std::vector<int> idx(static_cast<std::size_t>(parts));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < batch; ++i) {
    const auto j = i + static_cast<int>(stream.below(static_cast<std::uint64_t>(parts - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(batch));
  return idx;
}

/// (1/B) sum_{j in C} grad U_j(x), C a uniform size-B subset.
template <int Dim>
Vector<Dim> minibatch_gradient(const std::vector<std::function<Vector<Dim>(const Vector<Dim>&)>>& parts,
                               int batch, RngStream& stream, const Vector<Dim>& x) {
  const auto subset = sample_subset(static_cast<int>(parts.size()), batch, stream);
  Vector<Dim> acc = zero_vector<Dim>(static_cast<int>(x.size()));
  for (int j : subset) acc += parts[static_cast<std::size_t>(j)](x);
  return acc / static_cast<double>(batch);
}

/// U = (1/M) sum_j U_j with U_j(x) = k_j |x|^2 / 2, k_j = 2 j / (M + 1)
/// (j = 1..M), so the full potential is |x|^2 / 2.
template <int Dim>
class MinibatchQuadraticModel {
 public:
  using base_type = QuadraticModel<Dim>;
  using vector_type = Vector<Dim>;
  using omega_type = std::vector<int>;

  MinibatchQuadraticModel(int parts, int batch, int dim)
      : base_(1.0, dim), parts_(parts), batch_(batch) {
    if (parts < 1 || batch < 1 || batch > parts) {
      throw std::invalid_argument("minibatch-quadratic: need 1 <= B <= M");
    }
  }

  const base_type& base() const { return base_; }
  int parts() const { return parts_; }
  int batch() const { return batch_; }
  double part_stiffness(int j) const { return 2.0 * (j + 1) / (parts_ + 1.0); }

  omega_type sample_omega(RngStream& stream) const { return sample_subset(parts_, batch_, stream); }
  vector_type b(const vector_type& x, const omega_type& subset) const {
    double k = 0.0;
    for (int j : subset) k += part_stiffness(j);
    return (k / static_cast<double>(subset.size())) * x;
  }

 private:
  base_type base_;
  int parts_;
  int batch_;
};

// ---------------------------------------------------------------------------
// Assumption checks
// ---------------------------------------------------------------------------

enum class CheckStatus { pass, fail, skipped };

struct AssumptionReport {
  std::vector<bool> growth_ok;
  std::vector<bool> drift_ok;
  std::vector<bool> convexity_ok;  // empty when the hessian check was skipped
  CheckStatus growth = CheckStatus::pass;
  CheckStatus drift = CheckStatus::pass;
  CheckStatus convexity = CheckStatus::skipped;

  bool passed() const {
    return growth != CheckStatus::fail && drift != CheckStatus::fail &&
           convexity != CheckStatus::fail;
  }
};

/// Evaluates the growth, drift and (if a hessian exists) convexity
/// constants on each grid point. Failures are reported, not thrown.
template <PotentialModel Model>
AssumptionReport check_assumptions(const Model& model,
                                   const std::vector<typename Model::vector_type>& grid,
                                   std::optional<ModelConstants> override_constants = {}) {
  if (grid.empty()) throw std::invalid_argument("check_assumptions: empty grid");
  const ModelConstants c = override_constants.value_or(model.constants());
  constexpr double slack = 1e-12;
  AssumptionReport report;
  for (const auto& x : grid) {
    const auto g = model.gradient(x);
    const double r = x.norm();
    report.growth_ok.push_back(g.norm() <= c.c1 * (r + 1.0) + slack);
    report.drift_ok.push_back(x.dot(g) >= c.m * r * r - c.c0 - slack);
  }
  auto all = [](const std::vector<bool>& v) {
    return std::all_of(v.begin(), v.end(), [](bool b) { return b; });
  };
  report.growth = all(report.growth_ok) ? CheckStatus::pass : CheckStatus::fail;
  report.drift = all(report.drift_ok) ? CheckStatus::pass : CheckStatus::fail;
  if (model.has_hessian()) {
    for (const auto& x : grid) {
      if (x.norm() < c.big_r) {
        report.convexity_ok.push_back(true);
        continue;
      }
      Eigen::SelfAdjointEigenSolver<typename Model::matrix_type> eig(model.hessian(x));
      report.convexity_ok.push_back(eig.eigenvalues().minCoeff() >= c.convexity - slack);
    }
    report.convexity = all(report.convexity_ok) ? CheckStatus::pass : CheckStatus::fail;
  }
  return report;
}

}  // namespace langevin
