#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace langevin {

inline constexpr int Dynamic = Eigen::Dynamic;

template <int Dim>
using Vector = Eigen::Matrix<double, Dim, 1>;

template <int Dim>
using Matrix = Eigen::Matrix<double, Dim, Dim>;

template <int Dim>
Vector<Dim> zero_vector(int dim) {
  return Vector<Dim>::Zero(dim);
}

/// Position/velocity pair.
template <int Dim>
struct State {
  Vector<Dim> x;
  Vector<Dim> v;

  int dim() const { return static_cast<int>(x.size()); }
  bool finite() const { return x.allFinite() && v.allFinite(); }

  static State zero(int dim) { return {zero_vector<Dim>(dim), zero_vector<Dim>(dim)}; }
};

template <int Dim>
State<Dim> make_state(double x, double v) {
  static_assert(Dim == 1 || Dim == Dynamic);
  State<Dim> s{Vector<Dim>::Constant(1, x), Vector<Dim>::Constant(1, v)};
  return s;
}

/// Thrown when a trajectory produces a non-finite state.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(long long step)
      : std::runtime_error("trajectory diverged at step " + std::to_string(step)),
        step_(step) {}
  long long step() const { return step_; }

 private:
  long long step_;
};

/// Euclidean norm of the concatenated pair.
template <int Dim>
double joint_norm(const Vector<Dim>& a, const Vector<Dim>& b) {
  return std::sqrt(a.squaredNorm() + b.squaredNorm());
}

}  // namespace langevin
