#pragma once

#include <Eigen/Dense>

namespace salgpode {

/// Finite axis-aligned box, used for the candidate domain of initial states.
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  Box() = default;
  Box(Eigen::VectorXd lo, Eigen::VectorXd hi);

  Eigen::Index dim() const { return lo.size(); }
  Eigen::VectorXd width() const { return hi - lo; }
  Eigen::VectorXd center() const { return 0.5 * (lo + hi); }
  bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  Eigen::VectorXd clamp(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  void validate() const;
};

/// State constraint x_min <= x <= x_max (inclusive). Infinite entries
/// deactivate a side of a dimension.
struct SafetyBounds {
  Eigen::VectorXd x_min;
  Eigen::VectorXd x_max;

  SafetyBounds() = default;
  SafetyBounds(Eigen::VectorXd x_min, Eigen::VectorXd x_max);

  Eigen::Index dim() const { return x_min.size(); }
  /// False for non-finite states.
  bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  /// Box scaled about its center by `factor` on every finite side pair.
  SafetyBounds shrunk(double factor) const;
  void validate() const;
};

}  // namespace salgpode
