#include "salgpode/box.hpp"

#include "salgpode/errors.hpp"

#include <cmath>

namespace salgpode {

Box::Box(Eigen::VectorXd l, Eigen::VectorXd h) : lo(std::move(l)), hi(std::move(h)) { validate(); }

void Box::validate() const {
  if (lo.size() == 0 || lo.size() != hi.size()) throw ContractViolation("Box: bad dimensions");
  if (!lo.allFinite() || !hi.allFinite()) throw ContractViolation("Box: bounds must be finite");
  if (!(lo.array() <= hi.array()).all()) throw ContractViolation("Box: lo must be <= hi");
}

bool Box::contains(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return x.size() == lo.size() && (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

Eigen::VectorXd Box::clamp(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return x.cwiseMax(lo).cwiseMin(hi);
}

SafetyBounds::SafetyBounds(Eigen::VectorXd lo, Eigen::VectorXd hi)
    : x_min(std::move(lo)), x_max(std::move(hi)) {
  validate();
}

void SafetyBounds::validate() const {
  if (x_min.size() == 0 || x_min.size() != x_max.size())
    throw ContractViolation("SafetyBounds: bad dimensions");
  for (Eigen::Index i = 0; i < x_min.size(); ++i) {
    if (std::isnan(x_min[i]) || std::isnan(x_max[i]))
      throw ContractViolation("SafetyBounds: NaN bound");
    if (!(x_min[i] < x_max[i])) throw ContractViolation("SafetyBounds: x_min must be < x_max");
  }
}

bool SafetyBounds::contains(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  if (x.size() != x_min.size() || !x.allFinite()) return false;
  return (x.array() >= x_min.array()).all() && (x.array() <= x_max.array()).all();
}

SafetyBounds SafetyBounds::shrunk(double factor) const {
  SafetyBounds out = *this;
  for (Eigen::Index i = 0; i < x_min.size(); ++i) {
    if (std::isfinite(x_min[i]) && std::isfinite(x_max[i])) {
      const double c = 0.5 * (x_min[i] + x_max[i]);
      const double r = 0.5 * (x_max[i] - x_min[i]) * factor;
      out.x_min[i] = c - r;
      out.x_max[i] = c + r;
    }
  }
  return out;
}

}  // namespace salgpode
