#include "bubbleformer/descriptor.hpp"

#include <cmath>

#include "bubbleformer/error.hpp"

namespace bubbleformer {

const std::array<const char*, FluidDescriptor::kSize>& descriptor_field_names() {
  static const std::array<const char*, FluidDescriptor::kSize> names = {
      "reynolds",           "prandtl",             "stefan",
      "viscosity_ratio",    "density_ratio",       "conductivity_ratio",
      "heat_capacity_ratio", "heater_temperature", "wait_time"};
  return names;
}

std::array<double, FluidDescriptor::kSize> FluidDescriptor::to_array() const {
  return {reynolds,          prandtl,           stefan,
          viscosity_ratio,   density_ratio,     conductivity_ratio,
          heat_capacity_ratio, heater_temperature, wait_time};
}

FluidDescriptor FluidDescriptor::from_array(const std::array<double, kSize>& v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
}

void FluidDescriptor::validate() const {
  const auto values = to_array();
  const auto& names = descriptor_field_names();
  for (std::size_t i = 0; i < kSize; ++i) {
    const std::string field = std::string("descriptor.") + names[i];
    if (!std::isfinite(values[i])) throw ConfigError(field, "must be finite");
    if (i < 3 && values[i] <= 0.0) throw ConfigError(field, "must be positive");
    if (i >= 3 && i < 7 && (values[i] <= 0.0 || values[i] > 1.0)) {
      throw ConfigError(field, "ratio must lie in (0, 1]");
    }
  }
}

}  // namespace bubbleformer
