#pragma once

#include <array>
#include <string>

namespace bubbleformer {

/// The nine conditioning scalars fed to FiLM, in this fixed order.
struct FluidDescriptor {
  double reynolds = 1.0;
  double prandtl = 1.0;
  double stefan = 1.0;
  double viscosity_ratio = 1.0;
  double density_ratio = 1.0;
  double conductivity_ratio = 1.0;
  double heat_capacity_ratio = 1.0;
  double heater_temperature = 1.0;
  double wait_time = 1.0;

  static constexpr std::size_t kSize = 9;

  std::array<double, kSize> to_array() const;
  static FluidDescriptor from_array(const std::array<double, kSize>& v);

  /// Throws ConfigError (field "descriptor.<name>") when a value is non-finite,
  /// a ratio leaves (0,1] or Re/Pr/St is not positive.
  void validate() const;

  friend bool operator==(const FluidDescriptor&, const FluidDescriptor&) = default;
};

/// Field names in descriptor order, as used by JSON metadata.
const std::array<const char*, FluidDescriptor::kSize>& descriptor_field_names();

}  // namespace bubbleformer
