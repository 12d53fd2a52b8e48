#include "kcmd/scoop.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "kcmd/error.hpp"

namespace kcmd {

Observation Observation::zeros(std::size_t c, std::size_t h, std::size_t w) {
  Observation o;
  o.channels = c;
  o.height = h;
  o.width = w;
  o.data.assign(c * h * w, 0.0);
  return o;
}

Observation Observation::flipped_vertical() const {
  Observation out = *this;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t col = 0; col < width; ++col) out.at(c, r, col) = at(c, height - 1 - r, col);
  return out;
}

void Observation::validate() const {
  if (data.size() != channels * height * width) {
    throw DimensionError("observation holds " + std::to_string(data.size()) + " values, expected " +
                         std::to_string(channels * height * width));
  }
  if (channels < 2) throw DimensionError("observation needs appearance and height channels");
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t col = 0; col < width; ++col) {
        const double v = at(c, r, col);
        if (!std::isfinite(v)) throw DomainError("observation contains a non-finite value");
        if (c + 1 < channels && (v < 0.0 || v > 1.0)) throw DomainError("appearance value outside [0, 1]");
      }
}

double ScoopAction::yaw_radians() const { return yaw * std::numbers::pi / 4.0; }

void ScoopAction::validate() const {
  if (yaw < 0 || yaw >= kYawCount) throw DomainError("yaw index " + std::to_string(yaw) + " outside 0..7");
  if (depth < kMinDepth - 1e-12 || depth > kMaxDepth + 1e-12) {
    throw DomainError("scoop depth " + std::to_string(depth) + " outside [0.03, 0.08]");
  }
  if (!std::isfinite(x) || !std::isfinite(y)) throw DomainError("scoop position is not finite");
}

}  // namespace kcmd
