#pragma once

// Scooping domain types shared by the simulator, the model and the tools.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace kcmd {

inline constexpr int kYawCount = 8;
inline constexpr double kMinDepth = 0.03;
inline constexpr double kMaxDepth = 0.08;

enum class Stiffness { soft = 0, hard = 1 };

// Local C x H x W patch. Columns run along the scoop direction (column 0 at
// the scoop start), rows run across it. The last channel is height in
// meters, the others are appearance in [0, 1].
struct Observation {
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<double> data;

  static Observation zeros(std::size_t c, std::size_t h, std::size_t w);

  double at(std::size_t c, std::size_t r, std::size_t col) const { return data[(c * height + r) * width + col]; }
  double& at(std::size_t c, std::size_t r, std::size_t col) { return data[(c * height + r) * width + col]; }

  // Mirror across the scoop line (row order reversed).
  Observation flipped_vertical() const;
  void validate() const;

  bool operator==(const Observation&) const = default;
};

struct ScoopAction {
  double x = 0.0;  // m
  double y = 0.0;  // m
  int yaw = 0;     // index into 8 headings, 45 degrees apart
  double depth = kMinDepth;
  Stiffness stiffness = Stiffness::soft;

  double yaw_radians() const;
  void validate() const;

  bool operator==(const ScoopAction&) const = default;
};

struct TrajectoryConstants {
  double attack_angle_deg = 135.0;
  double drag_length_m = 0.06;
  double closing_angle_deg = 190.0;
  double lift_height_m = 0.02;
  std::array<double, 2> linear_stiffness_n_per_m{250.0, 750.0};
  std::array<double, 2> torsion_stiffness_nm_per_rad{6.0, 20.0};

  bool operator==(const TrajectoryConstants&) const = default;
};

struct Record {
  Observation obs;
  ScoopAction action;
  double reward = 0.0;  // cm^3
};

// Learner view of one terrain's offline scoops. Ground-truth simulator
// fields never live here.
struct TaskDataset {
  std::string task_id;
  std::vector<Record> records;
};

}  // namespace kcmd
