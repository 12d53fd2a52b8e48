#pragma once

// Synthetic scooping terrains.
//
// A terrain is a grid of material cells over a heightfield. Each material has
// an appearance (what the camera sees) and a latent depth-response curve
// (what the scoop gets). Training materials and novel test materials are
// built so that appearance does not predict the novel materials' response,
// and Layers terrains hide a second material under the visible surface.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kcmd/scoop.hpp"

namespace kcmd::sim {

enum class Composition { single, mixture, partition, layers };

std::string to_string(Composition c);
Composition composition_from_string(const std::string& s);

struct LatentMaterial {
  int id = 0;
  std::string name;
  std::array<double, 3> color{};
  double texture = 0.05;       // per-cell appearance noise scale
  double peak_volume = 0.0;    // cm^3 at the best depth; 0 means unscoopable
  double peak_depth = 0.05;    // m
  double depth_width = 0.03;   // m
  double jam_penalty = 0.0;    // cm^3 lost per 15 degrees of slope above 15 degrees
  double stiffness_gain = 0.0; // hard multiplies by (1 + g), soft by (1 - g)
  bool novel = false;

  bool scoopable() const { return peak_volume > 0.0; }
  // Mean reward on flat ground, before noise.
  double response(double depth, Stiffness stiffness) const;
};

struct SimConfig {
  double extent_x = 0.9;
  double extent_y = 0.6;
  double cell = 0.01;
  double max_elevation = 0.2;
  double max_slope_deg = 30.0;
  double wall_margin = 0.05;        // patch footprint must stay this far from the walls
  double reward_noise_sigma = 0.25; // multiplicative lognormal
  double noise_floor = 0.5;         // cm^3, uniform additive
  double scoop_capacity = 260.0;    // cm^3
  double volume_scale = 0.72;       // calibrates the suite-wide mean reward
  double novel_color_margin = 0.15;
  double patch_pixel = 0.01;        // m per patch pixel
};

struct TerrainInstance {
  SimConfig config;
  std::size_t nx = 0, ny = 0;
  std::vector<int> surface;       // material id per cell, row-major (y * nx + x)
  std::vector<int> hidden;        // empty unless Layers; -1 where no hidden layer
  double layer_depth = 0.0;       // m of surface material above the hidden layer
  std::vector<double> height;     // m
  std::vector<double> excavated;  // m removed so far per cell
  std::vector<std::array<double, 3>> texture;
  std::vector<LatentMaterial> materials;  // indexed by material id
  Composition composition = Composition::single;
  std::uint64_t seed = 0;

  double extent_x() const { return static_cast<double>(nx) * config.cell; }
  double extent_y() const { return static_cast<double>(ny) * config.cell; }
  bool has_hidden() const { return !hidden.empty(); }
  // Material currently at the surface of a cell (hidden once dug through).
  int visible_material(std::size_t cx, std::size_t cy) const;
  // Material a scoop of the given depth engages at a cell.
  int engaged_material(std::size_t cx, std::size_t cy, double depth) const;
  std::vector<int> material_ids() const;

  // The same terrain turned 90 degrees counter-clockwise.
  TerrainInstance rotated_90() const;
};

struct Task {
  std::string id;
  Composition composition = Composition::single;
  std::vector<int> material_ids;
  TerrainInstance terrain;
};

struct Suite {
  std::uint64_t seed = 0;
  std::vector<LatentMaterial> materials;
  std::vector<Task> train;
  std::vector<Task> test;
};

// Eight training materials followed by four novel ones, jittered by seed.
std::vector<LatentMaterial> material_pool(std::uint64_t seed, const SimConfig& config = {});

Suite generate_suite(std::uint64_t seed, std::size_t n_train, std::size_t n_test, const SimConfig& config = {});

// Layers terrain: one side has `surface` over `hidden` (layer thickness
// `layer_depth`), the other side is plain `side`.
Task make_layers_task(const std::vector<LatentMaterial>& materials, int surface, int hidden, int side,
                      double layer_depth, std::uint64_t seed, const SimConfig& config = {});

bool feasible(const TerrainInstance& terrain, const ScoopAction& act);

// Oriented local patch; `noise_seed` drives the per-capture sensor noise.
Observation render_patch(const TerrainInstance& terrain, const ScoopAction& act, std::uint64_t noise_seed,
                         std::size_t channels = 4, std::size_t size = 16);

// Deterministic reward for a given noise draw (z ~ N(0,1), u ~ U[0,1)).
double scoop_reward(const TerrainInstance& terrain, const ScoopAction& act, double z, double u);
double execute_scoop(TerrainInstance& terrain, const ScoopAction& act, std::uint64_t noise_seed);

// 5th largest reward.
double compute_threshold(std::span<const double> rewards);

TaskDataset collect_offline(const Task& task, std::size_t n_samples, std::uint64_t seed);

struct ActionGrid {
  std::size_t nx = 8;
  std::size_t ny = 6;
  std::size_t n_depths = 4;
  double x_min = 0.24, x_max = 0.66;
  double y_min = 0.19, y_max = 0.41;

  static ActionGrid full_scale() { return ActionGrid{15, 12, 4}; }
  std::size_t size() const { return nx * ny * kYawCount * n_depths * 2; }
  std::vector<ScoopAction> enumerate() const;
};

// Sanity checks over a suite: composition counts, novelty constraints,
// heightfield limits. Returns human-readable violations (empty when valid).
std::vector<std::string> check_suite(const Suite& suite);

}  // namespace kcmd::sim
