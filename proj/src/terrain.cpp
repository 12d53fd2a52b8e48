#include "kcmd/terrain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "kcmd/error.hpp"
#include "kcmd/rng.hpp"

namespace kcmd::sim {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct BaseMaterial {
  const char* name;
  std::array<double, 3> color;
  double texture, volume, depth, width, jam, gain;
};

// Loosely modelled on the granular materials of a lab sandbox. The last four
// are the novel test materials: their looks are far from every training
// material and their responses break the look-to-volume pattern of training.
constexpr std::array<BaseMaterial, 12> kBase{{
    {"sand", {0.86, 0.76, 0.56}, 0.03, 60, 0.065, 0.030, 30, 0.10},
    {"pebbles", {0.58, 0.52, 0.46}, 0.09, 38, 0.050, 0.025, 50, 0.25},
    {"slates", {0.32, 0.33, 0.38}, 0.07, 6, 0.040, 0.020, 60, 0.30},
    {"gravel", {0.62, 0.62, 0.60}, 0.06, 30, 0.055, 0.025, 45, 0.20},
    {"paper_balls", {0.95, 0.95, 0.93}, 0.04, 95, 0.070, 0.035, 10, -0.15},
    {"corn", {0.93, 0.78, 0.22}, 0.05, 75, 0.060, 0.030, 20, 0.0},
    {"shredded_cardboard", {0.70, 0.52, 0.33}, 0.06, 85, 0.070, 0.035, 15, -0.10},
    {"mulch", {0.42, 0.27, 0.16}, 0.07, 50, 0.060, 0.030, 25, 0.05},
    {"rock", {0.15, 0.15, 0.17}, 0.10, 45, 0.045, 0.020, 70, 0.30},
    {"packing_peanuts", {0.98, 0.98, 0.70}, 0.04, 10, 0.070, 0.030, 5, 0.0},
    {"cardboard_sheet", {0.80, 0.35, 0.12}, 0.02, 0, 0.050, 0.030, 0, 0.0},
    {"bedding", {0.30, 0.62, 0.32}, 0.05, 120, 0.065, 0.035, 10, -0.05},
}};
constexpr std::size_t kTrainMaterials = 8;

std::size_t cell_index(const TerrainInstance& t, std::size_t cx, std::size_t cy) { return cy * t.nx + cx; }

std::size_t clamp_cell(double v, std::size_t n) {
  const double c = std::floor(v);
  if (c < 0.0) return 0;
  if (c >= static_cast<double>(n)) return n - 1;
  return static_cast<std::size_t>(c);
}

// Bilinear interpolation of a per-cell quantity at world point (x, y).
template <class F>
double bilinear(const TerrainInstance& t, double x, double y, F&& f) {
  const double gx = std::clamp(x / t.config.cell - 0.5, 0.0, static_cast<double>(t.nx - 1));
  const double gy = std::clamp(y / t.config.cell - 0.5, 0.0, static_cast<double>(t.ny - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(gx));
  const auto y0 = static_cast<std::size_t>(std::floor(gy));
  const std::size_t x1 = std::min(x0 + 1, t.nx - 1), y1 = std::min(y0 + 1, t.ny - 1);
  const double tx = gx - static_cast<double>(x0), ty = gy - static_cast<double>(y0);
  return (1 - tx) * (1 - ty) * f(x0, y0) + tx * (1 - ty) * f(x1, y0) + (1 - tx) * ty * f(x0, y1) + tx * ty * f(x1, y1);
}

double height_at(const TerrainInstance& t, double x, double y) {
  return bilinear(t, x, y, [&](std::size_t cx, std::size_t cy) { return t.height[cell_index(t, cx, cy)]; });
}

double color_at(const TerrainInstance& t, std::size_t cx, std::size_t cy, std::size_t ch) {
  const std::size_t i = cell_index(t, cx, cy);
  const auto& m = t.materials[static_cast<std::size_t>(t.visible_material(cx, cy))];
  return std::clamp(m.color[ch] + m.texture * t.texture[i][ch], 0.0, 1.0);
}

struct Frame {
  double sx, sy, dx, dy, px, py;
  double at_x(double along, double across) const { return sx + along * dx + across * px; }
  double at_y(double along, double across) const { return sy + along * dy + across * py; }
};

Frame frame_of(const ScoopAction& a) {
  // Exact values on the axes so 90-degree rotations map patches exactly.
  static constexpr double h = std::numbers::sqrt2 / 2.0;
  static constexpr std::array<std::array<double, 2>, 8> dirs{
      {{1, 0}, {h, h}, {0, 1}, {-h, h}, {-1, 0}, {-h, -h}, {0, -1}, {h, -h}}};
  const auto& d = dirs[static_cast<std::size_t>(a.yaw)];
  return {a.x, a.y, d[0], d[1], -d[1], d[0]};
}

std::vector<double> slope_field_deg(const TerrainInstance& t) {
  std::vector<double> s(t.nx * t.ny, 0.0);
  for (std::size_t cy = 0; cy < t.ny; ++cy)
    for (std::size_t cx = 0; cx < t.nx; ++cx) {
      const std::size_t xl = cx > 0 ? cx - 1 : cx, xr = cx + 1 < t.nx ? cx + 1 : cx;
      const std::size_t yl = cy > 0 ? cy - 1 : cy, yr = cy + 1 < t.ny ? cy + 1 : cy;
      const double gx = (t.height[cell_index(t, xr, cy)] - t.height[cell_index(t, xl, cy)]) /
                        (static_cast<double>(xr - xl) * t.config.cell);
      const double gy = (t.height[cell_index(t, cx, yr)] - t.height[cell_index(t, cx, yl)]) /
                        (static_cast<double>(yr - yl) * t.config.cell);
      s[cell_index(t, cx, cy)] = std::atan(std::hypot(gx, gy)) / kDeg;
    }
  return s;
}

void make_heightfield(TerrainInstance& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double ex = t.extent_x(), ey = t.extent_y();
  const double base = 0.06 + 0.04 * u(rng);
  const double tilt_x = (u(rng) - 0.5) * 0.2, tilt_y = (u(rng) - 0.5) * 0.2;
  struct Ridge {
    double cx, cy, nx, ny, amp, width;
  };
  std::vector<Ridge> ridges;
  const int n_ridges = 1 + static_cast<int>(u(rng) * 3.0);
  for (int i = 0; i < n_ridges; ++i) {
    const double ang = u(rng) * std::numbers::pi;
    ridges.push_back({u(rng) * ex, u(rng) * ey, -std::sin(ang), std::cos(ang), (u(rng) - 0.35) * 0.09,
                      0.04 + 0.08 * u(rng)});
  }
  std::vector<double> relief(t.nx * t.ny, 0.0);
  for (std::size_t cy = 0; cy < t.ny; ++cy)
    for (std::size_t cx = 0; cx < t.nx; ++cx) {
      const double x = (static_cast<double>(cx) + 0.5) * t.config.cell;
      const double y = (static_cast<double>(cy) + 0.5) * t.config.cell;
      double h = tilt_x * (x - ex / 2) + tilt_y * (y - ey / 2);
      for (const auto& r : ridges) {
        const double d = (x - r.cx) * r.nx + (y - r.cy) * r.ny;
        h += r.amp * std::exp(-d * d / (2 * r.width * r.width));
      }
      relief[cell_index(t, cx, cy)] = h;
    }
  // Scale relief so slope and elevation limits hold with some slack.
  t.height.assign(relief.size(), 0.0);
  double scale = 1.0;
  for (int iter = 0; iter < 50; ++iter) {
    for (std::size_t i = 0; i < relief.size(); ++i) t.height[i] = base + scale * relief[i];
    const auto [lo, hi] = std::minmax_element(t.height.begin(), t.height.end());
    const auto slopes = slope_field_deg(t);
    const double smax = *std::max_element(slopes.begin(), slopes.end());
    if (smax <= t.config.max_slope_deg * 0.95 && *hi <= t.config.max_elevation * 0.95 && *lo >= 0.0) break;
    scale *= 0.85;
  }
}

void assign_layout(TerrainInstance& t, Composition comp, const std::vector<int>& mats, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = t.nx * t.ny;
  t.surface.assign(n, mats.front());
  if (comp == Composition::single || mats.size() == 1) return;
  if (comp == Composition::mixture) {
    // Fine Voronoi mosaic: a patch sees several materials at once.
    const std::size_t seeds = 500;
    std::vector<std::array<double, 2>> pts(seeds);
    std::vector<int> lab(seeds);
    for (std::size_t s = 0; s < seeds; ++s) {
      pts[s] = {u(rng) * t.extent_x(), u(rng) * t.extent_y()};
      lab[s] = mats[s % mats.size()];
    }
    std::shuffle(lab.begin(), lab.end(), rng);
    for (std::size_t cy = 0; cy < t.ny; ++cy)
      for (std::size_t cx = 0; cx < t.nx; ++cx) {
        const double x = (static_cast<double>(cx) + 0.5) * t.config.cell;
        const double y = (static_cast<double>(cy) + 0.5) * t.config.cell;
        double best = 1e9;
        int m = mats.front();
        for (std::size_t s = 0; s < seeds; ++s) {
          const double d = (x - pts[s][0]) * (x - pts[s][0]) + (y - pts[s][1]) * (y - pts[s][1]);
          if (d < best) {
            best = d;
            m = lab[s];
          }
        }
        t.surface[cell_index(t, cx, cy)] = m;
      }
    return;
  }
  // Partition (and the visible layout of Layers): straight boundary through
  // a point near the middle of the action area.
  const double ang = u(rng) * std::numbers::pi;
  const double bx = t.extent_x() * (0.4 + 0.2 * u(rng)), by = t.extent_y() * (0.4 + 0.2 * u(rng));
  const double nxv = std::cos(ang), nyv = std::sin(ang);
  for (std::size_t cy = 0; cy < t.ny; ++cy)
    for (std::size_t cx = 0; cx < t.nx; ++cx) {
      const double x = (static_cast<double>(cx) + 0.5) * t.config.cell;
      const double y = (static_cast<double>(cy) + 0.5) * t.config.cell;
      const double side = (x - bx) * nxv + (y - by) * nyv;
      t.surface[cell_index(t, cx, cy)] = side < 0 ? mats[0] : mats[1];
    }
}

TerrainInstance blank_terrain(const SimConfig& config, const std::vector<LatentMaterial>& materials,
                              Composition comp, std::uint64_t seed) {
  TerrainInstance t;
  t.config = config;
  t.nx = static_cast<std::size_t>(std::lround(config.extent_x / config.cell));
  t.ny = static_cast<std::size_t>(std::lround(config.extent_y / config.cell));
  t.materials = materials;
  t.composition = comp;
  t.seed = seed;
  t.excavated.assign(t.nx * t.ny, 0.0);
  std::mt19937_64 rng(derive_seed(seed, {11}));
  std::normal_distribution<double> n01(0.0, 1.0);
  t.texture.resize(t.nx * t.ny);
  for (auto& tx : t.texture) tx = {n01(rng), n01(rng), n01(rng)};
  std::mt19937_64 hrng(derive_seed(seed, {12}));
  make_heightfield(t, hrng);
  return t;
}

Task build_task(std::string id, Composition comp, std::vector<int> mats, const std::vector<LatentMaterial>& pool,
                std::uint64_t seed, const SimConfig& config) {
  Task task;
  task.id = std::move(id);
  task.composition = comp;
  task.terrain = blank_terrain(config, pool, comp, seed);
  std::mt19937_64 rng(derive_seed(seed, {13}));
  if (comp == Composition::layers) {
    // mats = {surface, hidden, side}
    assign_layout(task.terrain, Composition::partition, {mats[0], mats[2]}, rng);
    auto& t = task.terrain;
    t.hidden.assign(t.nx * t.ny, -1);
    for (std::size_t i = 0; i < t.surface.size(); ++i)
      if (t.surface[i] == mats[0]) t.hidden[i] = mats[1];
    std::uniform_real_distribution<double> u(0.02, 0.045);
    t.layer_depth = u(rng);
  } else {
    assign_layout(task.terrain, comp, mats, rng);
  }
  std::sort(mats.begin(), mats.end());
  mats.erase(std::unique(mats.begin(), mats.end()), mats.end());
  task.material_ids = std::move(mats);
  return task;
}

}  // namespace

std::string to_string(Composition c) {
  switch (c) {
    case Composition::single: return "Single";
    case Composition::mixture: return "Mixture";
    case Composition::partition: return "Partition";
    case Composition::layers: return "Layers";
  }
  return "?";
}

Composition composition_from_string(const std::string& s) {
  if (s == "Single") return Composition::single;
  if (s == "Mixture") return Composition::mixture;
  if (s == "Partition") return Composition::partition;
  if (s == "Layers") return Composition::layers;
  throw FormatError("unknown composition '" + s + "'");
}

double LatentMaterial::response(double depth, Stiffness stiffness) const {
  const double z = (depth - peak_depth) / depth_width;
  const double gain = stiffness == Stiffness::hard ? 1.0 + stiffness_gain : 1.0 - stiffness_gain;
  return peak_volume * std::exp(-z * z) * gain;
}

int TerrainInstance::visible_material(std::size_t cx, std::size_t cy) const {
  const std::size_t i = cy * nx + cx;
  if (!hidden.empty() && hidden[i] >= 0 && excavated[i] >= layer_depth) return hidden[i];
  return surface[i];
}

int TerrainInstance::engaged_material(std::size_t cx, std::size_t cy, double depth) const {
  const std::size_t i = cy * nx + cx;
  if (!hidden.empty() && hidden[i] >= 0 && depth > layer_depth - excavated[i]) return hidden[i];
  return surface[i];
}

std::vector<int> TerrainInstance::material_ids() const {
  std::set<int> ids(surface.begin(), surface.end());
  for (int h : hidden)
    if (h >= 0) ids.insert(h);
  return {ids.begin(), ids.end()};
}

TerrainInstance TerrainInstance::rotated_90() const {
  TerrainInstance r = *this;
  r.nx = ny;
  r.ny = nx;
  std::swap(r.config.extent_x, r.config.extent_y);
  auto remap = [&](const auto& src, auto& dst) {
    for (std::size_t j2 = 0; j2 < r.ny; ++j2)
      for (std::size_t i2 = 0; i2 < r.nx; ++i2) {
        const std::size_t i = j2, j = ny - 1 - i2;
        dst[j2 * r.nx + i2] = src[j * nx + i];
      }
  };
  remap(surface, r.surface);
  if (!hidden.empty()) remap(hidden, r.hidden);
  remap(height, r.height);
  remap(excavated, r.excavated);
  remap(texture, r.texture);
  return r;
}

std::vector<LatentMaterial> material_pool(std::uint64_t seed, const SimConfig& config) {
  std::mt19937_64 rng(derive_seed(seed, {1}));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<LatentMaterial> pool;
    for (std::size_t i = 0; i < kBase.size(); ++i) {
      const auto& b = kBase[i];
      LatentMaterial m;
      m.id = static_cast<int>(i);
      m.name = b.name;
      for (int c = 0; c < 3; ++c) m.color[c] = std::clamp(b.color[c] + 0.03 * u(rng), 0.02, 0.98);
      m.texture = b.texture;
      m.peak_volume = b.volume * (1.0 + 0.15 * u(rng));
      m.peak_depth = b.depth + 0.004 * u(rng);
      m.depth_width = b.width;
      m.jam_penalty = b.jam;
      m.stiffness_gain = std::clamp(b.gain + 0.05 * u(rng), -0.5, 0.5);
      m.novel = i >= kTrainMaterials;
      pool.push_back(m);
    }
    bool ok = true;
    for (std::size_t i = kTrainMaterials; i < pool.size() && ok; ++i)
      for (std::size_t j = 0; j < kTrainMaterials && ok; ++j) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) d2 += (pool[i].color[c] - pool[j].color[c]) * (pool[i].color[c] - pool[j].color[c]);
        ok = std::sqrt(d2) >= config.novel_color_margin;
      }
    if (ok) return pool;
  }
  throw ConfigError("material pool: could not place novel appearances outside the configured margin");
}

Task make_layers_task(const std::vector<LatentMaterial>& materials, int surface, int hidden, int side,
                      double layer_depth, std::uint64_t seed, const SimConfig& config) {
  const auto n = static_cast<int>(materials.size());
  for (int id : {surface, hidden, side})
    if (id < 0 || id >= n) throw ConfigError("layers task: material id out of range");
  if (surface == hidden) throw ConfigError("layers task: hidden material must differ from the surface");
  Task t = build_task("layers-probe", Composition::layers, {surface, hidden, side}, materials, seed, config);
  t.terrain.layer_depth = layer_depth;
  return t;
}

Suite generate_suite(std::uint64_t seed, std::size_t n_train, std::size_t n_test, const SimConfig& config) {
  if (n_train < 2) throw ConfigError("suite needs at least 2 training tasks");
  if (n_test < 1) throw ConfigError("suite needs at least 1 test task");
  Suite suite;
  suite.seed = seed;
  suite.materials = material_pool(seed, config);
  std::mt19937_64 rng(derive_seed(seed, {2}));

  // Training compositions in the 8 : 25 : 18 proportion.
  const double nt = static_cast<double>(n_train);
  const auto n_single = static_cast<std::size_t>(std::lround(nt * 8.0 / 51.0));
  const auto n_partition = std::min(n_train - n_single, static_cast<std::size_t>(std::lround(nt * 25.0 / 51.0)));
  std::vector<Composition> comps(n_single, Composition::single);
  comps.insert(comps.end(), n_partition, Composition::partition);
  comps.insert(comps.end(), n_train - n_single - n_partition, Composition::mixture);

  std::vector<int> train_ids(kTrainMaterials);
  for (std::size_t i = 0; i < kTrainMaterials; ++i) train_ids[i] = static_cast<int>(i);
  std::vector<int> coverage = train_ids;
  std::shuffle(coverage.begin(), coverage.end(), rng);

  auto pick_distinct = [&](const std::vector<int>& from, std::vector<int>& mats, std::size_t count,
                           std::vector<int>* queue) {
    while (mats.size() < count) {
      int m;
      if (queue && !queue->empty()) {
        m = queue->back();
        queue->pop_back();
      } else {
        m = from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
      }
      if (std::find(mats.begin(), mats.end(), m) == mats.end()) mats.push_back(m);
    }
  };

  for (std::size_t i = 0; i < n_train; ++i) {
    std::vector<int> mats;
    const Composition c = comps[i];
    const std::size_t count = c == Composition::single ? 1
                              : c == Composition::partition
                                  ? 2
                                  : 2 + std::uniform_int_distribution<std::size_t>(0, 1)(rng);
    pick_distinct(train_ids, mats, count, &coverage);
    std::string id = "train-" + std::string(i < 10 ? "0" : "") + std::to_string(i) + "-" + to_string(c);
    suite.train.push_back(build_task(std::move(id), c, mats, suite.materials, derive_seed(seed, {100, i}), config));
  }

  // Test tasks cycle through the four compositions; every novel material is
  // used at least once and every test task has at least one novel material.
  std::vector<int> novel_ids, all_ids, all_scoopable;
  for (const auto& m : suite.materials) {
    all_ids.push_back(m.id);
    if (m.scoopable()) all_scoopable.push_back(m.id);
    if (m.novel) novel_ids.push_back(m.id);
  }
  std::vector<int> novel_queue = novel_ids;
  std::shuffle(novel_queue.begin(), novel_queue.end(), rng);
  const std::array<Composition, 4> cycle{Composition::single, Composition::partition, Composition::mixture,
                                         Composition::layers};
  for (std::size_t i = 0; i < n_test; ++i) {
    const Composition c = cycle[i % cycle.size()];
    const bool needs_scoopable = c == Composition::single || c == Composition::mixture;
    int required = -1;
    for (auto it = novel_queue.begin(); it != novel_queue.end(); ++it) {
      if (!needs_scoopable || suite.materials[static_cast<std::size_t>(*it)].scoopable()) {
        required = *it;
        novel_queue.erase(it);
        break;
      }
    }
    if (required < 0) {
      std::vector<int> ok;
      for (int id : novel_ids)
        if (!needs_scoopable || suite.materials[static_cast<std::size_t>(id)].scoopable()) ok.push_back(id);
      if (ok.empty()) throw ConfigError("suite: no novel material fits a " + to_string(c) + " test task");
      required = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
    }
    std::vector<int> mats{required};
    const auto& fill_from = needs_scoopable ? all_scoopable : all_ids;
    if (c == Composition::partition) pick_distinct(fill_from, mats, 2, nullptr);
    if (c == Composition::mixture) pick_distinct(fill_from, mats, 2 + std::uniform_int_distribution<std::size_t>(0, 1)(rng), nullptr);
    if (c == Composition::layers) {
      pick_distinct(fill_from, mats, 3, nullptr);
      // The required novel material takes a random role; a visible side must
      // be scoopable so the terrain has a reachable success threshold.
      std::shuffle(mats.begin(), mats.end(), rng);
      auto scoop = [&](int id) { return suite.materials[static_cast<std::size_t>(id)].scoopable(); };
      if (!scoop(mats[2])) std::swap(mats[2], scoop(mats[0]) ? mats[0] : mats[1]);
    }
    std::string id = "test-" + std::string(i < 10 ? "0" : "") + std::to_string(i) + "-" + to_string(c);
    suite.test.push_back(build_task(std::move(id), c, mats, suite.materials, derive_seed(seed, {200, i}), config));
  }
  return suite;
}

bool feasible(const TerrainInstance& t, const ScoopAction& a) {
  if (a.yaw < 0 || a.yaw >= kYawCount) return false;
  const Frame f = frame_of(a);
  const double along = 16 * t.config.patch_pixel, half = 8 * t.config.patch_pixel;
  const double m = t.config.wall_margin;
  for (double s : {0.0, along})
    for (double c : {-half, half}) {
      const double x = f.at_x(s, c), y = f.at_y(s, c);
      if (x < m - 1e-9 || x > t.extent_x() - m + 1e-9 || y < m - 1e-9 || y > t.extent_y() - m + 1e-9) return false;
    }
  return true;
}

Observation render_patch(const TerrainInstance& t, const ScoopAction& a, std::uint64_t noise_seed,
                         std::size_t channels, std::size_t size) {
  a.validate();
  if (a.x < 0.0 || a.y < 0.0 || a.x > t.extent_x() || a.y > t.extent_y()) {
    throw BoundsError("scoop start (" + std::to_string(a.x) + ", " + std::to_string(a.y) + ") outside the terrain");
  }
  if (channels != 4) throw DimensionError("render_patch produces 3 appearance channels plus height");
  Observation o = Observation::zeros(channels, size, size);
  const Frame f = frame_of(a);
  const double px = t.config.patch_pixel;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> app_noise(0.0, 0.01), h_noise(0.0, 0.001);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const double along = (static_cast<double>(c) + 0.5) * px;
      const double across = (static_cast<double>(r) + 0.5 - static_cast<double>(size) / 2.0) * px;
      const double x = f.at_x(along, across), y = f.at_y(along, across);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = bilinear(t, x, y, [&](std::size_t cx, std::size_t cy) { return color_at(t, cx, cy, ch); });
        o.at(ch, r, c) = std::clamp(v + app_noise(rng), 0.0, 1.0);
      }
      o.at(3, r, c) = height_at(t, x, y) + h_noise(rng);
    }
  return o;
}

double scoop_reward(const TerrainInstance& t, const ScoopAction& a, double z, double u) {
  const Frame f = frame_of(a);
  constexpr double drag = 0.06;
  double volume = 0.0, jam = 0.0;
  int n = 0;
  for (double along : {0.01, 0.03, 0.05})
    for (double across : {-0.02, 0.0, 0.02}) {
      const std::size_t cx = clamp_cell(f.at_x(along, across) / t.config.cell, t.nx);
      const std::size_t cy = clamp_cell(f.at_y(along, across) / t.config.cell, t.ny);
      const auto& m = t.materials[static_cast<std::size_t>(t.engaged_material(cx, cy, a.depth))];
      volume += m.response(a.depth, a.stiffness);
      jam += m.jam_penalty;
      ++n;
    }
  volume *= t.config.volume_scale / n;
  jam /= n;
  // Scooping up into a rise gathers more; across-slope and steep ground jam.
  const double rise = (height_at(t, f.at_x(drag, 0), f.at_y(drag, 0)) - height_at(t, a.x, a.y)) / drag;
  const double dir_factor = std::clamp(1.0 + 1.5 * rise, 0.3, 1.7);
  const double mx = f.at_x(drag / 2, 0), my = f.at_y(drag / 2, 0), e = t.config.cell;
  const double gx = (height_at(t, mx + e, my) - height_at(t, mx - e, my)) / (2 * e);
  const double gy = (height_at(t, mx, my + e) - height_at(t, mx, my - e)) / (2 * e);
  const double slope_deg = std::atan(std::hypot(gx, gy)) / kDeg;
  const double penalty = jam * std::max(0.0, slope_deg - 15.0) / 15.0;
  const double sigma = t.config.reward_noise_sigma;
  const double value = std::max(0.0, volume * dir_factor * std::exp(sigma * z) - penalty) + t.config.noise_floor * u;
  return std::min(value, t.config.scoop_capacity);
}

double execute_scoop(TerrainInstance& t, const ScoopAction& a, std::uint64_t noise_seed) {
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double z = n01(rng), u = u01(rng);
  const double reward = scoop_reward(t, a, z, u);

  const Frame f = frame_of(a);
  constexpr double drag = 0.06;
  for (std::size_t cy = 0; cy < t.ny; ++cy)
    for (std::size_t cx = 0; cx < t.nx; ++cx) {
      const double x = (static_cast<double>(cx) + 0.5) * t.config.cell - a.x;
      const double y = (static_cast<double>(cy) + 0.5) * t.config.cell - a.y;
      const double along = x * f.dx + y * f.dy, across = x * f.px + y * f.py;
      const std::size_t i = cell_index(t, cx, cy);
      if (along >= -0.005 && along <= drag + 0.01 && std::abs(across) <= 0.025) {
        t.height[i] = std::max(0.0, t.height[i] - 0.6 * a.depth);
        t.excavated[i] += a.depth;
      } else if (along > drag + 0.01 && along <= drag + 0.03 && std::abs(across) <= 0.03) {
        t.height[i] = std::min(t.config.max_elevation, t.height[i] + 0.2 * a.depth);
      }
    }
  return reward;
}

double compute_threshold(std::span<const double> rewards) {
  if (rewards.size() < 5) throw ConfigError("threshold needs at least 5 rewards, got " + std::to_string(rewards.size()));
  std::vector<double> v(rewards.begin(), rewards.end());
  std::nth_element(v.begin(), v.begin() + 4, v.end(), std::greater<>());
  return v[4];
}

TaskDataset collect_offline(const Task& task, std::size_t n_samples, std::uint64_t seed) {
  const ActionGrid grid;
  std::mt19937_64 rng(derive_seed(seed, {300}));
  std::uniform_real_distribution<double> ux(grid.x_min, grid.x_max), uy(grid.y_min, grid.y_max),
      ud(kMinDepth, kMaxDepth), u01(0.0, 1.0);
  std::uniform_int_distribution<int> uyaw(0, kYawCount - 1);
  std::normal_distribution<double> n01(0.0, 1.0);
  TaskDataset ds;
  ds.task_id = task.id;
  ds.records.reserve(n_samples);
  while (ds.records.size() < n_samples) {
    ScoopAction a;
    a.x = ux(rng);
    a.y = uy(rng);
    a.yaw = uyaw(rng);
    a.depth = ud(rng);
    a.stiffness = u01(rng) < 0.5 ? Stiffness::soft : Stiffness::hard;
    if (!feasible(task.terrain, a)) continue;
    const std::uint64_t noise_seed = rng();
    const double z = n01(rng), u = u01(rng);
    Record r;
    r.obs = render_patch(task.terrain, a, noise_seed);
    r.action = a;
    r.reward = scoop_reward(task.terrain, a, z, u);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

std::vector<ScoopAction> ActionGrid::enumerate() const {
  std::vector<ScoopAction> out;
  out.reserve(size());
  auto lin = [](double lo, double hi, std::size_t n, std::size_t i) {
    return n == 1 ? (lo + hi) / 2 : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  for (std::size_t ix = 0; ix < nx; ++ix)
    for (std::size_t iy = 0; iy < ny; ++iy)
      for (int yaw = 0; yaw < kYawCount; ++yaw)
        for (std::size_t id = 0; id < n_depths; ++id)
          for (int s = 0; s < 2; ++s) {
            ScoopAction a;
            a.x = lin(x_min, x_max, nx, ix);
            a.y = lin(y_min, y_max, ny, iy);
            a.yaw = yaw;
            a.depth = lin(kMinDepth, kMaxDepth, n_depths, id);
            a.stiffness = s ? Stiffness::hard : Stiffness::soft;
            out.push_back(a);
          }
  return out;
}

std::vector<std::string> check_suite(const Suite& suite) {
  std::vector<std::string> issues;
  std::set<int> novel_used;
  for (const auto& t : suite.test) {
    bool has_novel = false;
    for (int id : t.terrain.material_ids()) {
      if (suite.materials[static_cast<std::size_t>(id)].novel) {
        has_novel = true;
        novel_used.insert(id);
      }
    }
    if (!has_novel) issues.push_back(t.id + ": no novel material");
  }
  std::size_t n_novel = 0;
  for (const auto& m : suite.materials) n_novel += m.novel ? 1 : 0;
  if (suite.test.size() >= 4 && novel_used.size() != n_novel) issues.push_back("not every novel material is used");
  for (const auto& t : suite.train) {
    for (int id : t.terrain.material_ids())
      if (suite.materials[static_cast<std::size_t>(id)].novel) issues.push_back(t.id + ": novel material in training");
    if (t.composition == Composition::layers) issues.push_back(t.id + ": Layers composition in training");
  }
  auto check_terrain = [&](const Task& t) {
    const auto& tr = t.terrain;
    const double hmax = *std::max_element(tr.height.begin(), tr.height.end());
    if (hmax > tr.config.max_elevation + 1e-12) issues.push_back(t.id + ": elevation above limit");
    const auto s = slope_field_deg(tr);
    if (*std::max_element(s.begin(), s.end()) > tr.config.max_slope_deg + 1e-9) issues.push_back(t.id + ": slope above limit");
    if (t.composition == Composition::layers) {
      bool differs = false;
      for (std::size_t i = 0; i < tr.surface.size(); ++i) differs = differs || (tr.hidden[i] >= 0 && tr.hidden[i] != tr.surface[i]);
      if (!differs) issues.push_back(t.id + ": hidden layer identical to surface");
    } else if (tr.has_hidden()) {
      issues.push_back(t.id + ": hidden layer on a non-Layers terrain");
    }
  };
  for (const auto& t : suite.train) check_terrain(t);
  for (const auto& t : suite.test) check_terrain(t);
  return issues;
}

}  // namespace kcmd::sim
