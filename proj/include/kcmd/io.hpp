#pragma once

// JSON persistence for datasets, checkpoints, manifests and traces.
//
// Dataset files keep simulator ground truth in a separate "ground_truth"
// object. The default loader returns the learner view only.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kcmd/decision.hpp"
#include "kcmd/model.hpp"
#include "kcmd/terrain.hpp"
#include "kcmd/train.hpp"

namespace kcmd::io {

inline constexpr const char* kDatasetSchema = "kcmd.dataset/1";
inline constexpr const char* kCheckpointSchema = "kcmd.checkpoint/1";
inline constexpr const char* kTraceSchema = "kcmd.trace/1";

struct GroundTruth {
  std::string composition;
  std::vector<int> material_ids;
  std::vector<sim::LatentMaterial> materials;  // full table, latent parameters included
  std::uint64_t suite_seed = 0;
  std::string split;  // "train" or "test"
  std::size_t task_index = 0;
};

void save_dataset(const std::filesystem::path& path, const TaskDataset& data, const GroundTruth& truth);
// Learner view: records only; ground truth is never parsed.
TaskDataset load_dataset(const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const model::DeepGPModel& m, const std::string& manifest_digest);
model::DeepGPModel load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_digest(const std::filesystem::path& path);

std::string manifest_json(const train::Manifest& m);
void save_manifest(const std::filesystem::path& path, const train::Manifest& m);

// FNV-1a, hex.
std::string digest(const std::string& bytes);

std::string trace_json_line(const decision::EpisodeTrace& t, bool with_observations);
decision::EpisodeTrace parse_trace_line(const std::string& line);
std::vector<decision::EpisodeTrace> load_traces(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace kcmd::io
