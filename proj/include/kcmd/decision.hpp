#pragma once

// Action selection over a discrete candidate set with the model's
// posterior, and the episode loop that drives it.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kcmd/model.hpp"
#include "kcmd/scoop.hpp"
#include "kcmd/terrain.hpp"

namespace kcmd::decision {

struct Policy {
  enum class Kind { ucb, greedy };
  Kind kind = Kind::ucb;
  double gamma = 2.0;

  static Policy ucb(double gamma) { return {Kind::ucb, gamma}; }
  static Policy greedy() { return {Kind::greedy, 0.0}; }
  std::string name() const;
  void validate() const;
};

Policy policy_from_string(const std::string& s);  // "greedy", "ucb" or "ucb:<gamma>"

double ucb_score(const gp::GPPosterior& post, double gamma);
double ucb_score(const model::DeepGPModel& m, const Observation& obs, const ScoopAction& act,
                 std::span<const Record> support, double gamma);

// One selectable action with the patch observed for it.
struct Candidate {
  Observation obs;
  ScoopAction action;
};

// Scores for every candidate given the episode history so far.
using Scorer = std::function<std::vector<double>(std::span<const Candidate>, std::span<const Record>)>;

Scorer model_scorer(const model::DeepGPModel& m, Policy policy);

// Index of the best non-excluded score; ties go to the lowest index.
std::size_t argmax_available(std::span<const double> scores, const std::vector<bool>& excluded);

ScoopAction select_action(const model::DeepGPModel& m, std::span<const Candidate> candidates,
                          std::span<const Record> support, Policy policy, const std::vector<bool>& excluded);

class Environment {
 public:
  virtual ~Environment() = default;
  // Candidates as observed now. Indices are stable within an episode.
  virtual const std::vector<Candidate>& observe() = 0;
  // Candidates that may not be chosen (used replay records, infeasible poses).
  virtual const std::vector<bool>& excluded() const = 0;
  virtual double execute(std::size_t index) = 0;
  virtual std::string task_id() const = 0;
};

// Selects among a task's recorded scoops without replacement; the reward is
// the recorded one.
class ReplayEnvironment : public Environment {
 public:
  explicit ReplayEnvironment(const TaskDataset& data);
  const std::vector<Candidate>& observe() override { return candidates_; }
  const std::vector<bool>& excluded() const override { return used_; }
  double execute(std::size_t index) override;
  std::string task_id() const override { return task_id_; }

 private:
  std::string task_id_;
  std::vector<Candidate> candidates_;
  std::vector<double> rewards_;
  std::vector<bool> used_;
};

// Simulated terrain: every grid action is re-rendered after each scoop and
// scoops reshape the terrain. Infeasible poses are masked.
class LiveEnvironment : public Environment {
 public:
  LiveEnvironment(const sim::Task& task, const sim::ActionGrid& grid, std::uint64_t seed);
  const std::vector<Candidate>& observe() override;
  const std::vector<bool>& excluded() const override { return infeasible_; }
  double execute(std::size_t index) override;
  std::string task_id() const override { return task_id_; }
  const sim::TerrainInstance& terrain() const { return terrain_; }

 private:
  std::string task_id_;
  sim::TerrainInstance terrain_;
  std::vector<ScoopAction> actions_;
  std::vector<Candidate> candidates_;
  std::vector<bool> infeasible_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  bool stale_ = true;
};

struct Step {
  std::size_t index = 0;  // candidate index chosen
  Record record;
  double score = 0.0;
};

struct EpisodeTrace {
  std::string task_id;
  std::string method;
  std::string mode;  // "replay" or "live"
  std::uint64_t seed = 0;
  int repetition = 0;
  double threshold = 0.0;
  std::size_t max_attempts = 0;
  std::vector<Step> steps;
  bool success = false;
  std::string error;  // set when the environment faulted; steps are partial

  std::size_t attempts() const { return steps.size(); }
  // Attempts with failures counted at the cap.
  std::size_t scored_attempts() const { return success ? steps.size() : max_attempts; }
};

// Environment faults end the episode early with `error` set.
EpisodeTrace run_episode(const Scorer& scorer, Environment& env, double threshold, std::size_t max_attempts);

}  // namespace kcmd::decision
