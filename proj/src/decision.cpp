#include "kcmd/decision.hpp"

#include <cmath>
#include <sstream>

#include "kcmd/error.hpp"
#include "kcmd/rng.hpp"

namespace kcmd::decision {

std::string Policy::name() const {
  if (kind == Kind::greedy) return "greedy";
  std::ostringstream os;
  os << "ucb:" << gamma;
  return os.str();
}

void Policy::validate() const {
  if (kind == Kind::ucb && !(gamma >= 0.0)) throw ConfigError("policy: gamma must be nonnegative");
}

Policy policy_from_string(const std::string& s) {
  if (s == "greedy") return Policy::greedy();
  if (s == "ucb") return Policy::ucb(2.0);
  if (s.rfind("ucb:", 0) == 0) {
    try {
      std::size_t pos = 0;
      const double g = std::stod(s.substr(4), &pos);
      if (pos + 4 != s.size()) throw std::invalid_argument(s);
      Policy p = Policy::ucb(g);
      p.validate();
      return p;
    } catch (const std::logic_error&) {
      throw ConfigError("policy: bad gamma in '" + s + "'");
    }
  }
  throw ConfigError("policy: expected greedy, ucb or ucb:<gamma>, got '" + s + "'");
}

double ucb_score(const gp::GPPosterior& post, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("ucb: gamma must be nonnegative");
  return post.mean + gamma * std::sqrt(std::max(post.variance, 0.0));
}

double ucb_score(const model::DeepGPModel& m, const Observation& obs, const ScoopAction& act,
                 std::span<const Record> support, double gamma) {
  return ucb_score(model::predict(m, obs, act, support), gamma);
}

Scorer model_scorer(const model::DeepGPModel& m, Policy policy) {
  policy.validate();
  return [&m, policy](std::span<const Candidate> cands, std::span<const Record> support) {
    std::vector<model::Query> q;
    q.reserve(cands.size());
    for (const auto& c : cands) q.push_back({&c.obs, &c.action});
    // Greedy ranks by the posterior mean, i.e. UCB with gamma = 0.
    const double gamma = policy.kind == Policy::Kind::greedy ? 0.0 : policy.gamma;
    const auto post = model::predict_batch(m, q, support);
    std::vector<double> scores(cands.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = ucb_score(post[i], gamma);
    return scores;
  };
}

std::size_t argmax_available(std::span<const double> scores, const std::vector<bool>& excluded) {
  if (!excluded.empty() && excluded.size() != scores.size())
    throw DimensionError("exclusion mask size does not match the candidate count");
  std::size_t best = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!excluded.empty() && excluded[i]) continue;
    if (std::isnan(scores[i])) throw DomainError("NaN score for candidate " + std::to_string(i));
    if (best == scores.size() || scores[i] > scores[best]) best = i;
  }
  if (best == scores.size()) throw ConfigError("no selectable candidate: the set is empty or fully excluded");
  return best;
}

ScoopAction select_action(const model::DeepGPModel& m, std::span<const Candidate> candidates,
                          std::span<const Record> support, Policy policy, const std::vector<bool>& excluded) {
  const auto scores = model_scorer(m, policy)(candidates, support);
  return candidates[argmax_available(scores, excluded)].action;
}

ReplayEnvironment::ReplayEnvironment(const TaskDataset& data) : task_id_(data.task_id) {
  if (data.records.empty()) throw EnvironmentError("replay environment: task " + data.task_id + " has no records");
  for (const auto& r : data.records) {
    candidates_.push_back({r.obs, r.action});
    rewards_.push_back(r.reward);
  }
  used_.assign(candidates_.size(), false);
}

double ReplayEnvironment::execute(std::size_t index) {
  if (index >= candidates_.size()) throw EnvironmentError("replay environment: index out of range");
  if (used_[index]) throw EnvironmentError("replay environment: record " + std::to_string(index) + " already used");
  used_[index] = true;
  return rewards_[index];
}

LiveEnvironment::LiveEnvironment(const sim::Task& task, const sim::ActionGrid& grid, std::uint64_t seed)
    : task_id_(task.id), terrain_(task.terrain), actions_(grid.enumerate()), seed_(seed) {
  infeasible_.resize(actions_.size());
  for (std::size_t i = 0; i < actions_.size(); ++i) infeasible_[i] = !sim::feasible(terrain_, actions_[i]);
  candidates_.resize(actions_.size());
}

const std::vector<Candidate>& LiveEnvironment::observe() {
  if (stale_) {
    for (std::size_t i = 0; i < actions_.size(); ++i) {
      candidates_[i].action = actions_[i];
      if (infeasible_[i]) {
        // Never chosen; keep a valid blank patch so batch scoring stays simple.
        if (candidates_[i].obs.data.empty()) candidates_[i].obs = Observation::zeros(4, 16, 16);
        continue;
      }
      candidates_[i].obs = sim::render_patch(terrain_, actions_[i], derive_seed(seed_, {1, step_, i}));
    }
    stale_ = false;
  }
  return candidates_;
}

double LiveEnvironment::execute(std::size_t index) {
  if (index >= actions_.size()) throw EnvironmentError("live environment: index out of range");
  if (infeasible_[index]) throw EnvironmentError("live environment: action " + std::to_string(index) + " is infeasible");
  const double r = sim::execute_scoop(terrain_, actions_[index], derive_seed(seed_, {2, step_}));
  ++step_;
  stale_ = true;
  return r;
}

EpisodeTrace run_episode(const Scorer& scorer, Environment& env, double threshold, std::size_t max_attempts) {
  if (std::isnan(threshold)) throw ConfigError("episode: threshold must not be NaN");
  if (max_attempts == 0) throw ConfigError("episode: max_attempts must be positive");
  EpisodeTrace trace;
  trace.task_id = env.task_id();
  trace.threshold = threshold;
  trace.max_attempts = max_attempts;
  std::vector<Record> history;
  try {
    while (trace.steps.size() < max_attempts) {
      const auto& cands = env.observe();
      const auto scores = scorer(cands, history);
      if (scores.size() != cands.size()) throw DimensionError("scorer returned the wrong number of scores");
      const std::size_t i = argmax_available(scores, env.excluded());
      Step s;
      s.index = i;
      s.score = scores[i];
      s.record.obs = cands[i].obs;
      s.record.action = cands[i].action;
      s.record.reward = env.execute(i);
      history.push_back(s.record);
      trace.steps.push_back(std::move(s));
      if (history.back().reward >= threshold) {
        trace.success = true;
        break;
      }
    }
  } catch (const EnvironmentError& e) {
    trace.error = e.what();
  }
  return trace;
}

}  // namespace kcmd::decision
