#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/rng.hpp"

namespace fedabc {

struct AbcProgress {
  std::size_t trials = 0;
  std::size_t accepted = 0;
};

/// Inputs of rejection ABC. `discrepancy` receives (simulated, observed).
template <class Theta, class Data, class Stat = Data>
struct AbcProblem {
  std::function<Theta(Rng&)> prior;
  std::function<Data(const Theta&, Rng&)> simulator;
  std::function<Stat(const Data&)> summary;
  std::function<double(const Stat&, const Stat&)> discrepancy;
  Stat observed{};
  double epsilon = 1.0;
  std::size_t target_accepted = 1;
  std::size_t max_trials = 1'000'000;
  std::size_t progress_every = 10'000;
  std::function<void(const AbcProgress&)> on_progress;

  void validate() const {
    if (!prior || !simulator || !summary || !discrepancy) throw ConfigError("ABC problem is missing a callable");
    if (!(epsilon > 0.0)) throw InvalidHyperparameter("ABC threshold must be positive");
    if (target_accepted < 1) throw InvalidHyperparameter("ABC needs a target of at least one acceptance");
    if (max_trials < target_accepted) throw InvalidHyperparameter("ABC max trials below the target count");
  }
};

template <class Theta>
struct AbcResult {
  std::vector<Theta> accepted;
  std::vector<std::size_t> accepted_trials;
  std::vector<double> accepted_discrepancy;
  std::vector<double> trace;  // discrepancy of every trial, in trial order
  std::size_t trials = 0;
  bool complete = false;  // false when max trials ran out first

  double acceptance_rate() const {
    return trials == 0 ? 0.0 : static_cast<double>(accepted.size()) / static_cast<double>(trials);
  }
};

/// Stream for trial `t`; the prior draw and the simulation both consume it, so
/// a trial can be replayed in isolation.
inline RngHandle trial_stream(RngHandle base, std::size_t t) { return base.child(static_cast<std::uint64_t>(t)); }

template <class Theta, class Data, class Stat>
double replay_trial(const AbcProblem<Theta, Data, Stat>& problem, RngHandle base, std::size_t t,
                    Theta* theta_out = nullptr) {
  Rng rng(trial_stream(base, t));
  Theta theta = problem.prior(rng);
  const Data sim = problem.simulator(theta, rng);
  const double dist = problem.discrepancy(problem.summary(sim), problem.observed);
  if (theta_out) *theta_out = std::move(theta);
  return dist;
}

/// Simulate, summarize, compare; keep theta iff discrepancy < epsilon (strict).
/// Stops at the target count or when max trials are exhausted, in which case
/// the partial result is returned with complete == false.
template <class Theta, class Data, class Stat>
AbcResult<Theta> abc_rejection(const AbcProblem<Theta, Data, Stat>& problem, RngHandle base) {
  problem.validate();
  AbcResult<Theta> out;
  while (out.accepted.size() < problem.target_accepted && out.trials < problem.max_trials) {
    const std::size_t t = out.trials;
    Theta theta;
    const double dist = replay_trial(problem, base, t, &theta);
    if (std::isnan(dist)) throw NumericError("discrepancy evaluated to NaN");
    out.trace.push_back(dist);
    ++out.trials;
    if (dist < problem.epsilon) {
      out.accepted.push_back(std::move(theta));
      out.accepted_trials.push_back(t);
      out.accepted_discrepancy.push_back(dist);
    }
    if (problem.on_progress && problem.progress_every > 0 && out.trials % problem.progress_every == 0) {
      problem.on_progress({out.trials, out.accepted.size()});
    }
  }
  out.complete = out.accepted.size() >= problem.target_accepted;
  return out;
}

template <class Theta, class ThetaToJson>
nlohmann::json abc_result_to_json(const AbcResult<Theta>& r, ThetaToJson&& theta_json) {
  nlohmann::json j;
  j["accepted"] = nlohmann::json::array();
  for (const auto& t : r.accepted) j["accepted"].push_back(theta_json(t));
  j["accepted_trials"] = r.accepted_trials;
  j["accepted_discrepancy"] = r.accepted_discrepancy;
  j["trials"] = r.trials;
  j["acceptance_rate"] = r.acceptance_rate();
  j["complete"] = r.complete;
  j["discrepancy_trace"] = r.trace;
  return j;
}

}  // namespace fedabc
