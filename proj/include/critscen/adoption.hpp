#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "feeder.hpp"
#include "rng.hpp"

namespace critscen {

/// Agent-based Bass-style diffusion. One-step adoption probability for a
/// non-adopter is p + (q / A) * (current adopters).
struct DiffusionParams {
  double p = 0.01;    // innovation
  double q = 0.164;   // imitation
  int horizon_steps = 10;
  double initial_rate = 0.1;

  void validate() const {
    if (!(p >= 0.0)) throw ValidationError("diffusion.p must be >= 0");
    if (!(q >= 0.0)) throw ValidationError("diffusion.q must be >= 0");
    if (!(p + q <= 1.0)) throw ValidationError("diffusion: p + q must be <= 1");
    if (horizon_steps < 1) throw ValidationError("diffusion.horizon_steps must be >= 1");
    if (!(initial_rate >= 0.0 && initial_rate <= 1.0))
      throw ValidationError("diffusion.initial_rate must be in [0, 1]");
  }
};

using Bits = std::vector<std::uint8_t>;

struct Scenario {
  Bits bits;  // x_j = 1 iff adopter j has PV at the horizon
  std::int64_t id = 0;
};

inline std::string to_bitstring(const Bits& bits) {
  std::string s(bits.size(), '0');
  for (std::size_t j = 0; j < bits.size(); ++j)
    if (bits[j]) s[j] = '1';
  return s;
}

inline Bits from_bitstring(const std::string& s) {
  Bits b(s.size());
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (s[j] != '0' && s[j] != '1') throw ParseError("invalid scenario bitstring '" + s + "'");
    b[j] = s[j] == '1';
  }
  return b;
}

/// Clamped to [0, 1]; the clamp only binds for p + q > 1, which validate() rejects.
inline double adoption_probability(const DiffusionParams& params, int adopted_count, int total_agents) {
  if (total_agents < 1) throw ValidationError("total_agents must be >= 1");
  if (adopted_count < 0 || adopted_count > total_agents)
    throw ValidationError("adopted_count must be in [0, total_agents]");
  const double prob = params.p + params.q / total_agents * adopted_count;
  return std::clamp(prob, 0.0, 1.0);
}

/// Runs one diffusion trajectory with synchronous updates: all transition
/// probabilities in a step use the adopter count at the start of that step.
/// Adoption is absorbing. When `trajectory` is non-null it receives the state
/// after initialization and after every step.
inline Bits simulate_trajectory(std::size_t num_agents, const DiffusionParams& params, Rng& rng,
                                std::vector<Bits>* trajectory = nullptr) {
  const int A = static_cast<int>(num_agents);
  Bits state(num_agents, 0);
  int adopted = 0;
  for (auto& a : state) {
    a = uniform01(rng) < params.initial_rate;
    adopted += a;
  }
  if (trajectory) trajectory->push_back(state);
  for (int t = 0; t < params.horizon_steps; ++t) {
    const double prob = adoption_probability(params, adopted, A);
    int newly = 0;
    for (auto& a : state) {
      // One draw per agent per step keeps streams aligned across parameter values.
      const double u = uniform01(rng);
      if (!a && u < prob) {
        a = 1;
        ++newly;
      }
    }
    adopted += newly;
    if (trajectory) trajectory->push_back(state);
  }
  return state;
}

inline Scenario simulate_scenario(const Feeder& feeder, const DiffusionParams& params,
                                  std::uint64_t rng_seed) {
  if (feeder.num_adopters() == 0) throw ValidationError("feeder has no adopters");
  Rng rng = make_rng(rng_seed, "diffusion");
  return Scenario{simulate_trajectory(feeder.num_adopters(), params, rng), 0};
}

/// `count` independent scenarios; scenario i uses sub-seed derive_seed(seed, "batch", i).
/// Duplicates are kept. Ids are 0..count-1.
inline std::vector<Scenario> simulate_batch(const Feeder& feeder, const DiffusionParams& params,
                                            int count, std::uint64_t seed) {
  if (count < 1) throw ValidationError("count must be >= 1");
  std::vector<Scenario> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Scenario s = simulate_scenario(feeder, params, derive_seed(seed, "batch", static_cast<std::uint64_t>(i)));
    s.id = i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace critscen
