#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbil/rng.hpp"
#include "mbil/tensor.hpp"
#include "mbil/types.hpp"

namespace mbil {

inline constexpr int kTrajectoryFormatVersion = 1;

// One (s, a) step.  Rewards are deliberately not representable: the schema
// has no field for them.
struct StepRecord {
  std::vector<double> state;
  Action action;
};

struct Trajectory {
  std::vector<StepRecord> steps;
};

// Demonstration dataset plus the environment descriptor it was generated
// from; the descriptor travels in the file header for dimension checking.
struct Dataset {
  std::string env_name;
  std::size_t state_dim = 0;
  ActionSpace action_space;
  nlohmann::json env_params;  // opaque env settings for provenance
  std::vector<Trajectory> trajectories;

  std::size_t total_steps() const;
};

// Line-delimited JSON: header record on line 1, one record per step after.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Uniform without replacement, seeded.
Dataset subsample(const Dataset& ds, std::size_t n_trajectories, std::uint64_t seed);

// Endless uniform-with-replacement index batches, reproducible per seed.
class IndexSampler {
 public:
  IndexSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream = 0);
  std::vector<std::size_t> next(std::size_t batch_size);

 private:
  std::size_t n_;
  Rng rng_;
};

// Shuffled full sweep in fixed-size chunks; the last chunk may be smaller.
std::vector<std::vector<std::size_t>> sweep_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed);

// Training batch: transition tuples plus behavior-cloning pairs, already
// encoded as feature tensors by the trainer.
struct Batch {
  Tensor s;            // [B x feat]
  ActionBatch a;
  Tensor s_next;       // [B x feat]
  ActionBatch a_next;
  Tensor bc_s;         // [B x feat]
  ActionBatch bc_a;
  std::size_t size = 0;
};

}  // namespace mbil
