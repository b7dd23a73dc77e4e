#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtil/io.hpp"
#include "mtil/numerics.hpp"

namespace mtil {

/// One demonstration: T (observation, action) pairs plus provenance.
struct Trajectory {
  std::vector<std::vector<double>> observations;  // T x obs_dim
  std::vector<std::vector<double>> actions;       // T x action_dim
  std::string task_id;
  uint64_t seed = 0;
  bool success = false;

  int length() const { return static_cast<int>(observations.size()); }
  void validate() const;
};

struct Dataset {
  int obs_dim = 0;
  int action_dim = 0;
  std::vector<Trajectory> trajectories;

  void append(Trajectory traj);  // enforces homogeneous dims
  void validate() const;
  bool operator==(const Dataset& other) const;
};

/// K-row chunk target at step t (1-based, t = 1..T):
/// row k = a_{min(t + k, T)}, i.e. the tail is padded by repeating the final
/// demonstrated action.
std::vector<std::vector<double>> chunk_targets(const Trajectory& traj, int t, int k);

/// Single-file container: header (magic "MTILDS", version, dims, trajectory
/// count, per-trajectory lengths and meta), then contiguous 64-bit
/// little-endian arrays. Layout details in docs/formats.md.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

/// Plain-text companion export: one CSV per trajectory, columns
/// o0..o{obs_dim-1}, a0..a{action_dim-1}.
void export_csv(const Dataset& ds, const std::string& directory);

}  // namespace mtil
