#include "mtil/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace mtil {

namespace {
constexpr char kDatasetMagic[6] = {'M', 'T', 'I', 'L', 'D', 'S'};
constexpr uint32_t kDatasetVersion = 1;
}  // namespace

void Trajectory::validate() const {
  if (observations.empty()) throw FormatError("trajectory must have at least one step");
  if (observations.size() != actions.size())
    throw FormatError("trajectory has " + std::to_string(observations.size()) +
                      " observations but " + std::to_string(actions.size()) + " actions");
  size_t od = observations[0].size(), ad = actions[0].size();
  for (const auto& o : observations) {
    if (o.size() != od) throw FormatError("ragged observation rows");
    for (double v : o)
      if (!std::isfinite(v)) throw FormatError("non-finite observation value");
  }
  for (const auto& a : actions) {
    if (a.size() != ad) throw FormatError("ragged action rows");
    for (double v : a)
      if (!std::isfinite(v)) throw FormatError("non-finite action value");
  }
}

void Dataset::append(Trajectory traj) {
  traj.validate();
  int od = static_cast<int>(traj.observations[0].size());
  int ad = static_cast<int>(traj.actions[0].size());
  if (trajectories.empty() && obs_dim == 0 && action_dim == 0) {
    obs_dim = od;
    action_dim = ad;
  }
  if (od != obs_dim || ad != action_dim)
    throw FormatError("trajectory dims " + std::to_string(od) + "/" + std::to_string(ad) +
                      " do not match dataset dims " + std::to_string(obs_dim) + "/" +
                      std::to_string(action_dim));
  trajectories.push_back(std::move(traj));
}

void Dataset::validate() const {
  if (obs_dim < 1 || action_dim < 1) throw FormatError("dataset dims must be positive");
  for (const auto& t : trajectories) {
    t.validate();
    if (static_cast<int>(t.observations[0].size()) != obs_dim ||
        static_cast<int>(t.actions[0].size()) != action_dim)
      throw FormatError("inhomogeneous trajectory dims in dataset");
  }
}

bool Dataset::operator==(const Dataset& other) const {
  if (obs_dim != other.obs_dim || action_dim != other.action_dim ||
      trajectories.size() != other.trajectories.size())
    return false;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    const auto& a = trajectories[i];
    const auto& b = other.trajectories[i];
    if (a.task_id != b.task_id || a.seed != b.seed || a.success != b.success ||
        a.observations != b.observations || a.actions != b.actions)
      return false;
  }
  return true;
}

std::vector<std::vector<double>> chunk_targets(const Trajectory& traj, int t, int k) {
  int T = traj.length();
  if (t < 1 || t > T)
    throw FormatError("chunk_targets: step " + std::to_string(t) + " outside 1.." +
                      std::to_string(T));
  if (k < 1) throw FormatError("chunk_targets: chunk size must be >= 1");
  std::vector<std::vector<double>> target(k);
  for (int row = 0; row < k; ++row) {
    int src = std::min(t + row, T);  // 1-based; padding repeats a_T
    target[row] = traj.actions[src - 1];
  }
  return target;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_bytes(os, kDatasetMagic, 6);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<uint32_t>(ds.obs_dim));
  write_u32(os, static_cast<uint32_t>(ds.action_dim));
  write_u64(os, ds.trajectories.size());
  for (const auto& t : ds.trajectories) {
    write_u64(os, static_cast<uint64_t>(t.length()));
    write_string(os, t.task_id);
    write_u64(os, t.seed);
    uint8_t succ = t.success ? 1 : 0;
    write_bytes(os, &succ, 1);
  }
  for (const auto& t : ds.trajectories) {
    for (const auto& row : t.observations)
      for (double v : row) write_f64(os, v);
    for (const auto& row : t.actions)
      for (double v : row) write_f64(os, v);
  }
  if (!os) throw FormatError("write error on " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[6];
  read_bytes(is, magic, 6, "dataset magic");
  if (!std::equal(magic, magic + 6, kDatasetMagic))
    throw FormatError(path + " is not a dataset file (bad magic)");
  uint32_t version = read_u32(is, "dataset version");
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version));

  Dataset ds;
  ds.obs_dim = static_cast<int>(read_u32(is, "obs_dim"));
  ds.action_dim = static_cast<int>(read_u32(is, "action_dim"));
  if (ds.obs_dim < 1 || ds.action_dim < 1) throw FormatError("invalid dims in dataset header");
  uint64_t count = read_u64(is, "trajectory count");

  struct Header {
    uint64_t length;
    std::string task_id;
    uint64_t seed;
    bool success;
  };
  std::vector<Header> headers(count);
  for (auto& h : headers) {
    h.length = read_u64(is, "trajectory length");
    if (h.length < 1 || h.length > (1ull << 32)) throw FormatError("implausible trajectory length");
    h.task_id = read_string(is, "task id");
    h.seed = read_u64(is, "seed");
    uint8_t succ;
    read_bytes(is, &succ, 1, "success flag");
    h.success = succ != 0;
  }
  for (const auto& h : headers) {
    Trajectory t;
    t.task_id = h.task_id;
    t.seed = h.seed;
    t.success = h.success;
    t.observations.resize(h.length, std::vector<double>(ds.obs_dim));
    t.actions.resize(h.length, std::vector<double>(ds.action_dim));
    for (auto& row : t.observations)
      for (auto& v : row) v = read_f64(is, "observation data");
    for (auto& row : t.actions)
      for (auto& v : row) v = read_f64(is, "action data");
    ds.trajectories.push_back(std::move(t));
  }
  ds.validate();
  return ds;
}

void export_csv(const Dataset& ds, const std::string& directory) {
  std::filesystem::create_directories(directory);
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& t = ds.trajectories[i];
    std::ofstream os(directory + "/trajectory_" + std::to_string(i) + ".csv");
    if (!os) throw FormatError("cannot write CSV in " + directory);
    for (int j = 0; j < ds.obs_dim; ++j) os << "o" << j << ",";
    for (int j = 0; j < ds.action_dim; ++j) os << "a" << j << (j + 1 < ds.action_dim ? "," : "\n");
    os.precision(17);
    for (int s = 0; s < t.length(); ++s) {
      for (int j = 0; j < ds.obs_dim; ++j) os << t.observations[s][j] << ",";
      for (int j = 0; j < ds.action_dim; ++j)
        os << t.actions[s][j] << (j + 1 < ds.action_dim ? "," : "\n");
    }
  }
}

}  // namespace mtil
