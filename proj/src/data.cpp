#include "mbil/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mbil {

using nlohmann::json;

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.steps.size();
  return n;
}

namespace {

[[noreturn]] void file_error(const std::string& path, std::size_t line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

json action_to_json(const Action& a) {
  if (std::holds_alternative<int>(a)) return std::get<int>(a);
  return std::get<std::vector<double>>(a);
}

Action action_from_json(const json& j, const ActionSpace& space, const std::string& path,
                        std::size_t line) {
  if (space.kind == ActionSpace::Kind::discrete) {
    if (!j.is_number_integer()) file_error(path, line, "field 'a' must be an integer index");
    return j.get<int>();
  }
  if (!j.is_array()) file_error(path, line, "field 'a' must be a real vector");
  return j.get<std::vector<double>>();
}

const char* kStepKeys[] = {"traj", "t", "s", "a", "done"};

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot write '" + path + "'");
  json header{{"format", "mbil-trajectories"},
              {"version", kTrajectoryFormatVersion},
              {"env", ds.env_name},
              {"state_dim", ds.state_dim},
              {"action", ds.action_space.to_json()},
              {"env_params", ds.env_params},
              {"n_trajectories", ds.trajectories.size()}};
  out << header.dump() << "\n";
  for (std::size_t ti = 0; ti < ds.trajectories.size(); ++ti) {
    const auto& traj = ds.trajectories[ti];
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      json rec{{"traj", ti},
               {"t", t},
               {"s", traj.steps[t].state},
               {"a", action_to_json(traj.steps[t].action)},
               {"done", t + 1 == traj.steps.size()}};
      out << rec.dump() << "\n";
    }
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open '" + path + "'");
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw std::runtime_error("load_dataset: '" + path + "' is empty");
  line_no = 1;
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    file_error(path, 1, std::string("header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "mbil-trajectories")
    file_error(path, 1, "unknown format field");
  if (header.value("version", -1) != kTrajectoryFormatVersion)
    file_error(path, 1, "unsupported version " + std::to_string(header.value("version", -1)));

  Dataset ds;
  ds.env_name = header.at("env").get<std::string>();
  ds.state_dim = header.at("state_dim").get<std::size_t>();
  ds.action_space = ActionSpace::from_json(header.at("action"));
  ds.env_params = header.value("env_params", json::object());
  std::size_t declared = header.at("n_trajectories").get<std::size_t>();
  ds.trajectories.resize(declared);

  long long prev_traj = -1;
  long long prev_t = -1;
  bool prev_done = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      file_error(path, line_no, std::string("record is not valid JSON: ") + e.what());
    }
    for (auto it = rec.begin(); it != rec.end(); ++it) {
      bool known = false;
      for (const char* k : kStepKeys) known = known || it.key() == k;
      if (!known)
        file_error(path, line_no, "unexpected field '" + it.key() + "' (rewards are not part of the schema)");
    }
    for (const char* k : kStepKeys)
      if (!rec.contains(k)) file_error(path, line_no, std::string("missing field '") + k + "'");

    long long traj = rec.at("traj").get<long long>();
    long long t = rec.at("t").get<long long>();
    if (traj < 0 || static_cast<std::size_t>(traj) >= declared)
      file_error(path, line_no, "traj " + std::to_string(traj) + " outside header count");
    if (traj != prev_traj) {
      if (!prev_done)
        file_error(path, line_no, "trajectory " + std::to_string(prev_traj) + " ended without done=true");
      if (traj != prev_traj + 1)
        file_error(path, line_no, "trajectory ids must be contiguous; got " + std::to_string(traj) +
                                      " after " + std::to_string(prev_traj));
      prev_t = -1;
    } else if (prev_done) {
      file_error(path, line_no, "traj " + std::to_string(traj) + " continues after done=true");
    }
    if (t != prev_t + 1)
      file_error(path, line_no, "traj " + std::to_string(traj) + ": t must increase by 1, got " +
                                    std::to_string(t) + " after " + std::to_string(prev_t));
    auto s = rec.at("s").get<std::vector<double>>();
    if (s.size() != ds.state_dim)
      file_error(path, line_no, "state has " + std::to_string(s.size()) + " dims, header says " +
                                    std::to_string(ds.state_dim));
    for (double v : s)
      if (!std::isfinite(v)) file_error(path, line_no, "non-finite state entry");
    Action a = action_from_json(rec.at("a"), ds.action_space, path, line_no);
    try {
      ds.action_space.validate(a);
    } catch (const std::exception& e) {
      file_error(path, line_no, e.what());
    }
    bool done = rec.at("done").get<bool>();
    ds.trajectories[traj].steps.push_back({std::move(s), std::move(a)});
    prev_traj = traj;
    prev_t = t;
    prev_done = done;
  }
  if (!prev_done)
    file_error(path, line_no, "last trajectory ended without done=true");
  if (prev_traj + 1 != static_cast<long long>(declared))
    throw std::runtime_error(path + ": header declares " + std::to_string(declared) +
                             " trajectories but " + std::to_string(prev_traj + 1) + " found");
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i)
    if (ds.trajectories[i].steps.empty())
      throw std::runtime_error(path + ": trajectory " + std::to_string(i) + " is empty");
  return ds;
}

Dataset subsample(const Dataset& ds, std::size_t n_trajectories, std::uint64_t seed) {
  if (n_trajectories > ds.trajectories.size())
    throw std::invalid_argument("subsample: requested " + std::to_string(n_trajectories) +
                                " of " + std::to_string(ds.trajectories.size()) + " trajectories");
  // Partial Fisher-Yates over an index array.
  std::vector<std::size_t> idx(ds.trajectories.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed, 23);
  Dataset out = ds;
  out.trajectories.clear();
  for (std::size_t i = 0; i < n_trajectories; ++i) {
    std::size_t j = i + rng.uniform_index(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.trajectories.push_back(ds.trajectories[idx[i]]);
  }
  return out;
}

IndexSampler::IndexSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream)
    : n_(n), rng_(seed, stream) {
  if (n == 0) throw std::invalid_argument("IndexSampler: empty buffer");
}

std::vector<std::size_t> IndexSampler::next(std::size_t batch_size) {
  if (batch_size < 1) throw std::invalid_argument("IndexSampler: batch_size must be >= 1");
  std::vector<std::size_t> out(batch_size);
  for (auto& v : out) v = rng_.uniform_index(n_);
  return out;
}

std::vector<std::vector<std::size_t>> sweep_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("sweep_batches: batch_size must be >= 1");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed, 29);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::size_t j = i + rng.uniform_index(n - i);
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    std::size_t hi = std::min(n, lo + batch_size);
    out.emplace_back(idx.begin() + lo, idx.begin() + hi);
  }
  return out;
}

}  // namespace mbil
