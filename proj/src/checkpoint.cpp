#include "mbil/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace mbil {

using nlohmann::json;

json params_to_json(const NamedParamsConst& params) {
  json out = json::object();
  for (const auto& [name, t] : params) {
    out[name] = {{"shape", t->shape}, {"values", t->values}};
  }
  return out;
}

void params_from_json(const json& j, const NamedParams& params) {
  for (const auto& [name, t] : params) {
    if (!j.contains(name)) throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
    const json& e = j.at(name);
    auto shape = e.at("shape").get<std::vector<std::size_t>>();
    auto values = e.at("values").get<std::vector<double>>();
    if (shape != t->shape)
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                               shape_str(shape) + ", expected " + shape_str(t->shape));
    if (values.size() != t->values.size())
      throw std::runtime_error("checkpoint: parameter '" + name + "' has wrong length");
    t->values = std::move(values);
  }
}

json checkpoint_envelope(const std::string& kind, json header, const NamedParamsConst& params) {
  return json{{"format", "mbil-checkpoint"},
              {"version", kCheckpointVersion},
              {"kind", kind},
              {"header", std::move(header)},
              {"params", params_to_json(params)}};
}

json load_checkpoint(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "mbil-checkpoint")
    throw std::runtime_error("checkpoint: '" + path + "' has unknown format field");
  if (j.value("version", -1) != kCheckpointVersion)
    throw std::runtime_error("checkpoint: '" + path + "' has unsupported version " +
                             std::to_string(j.value("version", -1)));
  if (!expected_kind.empty() && j.value("kind", "") != expected_kind)
    throw std::runtime_error("checkpoint: '" + path + "' holds a '" + j.value("kind", "?") +
                             "' model, expected '" + expected_kind + "'");
  return j;
}

void save_checkpoint(const std::string& path, const json& envelope) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  out << envelope.dump(2) << "\n";
}

}  // namespace mbil
