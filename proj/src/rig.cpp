#include "miencap/rig.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "miencap/error.hpp"

namespace miencap {

namespace {

constexpr int kRigVersion = 1;
constexpr int kBankVersion = 1;

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path.string());
  out << text;
  MIENCAP_THROW_IF(!out, IoError, "write failed for '{}'", path.string());
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& rel) {
  std::filesystem::path p(rel);
  return p.is_absolute() ? p : base.parent_path() / p;
}

} // namespace

void Mesh::validate() const {
  MIENCAP_THROW_IF(vertices.size() % 3 != 0, ValidationError, "mesh coordinate count {} not divisible by 3", vertices.size());
  for (double v : vertices) {
    MIENCAP_THROW_IF(!std::isfinite(v), ValidationError, "mesh contains a non-finite coordinate");
  }
}

void BlendshapeBank::validate() const {
  neutral.validate();
  std::unordered_set<std::string> names;
  for (const auto& d : deltas) {
    d.offsets.validate();
    MIENCAP_THROW_IF(
        d.offsets.vertices.size() != neutral.vertices.size(),
        ValidationError,
        "delta '{}' has {} vertices, neutral has {}",
        d.name,
        d.offsets.vertex_count(),
        neutral.vertex_count());
    MIENCAP_THROW_IF(!names.insert(d.name).second, ValidationError, "duplicate delta name '{}'", d.name);
  }
}

std::vector<double> CharacterRig::neutral_values() const {
  std::vector<double> out;
  out.reserve(controllers.size());
  for (const auto& c : controllers) {
    out.push_back(c.neutral);
  }
  return out;
}

void CharacterRig::validate() const {
  MIENCAP_THROW_IF(controllers.empty(), ValidationError, "rig '{}' has no controllers", id);
  std::unordered_set<std::string> names;
  for (const auto& c : controllers) {
    MIENCAP_THROW_IF(
        !(c.min <= c.neutral && c.neutral <= c.max),
        ValidationError,
        "controller '{}' violates min <= neutral <= max ({}, {}, {})",
        c.name,
        c.min,
        c.neutral,
        c.max);
    MIENCAP_THROW_IF(!names.insert(c.name).second, ValidationError, "duplicate controller '{}' in rig '{}'", c.name, id);
  }
  if (bank) {
    bank->validate();
  }
}

Mesh compose_blendshapes(const BlendshapeBank& bank, std::span<const double> weights) {
  MIENCAP_THROW_IF(
      weights.size() != bank.deltas.size(), DimensionError, "got {} weights for {} blendshapes", weights.size(), bank.deltas.size());
  for (double w : weights) {
    MIENCAP_THROW_IF(!std::isfinite(w), ValidationError, "non-finite blendshape weight");
  }
  Mesh out = bank.neutral;
  for (size_t i = 0; i < weights.size(); ++i) {
    const double w = weights[i];
    if (w == 0.0) {
      continue;
    }
    const auto& d = bank.deltas[i].offsets.vertices;
    for (size_t k = 0; k < out.vertices.size(); ++k) {
      out.vertices[k] += w * d[k];
    }
  }
  return out;
}

void clamp_in_place(const CharacterRig& rig, std::span<double> values) {
  MIENCAP_THROW_IF(
      values.size() != rig.controllers.size(),
      DimensionError,
      "rig '{}' expects {} controllers, got {}",
      rig.id,
      rig.controllers.size(),
      values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = std::clamp(values[i], rig.controllers[i].min, rig.controllers[i].max);
  }
}

ControllerFrame clamp_controllers(const CharacterRig& rig, std::span<const double> raw, double timestamp) {
  ControllerFrame frame{timestamp, std::vector<double>(raw.begin(), raw.end())};
  clamp_in_place(rig, frame.values);
  return frame;
}

void export_mesh(const Mesh& mesh, const std::filesystem::path& path) {
  mesh.validate();
  std::string text;
  for (size_t v = 0; v < mesh.vertex_count(); ++v) {
    text += fmt::format(
        "v {:.9g} {:.9g} {:.9g}\n", mesh.vertices[3 * v], mesh.vertices[3 * v + 1], mesh.vertices[3 * v + 2]);
  }
  write_text(path, text);
}

Mesh import_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  MIENCAP_THROW_IF(!in, IoError, "cannot open '{}'", path.string());
  Mesh mesh;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("v ", 0) != 0) {
      continue;
    }
    std::istringstream ss(line.substr(2));
    double x, y, z;
    MIENCAP_THROW_IF(!(ss >> x >> y >> z), FormatError, "{}:{}: malformed vertex line", path.string(), lineno);
    mesh.vertices.insert(mesh.vertices.end(), {x, y, z});
  }
  return mesh;
}

CharacterRig make_default_rig(const std::string& id, size_t count, const std::string& prefix) {
  CharacterRig rig;
  rig.id = id;
  for (size_t i = 0; i < count; ++i) {
    rig.controllers.push_back({fmt::format("{}_{:03d}", prefix, i), 0.0, 1.0, 0.0});
  }
  return rig;
}

CharacterRig load_rig(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  CharacterRig rig;
  try {
    MIENCAP_THROW_IF(
        doc.value("version", 0) != kRigVersion, FormatError, "'{}': unsupported rig version", path.string());
    rig.id = doc.at("id").get<std::string>();
    for (const auto& c : doc.at("controllers")) {
      ControllerSpec spec;
      spec.name = c.at("name").get<std::string>();
      spec.min = c.value("min", 0.0);
      spec.max = c.value("max", 1.0);
      spec.neutral = c.value("neutral", std::clamp(0.0, spec.min, spec.max));
      rig.controllers.push_back(std::move(spec));
    }
    if (doc.contains("bank_path")) {
      rig.bank = load_bank(resolve(path, doc.at("bank_path").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  rig.validate();
  return rig;
}

void save_rig(const CharacterRig& rig, const std::filesystem::path& path, const std::string& bank_path) {
  nlohmann::ordered_json doc;
  doc["version"] = kRigVersion;
  doc["id"] = rig.id;
  auto& ctrls = doc["controllers"] = nlohmann::ordered_json::array();
  for (const auto& c : rig.controllers) {
    ctrls.push_back({{"name", c.name}, {"min", c.min}, {"max", c.max}, {"neutral", c.neutral}});
  }
  if (!bank_path.empty()) {
    doc["bank_path"] = bank_path;
  }
  write_text(path, doc.dump(1) + "\n");
}

BlendshapeBank load_bank(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  BlendshapeBank bank;
  try {
    MIENCAP_THROW_IF(
        doc.value("version", 0) != kBankVersion, FormatError, "'{}': unsupported bank version", path.string());
    bank.neutral.vertices = doc.at("neutral").get<std::vector<double>>();
    for (const auto& d : doc.at("deltas")) {
      bank.deltas.push_back({d.at("name").get<std::string>(), Mesh{d.at("offsets").get<std::vector<double>>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  bank.validate();
  return bank;
}

void save_bank(const BlendshapeBank& bank, const std::filesystem::path& path) {
  bank.validate();
  nlohmann::ordered_json doc;
  doc["version"] = kBankVersion;
  doc["neutral"] = bank.neutral.vertices;
  auto& deltas = doc["deltas"] = nlohmann::ordered_json::array();
  for (const auto& d : bank.deltas) {
    deltas.push_back({{"name", d.name}, {"offsets", d.offsets.vertices}});
  }
  write_text(path, doc.dump() + "\n");
}

} // namespace miencap
