#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace miencap {

/// Flat xyz vertex array.
struct Mesh {
  std::vector<double> vertices;

  size_t vertex_count() const {
    return vertices.size() / 3;
  }
  void validate() const;
};

/// Neutral mesh plus named delta shapes (offsets from neutral).
struct BlendshapeBank {
  struct Delta {
    std::string name;
    Mesh offsets;
  };

  Mesh neutral;
  std::vector<Delta> deltas;

  void validate() const;
};

struct ControllerSpec {
  std::string name;
  double min = 0.0;
  double max = 1.0;
  double neutral = 0.0;
};

struct CharacterRig {
  std::string id;
  std::vector<ControllerSpec> controllers;
  std::optional<BlendshapeBank> bank;

  size_t controller_count() const {
    return controllers.size();
  }
  std::vector<double> neutral_values() const;
  void validate() const;
};

struct ControllerFrame {
  double timestamp = 0.0;
  std::vector<double> values;

  bool operator==(const ControllerFrame&) const = default;
};

/// B = B0 + sum_i w_i * B_i, with B_i stored as deltas.
Mesh compose_blendshapes(const BlendshapeBank& bank, std::span<const double> weights);

ControllerFrame clamp_controllers(const CharacterRig& rig, std::span<const double> raw, double timestamp);

/// In-place variant used on the streaming path.
void clamp_in_place(const CharacterRig& rig, std::span<double> values);

/// Wavefront-style `v x y z` lines, 9 significant digits, LF endings.
void export_mesh(const Mesh& mesh, const std::filesystem::path& path);
Mesh import_mesh(const std::filesystem::path& path);

/// Builds a rig with `count` default controllers named `<prefix>_<i>`.
CharacterRig make_default_rig(const std::string& id, size_t count, const std::string& prefix = "ctrl");

CharacterRig load_rig(const std::filesystem::path& path);
void save_rig(const CharacterRig& rig, const std::filesystem::path& path, const std::string& bank_path = {});
BlendshapeBank load_bank(const std::filesystem::path& path);
void save_bank(const BlendshapeBank& bank, const std::filesystem::path& path);

} // namespace miencap
