#pragma once

#include "miencap/manifest.hpp"
#include "miencap/retarget.hpp"

namespace testing {

struct PipelineFiles {
  std::filesystem::path manifest;
  miencap::PipelineManifest doc;
};

// Small random pipeline: `channels` inputs, a primary rig with `controllers`
// controllers, and `secondaries` secondary characters.
inline miencap::RetargetPipeline small_pipeline(size_t channels, size_t controllers, size_t secondaries, uint64_t seed) {
  std::vector<std::string> names;
  for (size_t i = 0; i < channels; ++i) names.push_back("ch" + std::to_string(i));
  auto rig = miencap::make_default_rig("primary", controllers);
  auto adaption = miencap::make_mlp(channels + 3 * controllers, std::vector<size_t>{16}, controllers, seed);
  std::vector<miencap::SecondaryCharacter> secs;
  for (size_t k = 0; k < secondaries; ++k) {
    secs.push_back({miencap::make_default_rig("secondary_" + std::to_string(k), controllers - 1),
                    miencap::make_mlp(controllers, std::vector<size_t>{8}, controllers - 1, seed + 1 + k)});
  }
  return miencap::RetargetPipeline(names, rig, adaption, secs, miencap::zero_profile(channels));
}

// Writes the same kind of pipeline to disk and returns its manifest.
inline PipelineFiles write_pipeline(const std::filesystem::path& dir, size_t controllers, size_t secondaries, uint64_t seed) {
  using namespace miencap;
  PipelineFiles f;
  f.manifest = dir / "manifest.json";
  const size_t channels = default_channels().size();
  save_rig(make_default_rig("primary", controllers), dir / "primary_rig.json");
  auto adaption = make_mlp(channels + 3 * controllers, std::vector<size_t>{16}, controllers, seed, "adaption");
  adaption.metadata[kLayoutKey] = adaption_layout(channels, controllers);
  save_model(adaption, dir / "adaption.model");
  f.doc.primary = {"primary_rig.json", "adaption.model"};
  for (size_t k = 0; k < secondaries; ++k) {
    const auto id = "secondary_" + std::to_string(k);
    save_rig(make_default_rig(id, controllers + k), dir / (id + "_rig.json"));
    save_model(make_mlp(controllers, std::vector<size_t>{8}, controllers + k, seed + 1 + k), dir / (id + ".model"));
    f.doc.secondaries.push_back({id + "_rig.json", id + ".model"});
  }
  f.doc.save(f.manifest);
  return f;
}

} // namespace testing
