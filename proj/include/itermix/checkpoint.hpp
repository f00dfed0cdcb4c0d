#pragma once

#include <string>
#include <vector>

#include "itermix/data.hpp"
#include "itermix/model.hpp"

namespace itermix {

// Everything needed to run inference: the structural config, the trained
// parameters (plus norm buffers), and the dataset standardization
// statistics so raw-unit forecasts are self-contained.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  NormStats data_stats;
  std::vector<std::string> feature_names;
};

// Text container, one tensor per `tensor <name> <rank> <dims...>` header
// with hexfloat payload rows. Hexfloats round-trip bit-exactly, so a
// reloaded checkpoint reproduces inference outputs bitwise.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace itermix
