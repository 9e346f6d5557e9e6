#pragma once

// DBC1 checkpoints: a "DBC1" magic line, one JSON line describing the architecture and the
// ordered parameter list, then the parameters as little-endian f32 in that order.

#include <filesystem>
#include <string>
#include <vector>

#include "qsm/nn/network.hpp"

namespace qsm::nn {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string model;       // "generator" or "discriminator"
    std::string config_json; // architecture config
    std::vector<CheckpointEntry> entries;
};

void write_checkpoint(const Generator& g, const std::filesystem::path& path);
void write_checkpoint(const Discriminator& d, const std::filesystem::path& path);

Checkpoint read_checkpoint(const std::filesystem::path& path);

// Rebuild a model from its checkpoint; layout must match the stored config exactly.
Generator load_generator(const std::filesystem::path& path);
Discriminator load_discriminator(const std::filesystem::path& path);

} // namespace qsm::nn
