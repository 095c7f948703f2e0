#pragma once

#include <cstdint>
#include <string>

#include "neuromoco/training.hpp"

namespace neuromoco::config {

// Everything a run needs, assembled from a flat key=value file. `mode`
// selects a preset (desk-scale or full-scale defaults) that individual keys
// then override; the single root seed feeds every component split.
struct RunConfig {
    std::string mode = "desk";
    uint64_t seed = 1;
    std::string train_dir;
    std::string test_dir;
    std::string output_dir;
    training::PretrainConfig pretrain;
    training::FinetuneConfig finetune;
};

// Parse configuration text. Lines are `key = value`; '#' starts a comment;
// unknown or duplicate keys are rejected. The `mode` key is applied before
// all others regardless of its position in the file.
RunConfig parse_text(const std::string& text);

RunConfig load_file(const std::string& path);

} // namespace neuromoco::config
