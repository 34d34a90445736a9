#pragma once

#include "vlci/backbone.hpp"
#include "vlci/data.hpp"

#include <string>

namespace vlci::train {

struct TrainedModel {
    model::Model<float> model;
    data::Vocabulary vocab;
    long step = 0;
    std::uint64_t rng_state = 0;
};

// Single binary archive: a metadata record (ModelConfig, vocabulary, step,
// rng state) followed by name -> shape-tagged little-endian float32 buffers
// for every parameter and its optimizer moments.
void save_checkpoint(const TrainedModel& tm, const std::string& path);

// Rebuilds the model from the stored config and verifies that every
// expected parameter name and shape is present.
TrainedModel load_checkpoint(const std::string& path);

}  // namespace vlci::train
