#pragma once
// Small dataset/model combos shared across the test suites.

#include <cstdint>

#include "psvma/model.hpp"
#include "psvma/training.hpp"

namespace fixtures {

inline psvma::SyntheticSpec tiny_spec(std::uint64_t seed = 1) {
    psvma::SyntheticSpec spec;
    spec.classes = 8;
    spec.seen = 6;
    spec.attributes = 8;
    spec.groups = 2;
    spec.train_per_class = 6;
    spec.test_per_class = 3;
    spec.noise = 0.05;
    spec.seed = seed;
    return spec;
}

inline psvma::ModelConfig tiny_model_config(const psvma::Dataset& ds) {
    psvma::ModelConfig cfg;
    cfg.backbone.grid = 4;
    cfg.backbone.dim = 8;
    cfg.backbone.noise = ds.noise;
    cfg.backbone.signal = ds.signal;
    return cfg;
}

inline psvma::TrainSettings quick_settings(std::size_t epochs = 2, std::uint64_t seed = 42) {
    psvma::TrainSettings s;
    s.epochs = epochs;
    s.seed = seed;
    s.batch = 8;
    return s;
}

}  // namespace fixtures
