#pragma once
// Loss assembly, plain momentum SGD, the training loop, and checkpoints.
//
// Checkpoint file layout (little-endian): magic "PSVMACKPT", u32 version,
// length-prefixed config text, u64 epoch, length-prefixed RNG state, u64
// parameter count, then per parameter: length-prefixed name, u32 rank, u64
// dims, f64 values.

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "psvma/data.hpp"
#include "psvma/model.hpp"
#include "psvma/tensor.hpp"

namespace psvma {

struct TrainSettings {
    double lambda_sem = 0.5;
    double lambda_kl = 5.0;
    double lambda_deb = 0.2;
    double lr = 3e-3;
    double momentum = 0.9;
    std::size_t epochs = 30;
    std::size_t batch = 16;
    std::uint64_t seed = 42;
    ScglMode scgl_mode = ScglMode::Ours;
    void validate() const;
};

// -log softmax_y of the scores, tempered by tau when `tempered`.
Tensor classification_loss(const Tensor& scores_seen, std::size_t y_seen_index, double tau,
                           bool tempered = true);

// Squared gaps between seen and unseen score means and population variances.
Tensor debias_loss(const Tensor& scores_all, const AttributeTable& table);

struct LossParts {
    Tensor l_cls, l_sem, d_kl, l_deb;  // batch means
};

// Weighted sum; zero-weight terms stay out of the graph entirely. Throws on a
// non-finite component, naming it.
Tensor total_loss(const LossParts& parts, const TrainSettings& settings);

struct EpochRow {
    std::size_t epoch = 0;
    double l_cls = 0, l_sem = 0, d_kl = 0, l_deb = 0, total = 0;
    double seen_val_acc = 0;  // percent
};

struct Checkpoint {
    std::uint32_t version = 1;
    std::string config_text;
    std::uint64_t epoch = 0;
    std::string rng_state;
    struct Entry {
        Shape shape;
        std::vector<double> values;
    };
    std::map<std::string, Entry> entries;
};

Checkpoint snapshot(const PsvmaModel& model, const std::string& config_text,
                    std::uint64_t epoch, const std::string& rng_state);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Copies values into the model; unknown or missing names and shape mismatches
// throw, naming the parameter.
void apply_checkpoint(PsvmaModel& model, const Checkpoint& ckpt);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochRow> log;
};

// Algorithm: per batch, extract features, run every granularity's DSVTM,
// select teacher/student, assemble the four loss terms, and take one momentum
// SGD step. Deterministic given the settings seed.
TrainResult train(const Dataset& ds, PsvmaModel& model, const TrainSettings& settings,
                  const std::string& config_text = "", std::ostream* progress = nullptr);

void write_epoch_log(const std::vector<EpochRow>& log, const std::string& path);

// Central-difference audit of the complete loss on a small batch, with the
// per-sample decision constants pinned at the base point.
double model_grad_check(PsvmaModel& model, const Dataset& ds, const TrainSettings& settings,
                        std::size_t batch_size = 2, double h = 1e-5,
                        std::size_t coords_per_param = 200);

}  // namespace psvma
