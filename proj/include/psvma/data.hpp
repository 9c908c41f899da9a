#pragma once
// Attribute tables, seen/unseen splits, and the synthetic benchmark generator.
//
// Attribute table file format (UTF-8 text):
//   classes=<n> seen=<n> attributes=<n> groups=<h> [normalized=<0|1>]
//   class <id> <name> : <floats...>
//   group <gid> : <attribute indices...>
//   seen : <class ids...>
//   unseen : <class ids...>
// Dataset manifest: one line per sample `<split> <class-id> <image-seed>`
// with split in {train, test_seen, test_unseen}.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace psvma {

struct AttributeTable {
    std::size_t num_classes = 0;
    std::size_t num_attributes = 0;  // N_s
    std::size_t num_groups = 0;
    std::vector<std::string> class_names;
    std::vector<std::vector<double>> prototypes;     // [class][attribute], values in [0,1]
    std::vector<std::vector<std::size_t>> groups;    // [group] -> attribute indices
    std::vector<std::size_t> seen_ids;
    std::vector<std::size_t> unseen_ids;

    bool is_seen(std::size_t class_id) const;
    std::size_t seen_index(std::size_t class_id) const;  // position in seen_ids
    void validate() const;                               // throws on invariant violations
};

struct Sample {
    std::uint64_t image_seed = 0;
    std::size_t label = 0;
};

struct SyntheticSpec {
    std::size_t classes = 20;
    std::size_t seen = 15;
    std::size_t attributes = 12;  // N_s
    std::size_t groups = 3;       // hbar
    std::size_t train_per_class = 30;
    std::size_t test_per_class = 10;
    double noise = 0.05;   // intra-class noise level (applied at feature time)
    double signal = 1.0;   // attribute-to-patch signal strength
    std::uint64_t seed = 1;
};

struct Dataset {
    AttributeTable table;
    std::vector<Sample> train;
    std::vector<Sample> test_seen;
    std::vector<Sample> test_unseen;
    double noise = 0.05;
    double signal = 1.0;
};

AttributeTable load_attribute_table(const std::string& path);
void save_attribute_table(const AttributeTable& table, const std::string& path);

// Deterministic: equal specs produce bit-identical datasets.
Dataset generate_synthetic(const SyntheticSpec& spec);

// Partitions samples by seen-ness of their label; unknown labels throw.
std::pair<std::vector<Sample>, std::vector<Sample>> split_partition(
    const AttributeTable& table, const std::vector<Sample>& samples);

void save_manifest(const Dataset& ds, const std::string& path);
// Loads manifest samples into an existing dataset shell (table already loaded).
void load_manifest(Dataset& ds, const std::string& path);

// The per-sample attribute instance the backbone embeds: prototype of the
// label plus noise * N(0,1) drawn deterministically from the image seed.
std::vector<double> instance_attributes(const AttributeTable& table, const Sample& sample,
                                        double noise);

// splitmix64-style mixing for derived RNG seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                       std::uint64_t d = 0);

}  // namespace psvma
