#pragma once
// Deterministic stand-ins for the pretrained visual and semantic extractors.
// The visual stub embeds a group-structured slice of the sample's attribute
// instance into each patch and passes it through fixed random residual mixing
// layers; the semantic stub embeds attribute indices and emits one feature
// set per granularity from a stack of the same mixing layers. Stub weights
// are fixed at construction and never train.

#include <cstdint>
#include <vector>

#include "psvma/data.hpp"
#include "psvma/tensor.hpp"

namespace psvma {

struct BackboneConfig {
    std::size_t grid = 4;          // patch grid side r; must be even
    std::size_t dim = 16;          // feature dim D
    std::size_t granularities = 3; // M in {1,2,3}
    std::size_t depth = 2;         // mixing layers in the visual stub
    std::uint64_t seed = 11;       // stub weight seed
    double noise = 0.05;           // intra-class noise level
    double signal = 1.0;           // attribute-to-patch signal strength
    double feature_norm_bound = 100.0;  // declared row-norm bound, noiseless inputs

    std::size_t patches() const { return grid * grid; }
    void validate() const;
};

struct GranularityBundle {
    std::vector<Tensor> visual;    // F^g, each N_v^g x D
    std::vector<Tensor> semantic;  // S^g, each N_s x D
};

// X + gelu(X * W) applied row-wise; identity when W is zero.
Tensor mix_residual(const Tensor& x, const Tensor& w);

// F2 = base, F1 = 2x2 mean pool on the patch grid, F3 = nearest-neighbor 2x
// duplication; channel dim unchanged. Returns m entries ordered coarse to fine.
std::vector<Tensor> multi_scale_adapt(const Tensor& base, std::size_t grid, std::size_t m);

class Backbone {
public:
    Backbone(const AttributeTable& table, BackboneConfig cfg);

    const BackboneConfig& config() const { return cfg_; }

    // r^2 x D constant feature map, deterministic in (image_seed, prototype).
    Tensor extract_visual(const AttributeTable& table, const Sample& sample) const;

    // All granularity feature maps for one sample.
    std::vector<Tensor> visual_pyramid(const AttributeTable& table, const Sample& sample) const;

    // One N_s x D semantic feature set per granularity (fixed per table).
    std::vector<Tensor> embed_semantics(const AttributeTable& table) const;

private:
    BackboneConfig cfg_;
    std::size_t n_attrs_;
    std::vector<double> attr_embed_;              // N_s x D projection of attribute slices
    std::vector<double> patch_pos_;               // r^2 x D positional offsets
    std::vector<std::vector<double>> visual_mix_; // depth matrices, D x D
    std::vector<double> sem_embed_;               // N_s x D attribute index embedding
    std::vector<std::vector<double>> sem_mix_;    // M matrices, D x D
};

}  // namespace psvma
