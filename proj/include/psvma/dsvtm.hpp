#pragma once
// Dual semantic-visual transformer module, one per granularity.
//
// The encoder half (IMSE) recasts the sharing attributes into instance-centric
// ones: cross-attention from attributes to patches, a grouped gating step that
// compacts related attributes, and a row-wise MLP, iterated a configurable
// number of times. The decoder half (SMID) sends patches attending over the
// adapted attributes through an inverted-residual patch-mixing bottleneck and
// a row-wise MLP, producing disambiguated visual features.
//
// Attention is single-head with plain dot-product scores; an optional 1/sqrt(D)
// scaling is available for study. All linear maps carry biases. With every
// parameter zero the visual path is exactly the identity.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "psvma/tensor.hpp"

namespace psvma {

struct DsvtmConfig {
    std::size_t n_attrs = 12;    // N_s
    std::size_t n_patches = 16;  // N_v
    std::size_t dim = 16;        // D
    std::size_t groups = 3;      // hbar
    std::size_t n_hidden = 32;   // N_h, must exceed N_v
    std::size_t imse_iters = 2;
    bool attn_scale = false;     // divide attention scores by sqrt(D)
    bool residual_prev = false;  // later iterations add the previous output
                                 // instead of the original sharing attributes

    std::size_t gate_hidden() const { return (n_attrs + groups - 1) / groups; }
    void validate() const;
};

struct DsvtmParams {
    DsvtmConfig cfg;

    // IMSE attention projections (queries from attributes, keys/values from patches)
    Tensor w_qs, b_qs, w_kf, b_kf, w_vf, b_vf;
    // group compact attention gate
    Tensor w_g1, b_g1, w_g2, b_g2;
    // IMSE row-wise MLP
    Tensor w_m1, b_m1, w_m2, b_m2;
    // SMID attention projections (queries from patches, keys/values from
    // attributes). The key projection carries no bias: a shared key offset
    // shifts every attention row by the same constant, which softmax cancels,
    // so such a bias could never receive gradient.
    Tensor w_qf, b_qf, w_ks, w_vs, b_vs;
    // patch mixing bottleneck
    Tensor w_ex, b_ex, w_se, b_se, w_na, b_na;
    // SMID row-wise MLP
    Tensor w_n1, b_n1, w_n2, b_n2;

    static DsvtmParams init(const DsvtmConfig& cfg, std::mt19937_64& rng);
    static DsvtmParams zeros(const DsvtmConfig& cfg);

    // Appends (name, tensor) pairs in a fixed order.
    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

struct ImseStep {
    Tensor s_tilde;   // N_s x D
    Tensor affinity;  // M, N_s x N_v
};

struct ImseResult {
    Tensor s_hat;     // instance-centric attributes, N_s x D
    Tensor affinity;  // affinity of the final iteration
};

struct DsvtmOutput {
    Tensor s_hat;     // N_s x D
    Tensor f_hat;     // N_v x D
    Tensor affinity;  // N_s x N_v
};

// softmax(Q_S K_F^T) V_F + S_residual; also returns the raw affinity matrix.
ImseStep imse_attention(const Tensor& s, const Tensor& f, const Tensor& s_residual,
                        const DsvtmParams& p);

// || max-pool over patches of the affinity - a_y ||^2
Tensor semantic_alignment_loss(const Tensor& affinity, const Tensor& a_y);

// sigmoid(gelu(maxpool_D(s_tilde) W1) W2) gating each attribute row, plus residual.
Tensor attribute_communicate(const Tensor& s_tilde, const Tensor& s_residual,
                             const DsvtmParams& p);

// row-wise MLP plus both residuals.
Tensor attribute_activate(const Tensor& s_bar, const Tensor& s_tilde, const DsvtmParams& p);

ImseResult imse_forward(const Tensor& s, const Tensor& f, const DsvtmParams& p);

// softmax(Q_F K_S^T) V_S + F.
Tensor smid_attention(const Tensor& f, const Tensor& s_hat, const DsvtmParams& p);

// Inverted residual bottleneck across the patch axis.
Tensor patch_mix(const Tensor& f_tilde, const DsvtmParams& p);

Tensor smid_forward(const Tensor& f, const Tensor& s_hat, const DsvtmParams& p);

DsvtmOutput dsvtm_forward(const Tensor& s, const Tensor& f, const DsvtmParams& p);

}  // namespace psvma
