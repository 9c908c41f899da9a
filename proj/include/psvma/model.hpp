#pragma once
// Full network assembly: frozen backbone stubs feeding one DSVTM per
// granularity, a shared semantic head, certainty-driven teacher/student
// selection and fusion, and cosine scores over class prototypes.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psvma/backbone.hpp"
#include "psvma/data.hpp"
#include "psvma/dsvtm.hpp"
#include "psvma/granularity.hpp"
#include "psvma/tensor.hpp"

namespace psvma {

enum class ProtoNorm { UnitInterval, L2 };
ProtoNorm proto_norm_from_string(const std::string& name);
std::string to_string(ProtoNorm norm);

struct ModelConfig {
    BackboneConfig backbone;
    std::size_t imse_iters = 2;
    double tau = 0.05;
    std::size_t nh_factor = 2;     // N_h = nh_factor * N_v per granularity
    bool attn_scale = false;
    bool residual_prev = false;
    bool cls_temperature = true;   // apply tau inside the classification loss
    ProtoNorm proto_norm = ProtoNorm::UnitInterval;

    // ablation switches; the distillation branch is switched off through a
    // zero KL loss weight instead
    bool use_imse = true;
    bool use_smid = true;
    bool use_amgf = true;
};

class PsvmaModel {
public:
    PsvmaModel(const AttributeTable& table, const ModelConfig& cfg, std::uint64_t param_seed);

    const ModelConfig& config() const { return cfg_; }
    const AttributeTable& table() const { return table_; }
    const Backbone& backbone() const { return backbone_; }
    SemanticHead& head() { return head_; }
    std::vector<DsvtmParams>& dsvtm() { return dsvtm_; }

    // Every learnable tensor, named, in a fixed order.
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    void zero_grad() const;

    // Constant per-granularity patch features for one sample.
    std::vector<Tensor> visual_features(const Sample& sample) const;

    // Per-sample decision constants. The live forward records them; gradient
    // audits replay the recorded values so the loss stays the function the
    // tape differentiated.
    struct Decisions {
        bool valid = false;
        std::vector<double> fusion_weights;
        std::size_t teacher = 0;
        std::size_t student = 0;
        double entropy_weight = 0.0;
        std::vector<double> teacher_probs;
    };

    struct Forward {
        std::vector<Tensor> f_hat;       // per granularity
        std::vector<Tensor> p;           // seen-class distributions per granularity
        std::vector<double> certainties;
        std::size_t teacher = 0;
        std::size_t student = 0;
        Tensor d_kl;        // scalar
        Tensor l_sem;       // scalar, summed over granularities
        Tensor fused;       // pooled fused representation, length D
        Tensor scores_all;  // cosine scores ordered by class id
        Tensor scores_seen; // cosine scores ordered by seen_ids
    };

    Forward forward(const std::vector<Tensor>& visual, std::size_t label,
                    ScglMode scgl_mode = ScglMode::Ours, Decisions* decisions = nullptr) const;

private:
    ModelConfig cfg_;
    AttributeTable table_;
    Backbone backbone_;
    std::vector<Tensor> semantic_;  // S^g constants
    std::vector<DsvtmParams> dsvtm_;
    SemanticHead head_;
};

}  // namespace psvma
