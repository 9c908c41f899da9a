#include "psvma/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace psvma {

ProtoNorm proto_norm_from_string(const std::string& name) {
    if (name == "unit_interval") return ProtoNorm::UnitInterval;
    if (name == "l2") return ProtoNorm::L2;
    throw std::invalid_argument("unknown proto_norm '" + name + "'");
}

std::string to_string(ProtoNorm norm) {
    return norm == ProtoNorm::L2 ? "l2" : "unit_interval";
}

PsvmaModel::PsvmaModel(const AttributeTable& table, const ModelConfig& cfg,
                       std::uint64_t param_seed)
    : cfg_(cfg), table_(table), backbone_(table, cfg.backbone) {
    table_.validate();
    if (cfg_.proto_norm == ProtoNorm::L2) {
        for (auto& proto : table_.prototypes) {
            double norm = 0.0;
            for (double v : proto) norm += v * v;
            norm = std::sqrt(norm);
            for (double& v : proto) v /= norm;
        }
    }

    semantic_ = backbone_.embed_semantics(table_);
    for (Tensor& s : semantic_) s = s.detach();

    std::mt19937_64 rng(mix_seed(param_seed, 0x9a7a));
    const std::size_t m = cfg_.backbone.granularities;
    const std::size_t base_patches = cfg_.backbone.patches();
    dsvtm_.reserve(m);
    std::vector<Tensor> pyramid_probe =
        multi_scale_adapt(Tensor::zeros({base_patches, cfg_.backbone.dim}),
                          cfg_.backbone.grid, m);
    for (std::size_t g = 0; g < m; ++g) {
        DsvtmConfig dc;
        dc.n_attrs = table_.num_attributes;
        dc.n_patches = pyramid_probe[g].rows();
        dc.dim = cfg_.backbone.dim;
        dc.groups = table_.num_groups;
        dc.n_hidden = std::max(cfg_.nh_factor * dc.n_patches, dc.n_patches + 1);
        dc.imse_iters = cfg_.imse_iters;
        dc.attn_scale = cfg_.attn_scale;
        dc.residual_prev = cfg_.residual_prev;
        dsvtm_.push_back(DsvtmParams::init(dc, rng));
    }
    head_ = SemanticHead::init(cfg_.backbone.dim, table_.num_attributes, cfg_.tau, rng);
}

std::vector<std::pair<std::string, Tensor>> PsvmaModel::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t g = 0; g < dsvtm_.size(); ++g)
        dsvtm_[g].collect("dsvtm" + std::to_string(g + 1) + ".", out);
    head_.collect("head.", out);
    return out;
}

void PsvmaModel::zero_grad() const {
    for (auto& [name, t] : parameters()) const_cast<Tensor&>(t).zero_grad();
}

std::vector<Tensor> PsvmaModel::visual_features(const Sample& sample) const {
    return backbone_.visual_pyramid(table_, sample);
}

PsvmaModel::Forward PsvmaModel::forward(const std::vector<Tensor>& visual, std::size_t label,
                                        ScglMode scgl_mode, Decisions* decisions) const {
    const std::size_t m = cfg_.backbone.granularities;
    if (visual.size() != m)
        throw std::invalid_argument("forward: expected " + std::to_string(m) +
                                    " granularity feature maps, got " +
                                    std::to_string(visual.size()));
    if (label >= table_.num_classes)
        throw std::invalid_argument("forward: unknown label id " + std::to_string(label));

    Forward out;
    Tensor a_y = Tensor::from_data({table_.num_attributes}, table_.prototypes[label]);
    Tensor l_sem;

    for (std::size_t g = 0; g < m; ++g) {
        Tensor s_hat;
        if (cfg_.use_imse) {
            ImseResult imse = imse_forward(semantic_[g], visual[g], dsvtm_[g]);
            s_hat = imse.s_hat;
            Tensor term = semantic_alignment_loss(imse.affinity, a_y);
            l_sem = l_sem.defined() ? add(l_sem, term) : term;
        } else {
            s_hat = semantic_[g];
        }
        Tensor f_hat = cfg_.use_smid ? smid_forward(visual[g], s_hat, dsvtm_[g]) : visual[g];
        out.f_hat.push_back(f_hat);
        out.p.push_back(category_distribution(f_hat, head_, table_));
        out.certainties.push_back(certainty(out.p.back()));
    }
    out.l_sem = l_sem.defined() ? l_sem : Tensor::scalar(0.0);

    const bool use_recorded = decisions && decisions->valid;
    if (use_recorded) {
        out.teacher = decisions->teacher;
        out.student = decisions->student;
    } else {
        auto [tg, sg] = select_granularities(out.certainties);
        out.teacher = tg;
        out.student = sg;
    }

    if (m > 1) {
        if (use_recorded) {
            out.d_kl = scgl_divergence_pinned(decisions->teacher_probs,
                                              decisions->entropy_weight,
                                              out.p[out.student], scgl_mode);
        } else {
            out.d_kl = scgl_divergence(out.p[out.teacher], out.p[out.student], scgl_mode);
        }
    } else {
        out.d_kl = Tensor::scalar(0.0);
    }

    std::vector<Tensor> pooled;
    pooled.reserve(m);
    for (std::size_t g = 0; g < m; ++g) pooled.push_back(head_.pooled(out.f_hat[g]));
    std::vector<double> weights;
    if (use_recorded) {
        weights = decisions->fusion_weights;
    } else if (cfg_.use_amgf) {
        weights = out.certainties;
    } else {
        weights.assign(m, 1.0);
    }
    out.fused = fuse(pooled, weights);

    std::vector<std::size_t> all_ids(table_.num_classes);
    for (std::size_t c = 0; c < all_ids.size(); ++c) all_ids[c] = c;
    out.scores_all = score_classes(out.fused, head_, table_, all_ids);
    std::vector<Tensor> seen_scores;
    seen_scores.reserve(table_.seen_ids.size());
    for (std::size_t cls : table_.seen_ids) seen_scores.push_back(pick(out.scores_all, cls));
    out.scores_seen = stack(seen_scores);

    if (decisions && !decisions->valid) {
        decisions->valid = true;
        decisions->teacher = out.teacher;
        decisions->student = out.student;
        double total = 0.0;
        if (cfg_.use_amgf) {
            for (double c : out.certainties) total += c;
            decisions->fusion_weights.clear();
            for (double c : out.certainties) decisions->fusion_weights.push_back(c / total);
        } else {
            decisions->fusion_weights.assign(m, 1.0 / double(m));
        }
        decisions->teacher_probs = out.p[out.teacher].data();
        double entropy = 0.0;
        for (std::size_t i = 0; i < out.p[out.student].size(); ++i) {
            const double v = out.p[out.student][i];
            entropy -= v * std::log(v);
        }
        decisions->entropy_weight = entropy;
    }
    return out;
}

}  // namespace psvma
