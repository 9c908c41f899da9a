#include "psvma/granularity.hpp"

#include <cmath>
#include <stdexcept>

namespace psvma {

SemanticHead SemanticHead::init(std::size_t dim, std::size_t n_attrs, double tau,
                                std::mt19937_64& rng) {
    if (tau <= 0.0) throw std::invalid_argument("semantic head: temperature must be positive");
    SemanticHead h;
    h.tau = tau;
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(double(dim)),
                                             1.0 / std::sqrt(double(dim)));
    std::vector<double> w(dim * n_attrs);
    for (double& v : w) v = u(rng);
    h.w_phi = Tensor::from_data({dim, n_attrs}, std::move(w), true);
    h.b_phi = Tensor::zeros({n_attrs}, true);
    return h;
}

Tensor SemanticHead::pooled(const Tensor& f_hat) const {
    return pool(f_hat, 0, PoolKind::Mean);
}

Tensor SemanticHead::project(const Tensor& rep) const {
    if (rep.rank() != 1 || rep.size() != w_phi.rows())
        throw std::invalid_argument("semantic head: representation " + shape_str(rep.shape()) +
                                    " does not match projection " + shape_str(w_phi.shape()));
    Tensor row = reshape(rep, {1, rep.size()});
    return reshape(add_rowvec(matmul(row, w_phi), b_phi), {w_phi.cols()});
}

void SemanticHead::collect(const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + "w_phi", w_phi);
    out.emplace_back(prefix + "b_phi", b_phi);
}

ScglMode scgl_mode_from_string(const std::string& name) {
    if (name == "ours") return ScglMode::Ours;
    if (name == "l1") return ScglMode::L1;
    if (name == "l2") return ScglMode::L2;
    if (name == "kl") return ScglMode::Kl;
    if (name == "jsd") return ScglMode::Jsd;
    throw std::invalid_argument("unknown scgl mode '" + name + "'");
}

std::string to_string(ScglMode mode) {
    switch (mode) {
        case ScglMode::Ours: return "ours";
        case ScglMode::L1: return "l1";
        case ScglMode::L2: return "l2";
        case ScglMode::Kl: return "kl";
        case ScglMode::Jsd: return "jsd";
    }
    return "ours";
}

Tensor category_distribution(const Tensor& f_hat, const SemanticHead& head,
                             const AttributeTable& table) {
    if (table.seen_ids.empty())
        throw std::invalid_argument("category_distribution: no seen classes");
    Tensor attrs = head.phi(f_hat);
    std::vector<Tensor> sims;
    sims.reserve(table.seen_ids.size());
    for (std::size_t cls : table.seen_ids) {
        Tensor proto = Tensor::from_data({table.num_attributes}, table.prototypes[cls]);
        sims.push_back(cosine_similarity(attrs, proto));
    }
    Tensor logits = scale(stack(sims), 1.0 / head.tau);
    return reshape(softmax_rows(reshape(logits, {1, sims.size()})), {sims.size()});
}

double certainty(const Tensor& p) {
    if (p.rank() != 1 || p.size() == 0)
        throw std::invalid_argument("certainty: non-empty rank-1 distribution required");
    double best = p[0];
    for (std::size_t i = 1; i < p.size(); ++i) best = std::max(best, p[i]);
    return best;
}

std::pair<std::size_t, std::size_t> select_granularities(const std::vector<double>& c) {
    if (c.empty()) throw std::invalid_argument("select_granularities: empty certainty list");
    std::size_t tg = 0, sg = 0;
    for (std::size_t g = 1; g < c.size(); ++g) {
        if (c[g] > c[tg]) tg = g;
        if (c[g] < c[sg]) sg = g;
    }
    return {tg, sg};
}

Tensor cross_granularity_kl(const Tensor& p_teacher, const Tensor& p_student) {
    return scgl_divergence(p_teacher, p_student, ScglMode::Ours);
}

Tensor scgl_divergence(const Tensor& p_teacher, const Tensor& p_student, ScglMode mode) {
    if (p_teacher.shape() != p_student.shape() || p_teacher.rank() != 1)
        throw std::invalid_argument("scgl: distribution shapes disagree: " +
                                    shape_str(p_teacher.shape()) + " vs " +
                                    shape_str(p_student.shape()));
    double entropy = 0.0;  // H(p_student) in nats, as a constant weight
    for (std::size_t i = 0; i < p_student.size(); ++i) {
        const double v = p_student[i];
        entropy -= v * std::log(v);
    }
    return scgl_divergence_pinned(p_teacher.data(), entropy, p_student, mode);
}

Tensor scgl_divergence_pinned(const std::vector<double>& teacher_values, double entropy_weight,
                              const Tensor& p_student, ScglMode mode) {
    if (p_student.rank() != 1 || teacher_values.size() != p_student.size())
        throw std::invalid_argument("scgl: teacher length " +
                                    std::to_string(teacher_values.size()) +
                                    " does not match student " + shape_str(p_student.shape()));
    Tensor teacher = Tensor::from_data({teacher_values.size()}, teacher_values);

    switch (mode) {
        case ScglMode::L1: {
            // |p_t - p_s| on probabilities; subgradient 0 at ties
            Tensor diff = sub(teacher, p_student);
            std::vector<double> signs(diff.size());
            for (std::size_t i = 0; i < diff.size(); ++i)
                signs[i] = diff[i] > 0.0 ? 1.0 : (diff[i] < 0.0 ? -1.0 : 0.0);
            return sum(mul(diff, Tensor::from_data({diff.size()}, std::move(signs))));
        }
        case ScglMode::L2: {
            Tensor diff = sub(teacher, p_student);
            return sum(mul(diff, diff));
        }
        case ScglMode::Jsd: {
            Tensor m = scale(add(teacher, p_student), 0.5);
            Tensor log_m = log_elem(m);
            Tensor kl_t = sum(mul(teacher, sub(log_elem(teacher), log_m)));
            Tensor kl_s = sum(mul(p_student, sub(log_elem(p_student), log_m)));
            return scale(add(kl_t, kl_s), 0.5);
        }
        case ScglMode::Kl:
        case ScglMode::Ours: {
            Tensor kl = sum(mul(teacher, sub(log_elem(teacher), log_elem(p_student))));
            return mode == ScglMode::Kl ? kl : scale(kl, entropy_weight);
        }
    }
    throw std::logic_error("scgl: unhandled mode");
}

Tensor fuse(const std::vector<Tensor>& reps, const std::vector<double>& certainties) {
    if (reps.empty() || reps.size() != certainties.size())
        throw std::invalid_argument("fuse: need one certainty per representation");
    double total = 0.0;
    for (double c : certainties) {
        if (c < 0.0) throw std::invalid_argument("fuse: negative certainty");
        total += c;
    }
    if (total <= 0.0) throw std::invalid_argument("fuse: certainties sum to zero");
    Tensor out = scale(reps[0], certainties[0] / total);
    for (std::size_t g = 1; g < reps.size(); ++g)
        out = add(out, scale(reps[g], certainties[g] / total));
    return out;
}

Tensor score_classes(const Tensor& rep, const SemanticHead& head, const AttributeTable& table,
                     const std::vector<std::size_t>& class_ids) {
    if (class_ids.empty()) throw std::invalid_argument("score_classes: empty class set");
    Tensor attrs = head.project(rep);
    std::vector<Tensor> sims;
    sims.reserve(class_ids.size());
    for (std::size_t cls : class_ids) {
        if (cls >= table.num_classes)
            throw std::invalid_argument("score_classes: unknown class id " +
                                        std::to_string(cls));
        Tensor proto = Tensor::from_data({table.num_attributes}, table.prototypes[cls]);
        sims.push_back(cosine_similarity(attrs, proto));
    }
    return stack(sims);
}

}  // namespace psvma
