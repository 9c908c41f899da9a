#pragma once
// Selective cross-granularity learning and adaptive multi-granularity fusion.
//
// Per granularity, a shared semantic head maps patch features to predicted
// attributes (average pooling then a linear layer); tempered cosine scores
// against seen-class prototypes give a category distribution whose maximum is
// the granularity's certainty. The most/least certain granularities act as
// teacher/student for an entropy-weighted KL term; the teacher distribution
// and the entropy coefficient are treated as constants, so gradient flows
// only through the student. Fusion weights are certainty-proportional and
// also treated as constants.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "psvma/data.hpp"
#include "psvma/tensor.hpp"

namespace psvma {

struct SemanticHead {
    Tensor w_phi;  // D x N_s
    Tensor b_phi;  // N_s
    double tau = 0.05;

    static SemanticHead init(std::size_t dim, std::size_t n_attrs, double tau,
                             std::mt19937_64& rng);

    // average pooling over the patch axis
    Tensor pooled(const Tensor& f_hat) const;
    // linear map from a pooled D-vector to predicted attributes
    Tensor project(const Tensor& rep) const;
    Tensor phi(const Tensor& f_hat) const { return project(pooled(f_hat)); }

    void collect(const std::string& prefix,
                 std::vector<std::pair<std::string, Tensor>>& out) const;
};

enum class ScglMode { Ours, L1, L2, Kl, Jsd };

ScglMode scgl_mode_from_string(const std::string& name);
std::string to_string(ScglMode mode);

// softmax over tempered cosine similarity to the seen-class prototypes.
Tensor category_distribution(const Tensor& f_hat, const SemanticHead& head,
                             const AttributeTable& table);

// maximum element of a distribution
double certainty(const Tensor& p);

// (teacher, student) = (argmax, argmin) certainty, lowest index on ties.
std::pair<std::size_t, std::size_t> select_granularities(const std::vector<double>& c);

// H(p_student) * KL(p_teacher || p_student); teacher values and the entropy
// weight enter as constants.
Tensor cross_granularity_kl(const Tensor& p_teacher, const Tensor& p_student);

// Loss-mode variants for the ablation harness (applied to probabilities).
Tensor scgl_divergence(const Tensor& p_teacher, const Tensor& p_student, ScglMode mode);

// Same loss with the constant inputs pinned explicitly: teacher probabilities
// as plain values and, for the entropy-weighted mode, the weight itself.
// The live forward uses the current values; gradient audits re-feed the ones
// recorded at the base point so the differentiated function stays fixed.
Tensor scgl_divergence_pinned(const std::vector<double>& teacher, double entropy_weight,
                              const Tensor& p_student, ScglMode mode);

// Certainty-proportional convex combination of same-shape representations.
Tensor fuse(const std::vector<Tensor>& reps, const std::vector<double>& certainties);

// cos(phi-projection of rep, a_c) for each class id in order.
Tensor score_classes(const Tensor& rep, const SemanticHead& head, const AttributeTable& table,
                     const std::vector<std::size_t>& class_ids);

}  // namespace psvma
