#include "psvma/backbone.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace psvma {

namespace {

std::vector<double> random_matrix(std::size_t rows, std::size_t cols, double scale,
                                  std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> m(rows * cols);
    for (double& v : m) v = u(rng);
    return m;
}

}  // namespace

void BackboneConfig::validate() const {
    if (grid % 2 != 0) throw std::invalid_argument("backbone: odd patch grid side");
    if (grid == 0) throw std::invalid_argument("backbone: empty patch grid");
    if (dim < 4) throw std::invalid_argument("backbone: feature dim must be at least 4");
    if (granularities < 1 || granularities > 3)
        throw std::invalid_argument("backbone: granularities must be 1, 2 or 3");
}

Tensor mix_residual(const Tensor& x, const Tensor& w) {
    return add(gelu(matmul(x, w)), x);
}

std::vector<Tensor> multi_scale_adapt(const Tensor& base, std::size_t grid, std::size_t m) {
    if (base.rank() != 2 || base.rows() != grid * grid)
        throw std::invalid_argument("multi_scale_adapt: base is not a " + std::to_string(grid) +
                                    "x" + std::to_string(grid) + " patch grid: " +
                                    shape_str(base.shape()));
    if (grid % 2 != 0) throw std::invalid_argument("multi_scale_adapt: odd grid side");
    std::vector<Tensor> out;
    if (m >= 1) out.push_back(m == 1 ? base : grid_pool2x2(base, grid));
    if (m >= 2) out.push_back(base);
    if (m >= 3) out.push_back(grid_up2x2(base, grid));
    if (m < 1 || m > 3) throw std::invalid_argument("multi_scale_adapt: unsupported granularity count");
    return out;
}

Backbone::Backbone(const AttributeTable& table, BackboneConfig cfg)
    : cfg_(cfg), n_attrs_(table.num_attributes) {
    cfg_.validate();
    const std::size_t d = cfg_.dim;
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0xb15));
    attr_embed_ = random_matrix(n_attrs_, d, 1.0 / std::sqrt(double(n_attrs_)), rng);
    patch_pos_ = random_matrix(cfg_.patches(), d, 0.1, rng);
    visual_mix_.reserve(cfg_.depth);
    for (std::size_t l = 0; l < cfg_.depth; ++l)
        visual_mix_.push_back(random_matrix(d, d, 1.0 / std::sqrt(double(d)), rng));

    std::mt19937_64 sem_rng(mix_seed(cfg_.seed, 0x5e3));
    sem_embed_ = random_matrix(n_attrs_, d, 1.0 / std::sqrt(double(d)), sem_rng);
    sem_mix_.reserve(cfg_.granularities);
    for (std::size_t g = 0; g < cfg_.granularities; ++g)
        sem_mix_.push_back(random_matrix(d, d, 1.0 / std::sqrt(double(d)), sem_rng));
}

Tensor Backbone::extract_visual(const AttributeTable& table, const Sample& sample) const {
    if (table.num_attributes != n_attrs_)
        throw std::invalid_argument("backbone: table attribute count changed");
    const std::size_t nv = cfg_.patches(), d = cfg_.dim, hbar = table.num_groups;
    const auto inst = instance_attributes(table, sample, cfg_.noise);

    // patch -> attribute group, contiguous blocks over the row-major grid
    std::vector<double> base(nv * d);
    for (std::size_t p = 0; p < nv; ++p) {
        const std::size_t g = p * hbar / nv;
        for (std::size_t k = 0; k < d; ++k) {
            double acc = 0.0;
            for (std::size_t a : table.groups[g]) acc += inst[a] * attr_embed_[a * d + k];
            base[p * d + k] = cfg_.signal * acc + patch_pos_[p * d + k];
        }
    }

    Tensor x = Tensor::from_data({nv, d}, std::move(base));
    for (const auto& w : visual_mix_)
        x = mix_residual(x, Tensor::from_data({d, d}, w));
    return x;
}

std::vector<Tensor> Backbone::visual_pyramid(const AttributeTable& table,
                                             const Sample& sample) const {
    return multi_scale_adapt(extract_visual(table, sample), cfg_.grid, cfg_.granularities);
}

std::vector<Tensor> Backbone::embed_semantics(const AttributeTable& table) const {
    if (table.num_attributes != n_attrs_)
        throw std::invalid_argument("backbone: table attribute count changed");
    const std::size_t d = cfg_.dim;
    Tensor x = Tensor::from_data({n_attrs_, d}, sem_embed_);
    std::vector<Tensor> out;
    out.reserve(cfg_.granularities);
    for (std::size_t g = 0; g < cfg_.granularities; ++g) {
        x = mix_residual(x, Tensor::from_data({d, d}, sem_mix_[g]));
        out.push_back(x);
    }
    return out;
}

}  // namespace psvma
