#include "psvma/dsvtm.hpp"

#include <cmath>
#include <stdexcept>

namespace psvma {

namespace {

Tensor uniform_init(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

void check_inputs(const char* where, const Tensor& s, const Tensor& f, const DsvtmConfig& cfg) {
    if (s.rank() != 2 || s.rows() != cfg.n_attrs || s.cols() != cfg.dim)
        throw std::invalid_argument(std::string(where) + ": attribute features " +
                                    shape_str(s.shape()) + " do not match config (" +
                                    std::to_string(cfg.n_attrs) + "x" +
                                    std::to_string(cfg.dim) + ")");
    if (f.rank() != 2 || f.rows() != cfg.n_patches || f.cols() != cfg.dim)
        throw std::invalid_argument(std::string(where) + ": patch features " +
                                    shape_str(f.shape()) + " do not match config (" +
                                    std::to_string(cfg.n_patches) + "x" +
                                    std::to_string(cfg.dim) + ")");
}

}  // namespace

void DsvtmConfig::validate() const {
    if (n_hidden <= n_patches)
        throw std::invalid_argument("dsvtm: N_h (" + std::to_string(n_hidden) +
                                    ") must exceed N_v (" + std::to_string(n_patches) + ")");
    if (groups == 0 || groups > n_attrs)
        throw std::invalid_argument("dsvtm: invalid attribute group count");
    if (imse_iters < 1) throw std::invalid_argument("dsvtm: at least one IMSE iteration");
}

DsvtmParams DsvtmParams::init(const DsvtmConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    DsvtmParams p;
    p.cfg = cfg;
    const std::size_t d = cfg.dim, ns = cfg.n_attrs, nv = cfg.n_patches, nh = cfg.n_hidden;
    const std::size_t gh = cfg.gate_hidden();
    const double bd = 1.0 / std::sqrt(double(d));
    const double bns = 1.0 / std::sqrt(double(ns));
    const double bgh = 1.0 / std::sqrt(double(gh));
    const double bnv = 1.0 / std::sqrt(double(nv));
    const double bnh = 1.0 / std::sqrt(double(nh));

    auto zero_vec = [](std::size_t n) { return Tensor::zeros({n}, true); };

    p.w_qs = uniform_init({d, d}, bd, rng); p.b_qs = zero_vec(d);
    p.w_kf = uniform_init({d, d}, bd, rng); p.b_kf = zero_vec(d);
    p.w_vf = uniform_init({d, d}, bd, rng); p.b_vf = zero_vec(d);
    p.w_g1 = uniform_init({ns, gh}, bns, rng); p.b_g1 = zero_vec(gh);
    p.w_g2 = uniform_init({gh, ns}, bgh, rng); p.b_g2 = zero_vec(ns);
    p.w_m1 = uniform_init({d, d}, bd, rng); p.b_m1 = zero_vec(d);
    p.w_m2 = uniform_init({d, d}, bd, rng); p.b_m2 = zero_vec(d);
    p.w_qf = uniform_init({d, d}, bd, rng); p.b_qf = zero_vec(d);
    p.w_ks = uniform_init({d, d}, bd, rng);
    p.w_vs = uniform_init({d, d}, bd, rng); p.b_vs = zero_vec(d);
    p.w_ex = uniform_init({nv, nh}, bnv, rng); p.b_ex = zero_vec(nh);
    p.w_se = uniform_init({nh, nh}, bnh, rng); p.b_se = zero_vec(nh);
    p.w_na = uniform_init({nh, nv}, bnh, rng); p.b_na = zero_vec(nv);
    p.w_n1 = uniform_init({d, d}, bd, rng); p.b_n1 = zero_vec(d);
    p.w_n2 = uniform_init({d, d}, bd, rng); p.b_n2 = zero_vec(d);
    return p;
}

DsvtmParams DsvtmParams::zeros(const DsvtmConfig& cfg) {
    cfg.validate();
    DsvtmParams p;
    p.cfg = cfg;
    const std::size_t d = cfg.dim, ns = cfg.n_attrs, nv = cfg.n_patches, nh = cfg.n_hidden;
    const std::size_t gh = cfg.gate_hidden();
    auto z = [](Shape s) { return Tensor::zeros(std::move(s), true); };
    p.w_qs = z({d, d}); p.b_qs = z({d});
    p.w_kf = z({d, d}); p.b_kf = z({d});
    p.w_vf = z({d, d}); p.b_vf = z({d});
    p.w_g1 = z({ns, gh}); p.b_g1 = z({gh});
    p.w_g2 = z({gh, ns}); p.b_g2 = z({ns});
    p.w_m1 = z({d, d}); p.b_m1 = z({d});
    p.w_m2 = z({d, d}); p.b_m2 = z({d});
    p.w_qf = z({d, d}); p.b_qf = z({d});
    p.w_ks = z({d, d});
    p.w_vs = z({d, d}); p.b_vs = z({d});
    p.w_ex = z({nv, nh}); p.b_ex = z({nh});
    p.w_se = z({nh, nh}); p.b_se = z({nh});
    p.w_na = z({nh, nv}); p.b_na = z({nv});
    p.w_n1 = z({d, d}); p.b_n1 = z({d});
    p.w_n2 = z({d, d}); p.b_n2 = z({d});
    return p;
}

void DsvtmParams::collect(const std::string& prefix,
                          std::vector<std::pair<std::string, Tensor>>& out) const {
    auto put = [&](const char* name, const Tensor& t) { out.emplace_back(prefix + name, t); };
    put("imse.w_qs", w_qs); put("imse.b_qs", b_qs);
    put("imse.w_kf", w_kf); put("imse.b_kf", b_kf);
    put("imse.w_vf", w_vf); put("imse.b_vf", b_vf);
    put("imse.w_g1", w_g1); put("imse.b_g1", b_g1);
    put("imse.w_g2", w_g2); put("imse.b_g2", b_g2);
    put("imse.w_m1", w_m1); put("imse.b_m1", b_m1);
    put("imse.w_m2", w_m2); put("imse.b_m2", b_m2);
    put("smid.w_qf", w_qf); put("smid.b_qf", b_qf);
    put("smid.w_ks", w_ks);
    put("smid.w_vs", w_vs); put("smid.b_vs", b_vs);
    put("smid.w_ex", w_ex); put("smid.b_ex", b_ex);
    put("smid.w_se", w_se); put("smid.b_se", b_se);
    put("smid.w_na", w_na); put("smid.b_na", b_na);
    put("smid.w_n1", w_n1); put("smid.b_n1", b_n1);
    put("smid.w_n2", w_n2); put("smid.b_n2", b_n2);
}

ImseStep imse_attention(const Tensor& s, const Tensor& f, const Tensor& s_residual,
                        const DsvtmParams& p) {
    check_inputs("imse_attention", s, f, p.cfg);
    Tensor q = linear(s, p.w_qs, p.b_qs);
    Tensor k = linear(f, p.w_kf, p.b_kf);
    Tensor v = linear(f, p.w_vf, p.b_vf);
    Tensor affinity = matmul(q, transpose(k));
    if (p.cfg.attn_scale) affinity = scale(affinity, 1.0 / std::sqrt(double(p.cfg.dim)));
    Tensor s_tilde = add(matmul(softmax_rows(affinity), v), s_residual);
    return {std::move(s_tilde), std::move(affinity)};
}

Tensor semantic_alignment_loss(const Tensor& affinity, const Tensor& a_y) {
    if (a_y.rank() != 1 || a_y.size() != affinity.rows())
        throw std::invalid_argument("semantic_alignment_loss: prototype length " +
                                    shape_str(a_y.shape()) + " does not match affinity " +
                                    shape_str(affinity.shape()));
    Tensor pooled = pool(affinity, 1, PoolKind::Max);
    Tensor diff = sub(pooled, a_y);
    return sum(mul(diff, diff));
}

Tensor attribute_communicate(const Tensor& s_tilde, const Tensor& s_residual,
                             const DsvtmParams& p) {
    Tensor pooled = pool(s_tilde, 1, PoolKind::Max);  // over the feature axis
    Tensor row = reshape(pooled, {1, p.cfg.n_attrs});
    Tensor hid = gelu(linear(row, p.w_g1, p.b_g1));
    Tensor gate = reshape(sigmoid(linear(hid, p.w_g2, p.b_g2)), {p.cfg.n_attrs});
    return add(row_scale(s_tilde, gate), s_residual);
}

Tensor attribute_activate(const Tensor& s_bar, const Tensor& s_tilde, const DsvtmParams& p) {
    Tensor hidden = gelu(linear(s_bar, p.w_m1, p.b_m1));
    Tensor out = linear(hidden, p.w_m2, p.b_m2);
    return add(add(out, s_bar), s_tilde);
}

ImseResult imse_forward(const Tensor& s, const Tensor& f, const DsvtmParams& p) {
    Tensor current = s;
    Tensor affinity;
    Tensor s_hat;
    for (std::size_t it = 0; it < p.cfg.imse_iters; ++it) {
        const Tensor& residual = (p.cfg.residual_prev && it > 0) ? current : s;
        ImseStep step = imse_attention(current, f, residual, p);
        affinity = step.affinity;
        Tensor s_bar = attribute_communicate(step.s_tilde, residual, p);
        s_hat = attribute_activate(s_bar, step.s_tilde, p);
        current = s_hat;
    }
    return {std::move(s_hat), std::move(affinity)};
}

Tensor smid_attention(const Tensor& f, const Tensor& s_hat, const DsvtmParams& p) {
    check_inputs("smid_attention", s_hat, f, p.cfg);
    Tensor q = linear(f, p.w_qf, p.b_qf);
    Tensor k = matmul(s_hat, p.w_ks);
    Tensor v = linear(s_hat, p.w_vs, p.b_vs);
    Tensor attn = matmul(q, transpose(k));
    if (p.cfg.attn_scale) attn = scale(attn, 1.0 / std::sqrt(double(p.cfg.dim)));
    return add(matmul(softmax_rows(attn), v), f);
}

Tensor patch_mix(const Tensor& f_tilde, const DsvtmParams& p) {
    if (f_tilde.rank() != 2 || f_tilde.rows() != p.cfg.n_patches)
        throw std::invalid_argument("patch_mix: expected " + std::to_string(p.cfg.n_patches) +
                                    " patch rows, got " + shape_str(f_tilde.shape()));
    Tensor expanded = gelu(linear(transpose(f_tilde), p.w_ex, p.b_ex));  // D x N_h
    Tensor selected = gelu(linear(expanded, p.w_se, p.b_se));            // D x N_h
    Tensor narrowed = linear(selected, p.w_na, p.b_na);                  // D x N_v
    return add(transpose(narrowed), f_tilde);
}

Tensor smid_forward(const Tensor& f, const Tensor& s_hat, const DsvtmParams& p) {
    Tensor f_bar = patch_mix(smid_attention(f, s_hat, p), p);
    Tensor hidden = gelu(linear(f_bar, p.w_n1, p.b_n1));
    Tensor out = linear(hidden, p.w_n2, p.b_n2);
    return add(out, f_bar);
}

DsvtmOutput dsvtm_forward(const Tensor& s, const Tensor& f, const DsvtmParams& p) {
    ImseResult imse = imse_forward(s, f, p);
    Tensor f_hat = smid_forward(f, imse.s_hat, p);
    return {std::move(imse.s_hat), std::move(f_hat), std::move(imse.affinity)};
}

}  // namespace psvma
