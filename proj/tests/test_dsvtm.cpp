#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "psvma/backbone.hpp"
#include "psvma/dsvtm.hpp"

using namespace psvma;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

oracle::Mat to_mat(const Tensor& t) {
    oracle::Mat m(t.rows(), oracle::Vec(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

oracle::Vec to_vec(const Tensor& t) {
    oracle::Vec v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = t[i];
    return v;
}

DsvtmConfig small_config() {
    DsvtmConfig cfg;
    cfg.n_attrs = 3;
    cfg.n_patches = 4;
    cfg.dim = 2;
    cfg.groups = 3;
    cfg.n_hidden = 8;
    cfg.imse_iters = 1;
    return cfg;
}

double max_abs_diff(const Tensor& t, const oracle::Mat& m) {
    double d = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j)
            d = std::max(d, std::abs(t.at(i, j) - m[i][j]));
    return d;
}

}  // namespace

TEST_SUITE_BEGIN("dsvtm");

TEST_CASE("imse attention: degenerate projections collapse as the formula demands") {
    std::mt19937_64 rng(21);
    DsvtmConfig cfg = small_config();
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);

    SUBCASE("zero query/key gives a zero affinity and uniform mixing") {
        p.w_qs = Tensor::zeros({2, 2}, true);
        p.b_qs = Tensor::zeros({2}, true);
        ImseStep step = imse_attention(s, f, s, p);
        for (std::size_t i = 0; i < step.affinity.size(); ++i) CHECK(step.affinity[i] == 0.0);
        // rows of s_tilde - s all equal the mean of the value rows
        Tensor v = add_rowvec(matmul(f, p.w_vf), p.b_vf);
        for (std::size_t j = 0; j < 2; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 4; ++i) mean += v.at(i, j) / 4.0;
            for (std::size_t i = 0; i < 3; ++i)
                CHECK(step.s_tilde.at(i, j) - s.at(i, j) == doctest::Approx(mean).epsilon(1e-12));
        }
    }

    SUBCASE("zero value projection leaves the residual only") {
        p.w_vf = Tensor::zeros({2, 2}, true);
        p.b_vf = Tensor::zeros({2}, true);
        ImseStep step = imse_attention(s, f, s, p);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j) CHECK(step.s_tilde.at(i, j) == s.at(i, j));
    }
}

TEST_CASE("imse attention matches the loop oracle") {
    std::mt19937_64 rng(22);
    for (int rep = 0; rep < 10; ++rep) {
        DsvtmConfig cfg = small_config();
        DsvtmParams p = DsvtmParams::init(cfg, rng);
        Tensor s = random_tensor({3, 2}, rng);
        Tensor f = random_tensor({4, 2}, rng);
        ImseStep step = imse_attention(s, f, s, p);
        auto ref = oracle::cross_attention(to_mat(s), to_mat(f), to_mat(s), to_mat(p.w_qs),
                                           to_vec(p.b_qs), to_mat(p.w_kf), to_vec(p.b_kf),
                                           to_mat(p.w_vf), to_vec(p.b_vf), 1.0);
        CHECK(max_abs_diff(step.s_tilde, ref.out) < 1e-10);
        CHECK(max_abs_diff(step.affinity, ref.affinity) < 1e-10);
    }
}

TEST_CASE("affinity row i ignores other attributes") {
    std::mt19937_64 rng(23);
    DsvtmConfig cfg = small_config();
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor f = random_tensor({4, 2}, rng);
    Tensor s1 = random_tensor({3, 2}, rng);
    std::vector<double> bumped(s1.data());
    bumped[1 * 2] += 5.0;  // change attribute row 1 only
    bumped[1 * 2 + 1] -= 3.0;
    Tensor s2 = Tensor::from_data({3, 2}, bumped);
    Tensor m1 = imse_attention(s1, f, s1, p).affinity;
    Tensor m2 = imse_attention(s2, f, s2, p).affinity;
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(m1.at(0, j) == m2.at(0, j));
        CHECK(m1.at(2, j) == m2.at(2, j));
        CHECK(m1.at(1, j) != m2.at(1, j));
    }
}

TEST_CASE("semantic alignment loss") {
    Tensor m = Tensor::from_data({2, 2}, {1, 3, 0, -2});
    Tensor ay = Tensor::from_data({2}, {3, 1});
    CHECK(semantic_alignment_loss(m, ay).item() == doctest::Approx(1.0));

    // pooled affinity equal to the prototype gives exactly zero
    Tensor m2 = Tensor::from_data({2, 2}, {3, 1, 1, 0.5});
    Tensor ay2 = Tensor::from_data({2}, {3, 1});
    CHECK(semantic_alignment_loss(m2, ay2).item() == 0.0);

    // single-column affinity pools to that column
    Tensor m3 = Tensor::from_data({3, 1}, {0.5, -1, 2});
    Tensor ay3 = Tensor::from_data({3}, {0.5, -1, 2});
    CHECK(semantic_alignment_loss(m3, ay3).item() == 0.0);

    // nonnegative on random pairs
    std::mt19937_64 rng(24);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor mm = random_tensor({5, 6}, rng);
        Tensor aa = random_tensor({5}, rng);
        CHECK(semantic_alignment_loss(mm, aa).item() >= 0.0);
    }
}

TEST_CASE("attribute communication") {
    std::mt19937_64 rng(25);
    DsvtmConfig cfg;
    cfg.n_attrs = 6;
    cfg.n_patches = 4;
    cfg.dim = 3;
    cfg.groups = 3;
    cfg.n_hidden = 8;
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s_tilde = random_tensor({6, 3}, rng);
    Tensor s = random_tensor({6, 3}, rng);

    SUBCASE("zero second layer fixes the gate at one half") {
        p.w_g2 = Tensor::zeros({2, 6}, true);
        p.b_g2 = Tensor::zeros({6}, true);
        Tensor s_bar = attribute_communicate(s_tilde, s, p);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                CHECK(s_bar.at(i, j) == 0.5 * s_tilde.at(i, j) + s.at(i, j));
    }

    SUBCASE("zero adapted attributes leave the residual") {
        Tensor z = Tensor::zeros({6, 3});
        Tensor s_bar = attribute_communicate(z, s, p);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 3; ++j) CHECK(s_bar.at(i, j) == s.at(i, j));
    }

    SUBCASE("matches the loop oracle") {
        for (int rep = 0; rep < 10; ++rep) {
            DsvtmParams q = DsvtmParams::init(cfg, rng);
            Tensor st = random_tensor({6, 3}, rng);
            Tensor sr = random_tensor({6, 3}, rng);
            Tensor got = attribute_communicate(st, sr, q);
            auto ref = oracle::attribute_gate(to_mat(st), to_mat(sr), to_mat(q.w_g1),
                                              to_vec(q.b_g1), to_mat(q.w_g2), to_vec(q.b_g2));
            CHECK(max_abs_diff(got, ref) < 1e-10);
        }
    }
}

TEST_CASE("attribute activation") {
    std::mt19937_64 rng(26);
    DsvtmConfig cfg = small_config();
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s_bar = random_tensor({3, 2}, rng);
    Tensor s_tilde = random_tensor({3, 2}, rng);

    SUBCASE("zero MLP leaves both residuals") {
        DsvtmParams z = DsvtmParams::zeros(cfg);
        Tensor got = attribute_activate(s_bar, s_tilde, z);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(got.at(i, j) == s_bar.at(i, j) + s_tilde.at(i, j));
    }

    SUBCASE("matches the loop oracle") {
        Tensor got = attribute_activate(s_bar, s_tilde, p);
        auto mlp = oracle::mlp_rowwise(to_mat(s_bar), to_mat(p.w_m1), to_vec(p.b_m1),
                                       to_mat(p.w_m2), to_vec(p.b_m2));
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(std::abs(got.at(i, j) -
                               (mlp[i][j] + s_bar.at(i, j) + s_tilde.at(i, j))) < 1e-10);
    }

    SUBCASE("small inputs respond linearly") {
        auto mlp_only = [&](const Tensor& x) {
            Tensor full = attribute_activate(x, Tensor::zeros({3, 2}), p);
            return sub(sub(full, x), Tensor::zeros({3, 2}));
        };
        Tensor at_zero = mlp_only(Tensor::zeros({3, 2}));
        const double eps = 1e-5;
        Tensor gp = mlp_only(scale(s_bar, eps));
        Tensor gm = mlp_only(scale(s_bar, -eps));
        for (std::size_t i = 0; i < gp.size(); ++i) {
            const double one_sided = (gp[i] - at_zero[i]) / eps;
            const double central = (gp[i] - gm[i]) / (2.0 * eps);
            CHECK(std::abs(one_sided - central) < 1e-5);
        }
    }
}

TEST_CASE("imse forward: iteration semantics") {
    std::mt19937_64 rng(27);
    DsvtmConfig cfg = small_config();
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);

    SUBCASE("one iteration is the composition of the three stages") {
        ImseResult r = imse_forward(s, f, p);
        ImseStep step = imse_attention(s, f, s, p);
        Tensor s_bar = attribute_communicate(step.s_tilde, s, p);
        Tensor s_hat = attribute_activate(s_bar, step.s_tilde, p);
        for (std::size_t i = 0; i < s_hat.size(); ++i) CHECK(r.s_hat[i] == s_hat[i]);
        for (std::size_t i = 0; i < step.affinity.size(); ++i)
            CHECK(r.affinity[i] == step.affinity[i]);
    }

    SUBCASE("all-zero weights collapse to the residual closed form") {
        // With every matrix zero the attention stage returns S exactly and the
        // gate sits at one half, so each iteration yields (0.5*S + S) + S.
        DsvtmConfig cfg2 = cfg;
        cfg2.imse_iters = 2;
        DsvtmParams z = DsvtmParams::zeros(cfg2);
        ImseResult r = imse_forward(s, f, z);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                const double sv = s.at(i, j);
                CHECK(r.s_hat.at(i, j) == (0.5 * sv + sv) + sv);
            }
        for (std::size_t i = 0; i < r.affinity.size(); ++i) CHECK(r.affinity[i] == 0.0);
    }

    SUBCASE("distinct instances produce distinct adapted attributes") {
        SyntheticSpec dspec;
        dspec.noise = 0.0;
        Dataset ds = generate_synthetic(dspec);
        BackboneConfig bc;
        bc.noise = 0.0;
        Backbone bb(ds.table, bc);
        DsvtmConfig cfg3;
        cfg3.n_attrs = ds.table.num_attributes;
        cfg3.n_patches = bc.patches();
        cfg3.dim = bc.dim;
        cfg3.groups = ds.table.num_groups;
        cfg3.n_hidden = 2 * bc.patches();
        std::mt19937_64 rng3(5);
        DsvtmParams p3 = DsvtmParams::init(cfg3, rng3);
        Tensor sem = bb.embed_semantics(ds.table)[1].detach();
        Tensor fa = bb.extract_visual(ds.table, ds.train.front()).detach();
        Tensor fb = bb.extract_visual(ds.table, ds.train.back()).detach();
        REQUIRE(ds.train.front().label != ds.train.back().label);
        Tensor ha = imse_forward(sem, fa, p3).s_hat;
        Tensor hb = imse_forward(sem, fb, p3).s_hat;
        double max_row_dist = 0.0;
        for (std::size_t i = 0; i < ha.rows(); ++i) {
            double dist = 0.0;
            for (std::size_t j = 0; j < ha.cols(); ++j) {
                const double d = ha.at(i, j) - hb.at(i, j);
                dist += d * d;
            }
            max_row_dist = std::max(max_row_dist, std::sqrt(dist));
        }
        CHECK(max_row_dist > 0.0);
    }
}

TEST_CASE("smid attention: residual collapse and loop oracle") {
    std::mt19937_64 rng(28);
    DsvtmConfig cfg = small_config();
    Tensor s_hat = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);

    SUBCASE("zero value projection returns the patches") {
        DsvtmParams p = DsvtmParams::init(cfg, rng);
        p.w_vs = Tensor::zeros({2, 2}, true);
        p.b_vs = Tensor::zeros({2}, true);
        Tensor out = smid_attention(f, s_hat, p);
        for (std::size_t i = 0; i < f.size(); ++i) CHECK(out[i] == f[i]);
    }

    SUBCASE("zero query/key mixes values uniformly") {
        DsvtmParams p = DsvtmParams::init(cfg, rng);
        p.w_qf = Tensor::zeros({2, 2}, true);
        p.b_qf = Tensor::zeros({2}, true);
        Tensor out = smid_attention(f, s_hat, p);
        Tensor v = add_rowvec(matmul(s_hat, p.w_vs), p.b_vs);
        for (std::size_t j = 0; j < 2; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 3; ++i) mean += v.at(i, j) / 3.0;
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(out.at(i, j) - f.at(i, j) == doctest::Approx(mean).epsilon(1e-12));
        }
    }

    SUBCASE("matches the loop oracle") {
        for (int rep = 0; rep < 10; ++rep) {
            DsvtmParams p = DsvtmParams::init(cfg, rng);
            Tensor ff = random_tensor({4, 2}, rng);
            Tensor ss = random_tensor({3, 2}, rng);
            Tensor got = smid_attention(ff, ss, p);
            const oracle::Vec no_key_bias(2, 0.0);
            auto ref = oracle::cross_attention(to_mat(ff), to_mat(ss), to_mat(ff),
                                               to_mat(p.w_qf), to_vec(p.b_qf), to_mat(p.w_ks),
                                               no_key_bias, to_mat(p.w_vs), to_vec(p.b_vs),
                                               1.0);
            CHECK(max_abs_diff(got, ref.out) < 1e-10);
        }
    }
}

TEST_CASE("patch mixing") {
    std::mt19937_64 rng(29);
    DsvtmConfig cfg = small_config();

    SUBCASE("zero narrowing layer is the identity") {
        DsvtmParams p = DsvtmParams::init(cfg, rng);
        p.w_na = Tensor::zeros({8, 4}, true);
        p.b_na = Tensor::zeros({4}, true);
        Tensor f_tilde = random_tensor({4, 2}, rng);
        Tensor out = patch_mix(f_tilde, p);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == f_tilde[i]);
    }

    SUBCASE("matches the loop oracle and keeps the shape") {
        for (int rep = 0; rep < 10; ++rep) {
            DsvtmParams p = DsvtmParams::init(cfg, rng);
            Tensor f_tilde = random_tensor({4, 2}, rng);
            Tensor got = patch_mix(f_tilde, p);
            REQUIRE(got.rows() == 4);
            REQUIRE(got.cols() == 2);
            auto ref = oracle::patch_mix(to_mat(f_tilde), to_mat(p.w_ex), to_vec(p.b_ex),
                                         to_mat(p.w_se), to_vec(p.b_se), to_mat(p.w_na),
                                         to_vec(p.b_na));
            CHECK(max_abs_diff(got, ref) < 1e-10);
        }
    }
}

TEST_CASE("smid forward: zero weights are exactly the identity on patches") {
    std::mt19937_64 rng(30);
    DsvtmConfig cfg = small_config();
    DsvtmParams z = DsvtmParams::zeros(cfg);
    Tensor s = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);
    Tensor out = smid_forward(f, s, z);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(out[i] == f[i]);

    DsvtmConfig cfg2 = cfg;
    cfg2.imse_iters = 3;
    DsvtmOutput full = dsvtm_forward(s, f, DsvtmParams::zeros(cfg2));
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(full.f_hat[i] == f[i]);
}

TEST_CASE("smid forward gradients pass the finite-difference audit") {
    std::mt19937_64 rng(31);
    DsvtmConfig cfg = small_config();
    cfg.imse_iters = 2;
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);
    std::vector<std::pair<std::string, Tensor>> named;
    p.collect("dsvtm.", named);
    std::vector<Tensor> params;
    for (auto& [name, t] : named) params.push_back(t);
    auto loss = [&] {
        DsvtmOutput out = dsvtm_forward(s, f, p);
        return add(sum(out.f_hat), sum(out.s_hat));
    };
    CHECK(grad_check(loss, params) < 1e-3);
}

TEST_CASE("patch permutation equivariance") {
    std::mt19937_64 rng(32);
    DsvtmConfig cfg = small_config();
    DsvtmParams p = DsvtmParams::init(cfg, rng);
    Tensor s_hat = random_tensor({3, 2}, rng);
    Tensor f = random_tensor({4, 2}, rng);

    std::vector<std::size_t> perm = {2, 0, 3, 1};
    std::vector<double> fp(8), wex(4 * 8), wna(8 * 4), bna(4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) fp[i * 2 + j] = f.at(perm[i], j);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t h = 0; h < 8; ++h) wex[i * 8 + h] = p.w_ex.at(perm[i], h);
    for (std::size_t h = 0; h < 8; ++h)
        for (std::size_t i = 0; i < 4; ++i) wna[h * 4 + i] = p.w_na.at(h, perm[i]);
    for (std::size_t i = 0; i < 4; ++i) bna[i] = p.b_na[perm[i]];

    DsvtmParams q = p;
    q.w_ex = Tensor::from_data({4, 8}, wex, true);
    q.w_na = Tensor::from_data({8, 4}, wna, true);
    q.b_na = Tensor::from_data({4}, bna, true);

    Tensor base = smid_forward(f, s_hat, p);
    Tensor permuted = smid_forward(Tensor::from_data({4, 2}, fp), s_hat, q);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(std::abs(permuted.at(i, j) - base.at(perm[i], j)) < 1e-12);
}

TEST_CASE("config invariants") {
    DsvtmConfig cfg = small_config();
    cfg.n_hidden = 4;  // not larger than n_patches
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_config();
    cfg.imse_iters = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    std::mt19937_64 rng(1);
    DsvtmParams p = DsvtmParams::init(small_config(), rng);
    CHECK_THROWS_AS(imse_attention(Tensor::zeros({5, 2}), Tensor::zeros({4, 2}),
                                   Tensor::zeros({5, 2}), p),
                    std::invalid_argument);
}

TEST_SUITE_END();
