#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "psvma/training.hpp"

using namespace psvma;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "psvma_training_tests";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_SUITE_BEGIN("training");

TEST_CASE("classification loss: limits, uniform value, formula oracle") {
    Tensor dominant = Tensor::from_data({3}, {40.0, 0.0, 0.0});
    CHECK(classification_loss(dominant, 0, 1.0, false).item() < 1e-12);

    Tensor equal = Tensor::from_data({5}, {0.3, 0.3, 0.3, 0.3, 0.3});
    CHECK(classification_loss(equal, 2, 1.0, false).item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-12));

    const double tau = 0.1;
    const std::vector<double> scores = {0.8, -0.1, 0.4};
    Tensor st = Tensor::from_data({3}, scores);
    long double denom = 0.0L;
    for (double s : scores) denom += expl((long double)(s / tau));
    const double expect = (double)(logl(denom) - (long double)(scores[1] / tau));
    CHECK(std::abs(classification_loss(st, 1, tau, true).item() - expect) < 1e-12);

    CHECK_THROWS_AS(classification_loss(st, 7, tau, true), std::invalid_argument);
}

TEST_CASE("debias loss: zero at matched statistics, hand case, oracle") {
    AttributeTable t;
    t.num_classes = 4;
    t.num_attributes = 2;
    t.num_groups = 1;
    t.groups = {{0, 1}};
    t.class_names = {"a", "b", "c", "d"};
    t.prototypes = {{1, 0}, {0, 1}, {1, 1}, {0.5, 1}};
    t.seen_ids = {0, 1};
    t.unseen_ids = {2, 3};

    Tensor same = Tensor::from_data({4}, {0.3, 0.7, 0.3, 0.7});
    CHECK(debias_loss(same, t).item() == 0.0);

    Tensor gap = Tensor::from_data({4}, {1.0, 1.0, 0.0, 0.0});
    CHECK(debias_loss(gap, t).item() == doctest::Approx(1.0).epsilon(1e-12));

    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> s(4);
        for (auto& v : s) v = u(rng);
        const double as = (s[0] + s[1]) / 2, au = (s[2] + s[3]) / 2;
        const double bs = (s[0] * s[0] + s[1] * s[1]) / 2 - as * as;
        const double bu = (s[2] * s[2] + s[3] * s[3]) / 2 - au * au;
        const double expect = (as - au) * (as - au) + (bs - bu) * (bs - bu);
        CHECK(std::abs(debias_loss(Tensor::from_data({4}, s), t).item() - expect) < 1e-12);
    }

    AttributeTable empty_unseen = t;
    empty_unseen.unseen_ids.clear();
    CHECK_THROWS_AS(debias_loss(same, empty_unseen), std::invalid_argument);
}

TEST_CASE("total loss weighting") {
    LossParts parts{Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(5.0),
                    Tensor::scalar(7.0)};
    TrainSettings zero;
    zero.lambda_sem = zero.lambda_kl = zero.lambda_deb = 0.0;
    CHECK(total_loss(parts, zero).item() == 2.0);

    TrainSettings cub;  // fine-grained regime weights
    cub.lambda_sem = 0.5;
    cub.lambda_kl = 5.0;
    cub.lambda_deb = 0.001;
    CHECK(total_loss(parts, cub).item() ==
          doctest::Approx(2.0 + 0.5 * 3.0 + 5.0 * 5.0 + 0.001 * 7.0).epsilon(1e-12));

    TrainSettings awa;  // coarse-grained regime weights
    awa.lambda_sem = 0.5;
    awa.lambda_kl = 5.0;
    awa.lambda_deb = 0.2;
    CHECK(total_loss(parts, awa).item() ==
          doctest::Approx(2.0 + 0.5 * 3.0 + 5.0 * 5.0 + 0.2 * 7.0).epsilon(1e-12));

    LossParts bad{Tensor::scalar(std::nan("")), parts.l_sem, parts.d_kl, parts.l_deb};
    CHECK_THROWS_WITH_AS(total_loss(bad, awa), "classification loss is not finite",
                         std::runtime_error);
}

TEST_CASE("model forward emits coherent shapes and decisions") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), 7);
    auto feats = model.visual_features(ds.train[0]);
    REQUIRE(feats.size() == 3);
    CHECK(feats[0].rows() == 4);
    CHECK(feats[1].rows() == 16);
    CHECK(feats[2].rows() == 64);

    auto fwd = model.forward(feats, ds.train[0].label);
    CHECK(fwd.scores_all.size() == ds.table.num_classes);
    CHECK(fwd.scores_seen.size() == ds.table.seen_ids.size());
    CHECK(fwd.fused.size() == 8);
    CHECK(fwd.p.size() == 3);
    for (std::size_t g = 0; g < 3; ++g) {
        CHECK(fwd.certainties[g] == certainty(fwd.p[g]));
        CHECK(fwd.certainties[fwd.teacher] >= fwd.certainties[g]);
        CHECK(fwd.certainties[fwd.student] <= fwd.certainties[g]);
    }
    CHECK(fwd.d_kl.item() >= 0.0);
    CHECK(fwd.l_sem.item() >= 0.0);
}

TEST_CASE("complete loss passes the finite-difference audit") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), 7);
    TrainSettings settings = fixtures::quick_settings();
    // trimmed coordinate sample keeps this a quick regression; the acceptance
    // suite runs the full 200-coordinate audit
    CHECK(model_grad_check(model, ds, settings, 2, 1e-5, 20) < 1e-3);
}

TEST_CASE("zero KL weight leaves gradients bit-identical to a branchless loss") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), 3);
    TrainSettings s = fixtures::quick_settings();
    s.lambda_kl = 0.0;

    auto build_parts = [&] {
        auto feats = model.visual_features(ds.train[0]);
        auto fwd = model.forward(feats, ds.train[0].label);
        Tensor l_cls = classification_loss(fwd.scores_seen,
                                           ds.table.seen_index(ds.train[0].label),
                                           model.config().tau, true);
        Tensor l_deb = debias_loss(fwd.scores_all, ds.table);
        return LossParts{l_cls, fwd.l_sem, fwd.d_kl, l_deb};
    };

    model.zero_grad();
    backward(total_loss(build_parts(), s));
    std::vector<std::vector<double>> with_branch;
    for (auto& [name, t] : model.parameters()) with_branch.push_back(t.grad());

    model.zero_grad();
    LossParts parts = build_parts();
    Tensor manual = add(add(parts.l_cls, scale(parts.l_sem, s.lambda_sem)),
                        scale(parts.l_deb, s.lambda_deb));
    backward(manual);
    std::size_t i = 0;
    for (auto& [name, t] : model.parameters()) {
        CHECK(t.grad() == with_branch[i]);
        ++i;
    }
}

TEST_CASE("training smoke: finite losses and seed determinism") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    TrainSettings s = fixtures::quick_settings(2);

    PsvmaModel a(ds.table, fixtures::tiny_model_config(ds), s.seed);
    TrainResult ra = train(ds, a, s);
    REQUIRE(ra.log.size() == 2);
    for (const EpochRow& row : ra.log) {
        CHECK(std::isfinite(row.total));
        CHECK(std::isfinite(row.l_cls));
        CHECK(row.seen_val_acc >= 0.0);
    }

    PsvmaModel b(ds.table, fixtures::tiny_model_config(ds), s.seed);
    TrainResult rb = train(ds, b, s);
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].first == pb[i].first);
        CHECK(pa[i].second.data() == pb[i].second.data());
    }
}

TEST_CASE("short training reduces the classification loss") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec(9));
    TrainSettings s = fixtures::quick_settings(8);
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), s.seed);
    TrainResult r = train(ds, model, s);
    CHECK(r.log.back().l_cls < r.log.front().l_cls);
}

TEST_CASE("checkpoint round-trip preserves the forward function bit-exactly") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    TrainSettings s = fixtures::quick_settings(1);
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), s.seed);
    TrainResult r = train(ds, model, s, "batch = 8");

    auto feats = model.visual_features(ds.test_seen[0]);
    Tensor before = model.forward(feats, ds.test_seen[0].label).scores_all;

    auto path = temp_file("roundtrip.ckpt");
    save_checkpoint(r.checkpoint, path.string());
    Checkpoint loaded = load_checkpoint(path.string());
    CHECK(loaded.config_text == "batch = 8");
    CHECK(loaded.epoch == 1);

    PsvmaModel fresh(ds.table, fixtures::tiny_model_config(ds), 999);
    apply_checkpoint(fresh, loaded);
    Tensor after = fresh.forward(feats, ds.test_seen[0].label).scores_all;
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("checkpoint failure modes") {
    Dataset ds = generate_synthetic(fixtures::tiny_spec());
    PsvmaModel model(ds.table, fixtures::tiny_model_config(ds), 1);
    Checkpoint ckpt = snapshot(model, "", 0, "");
    auto path = temp_file("whole.ckpt");
    save_checkpoint(ckpt, path.string());

    SUBCASE("truncation") {
        auto cut = temp_file("truncated.ckpt");
        {
            std::ifstream in(path, std::ios::binary);
            std::string all((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
            std::ofstream out(cut, std::ios::binary);
            out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
        }
        CHECK_THROWS_WITH_AS(load_checkpoint(cut.string()), doctest::Contains("corrupt"),
                             std::runtime_error);
    }

    SUBCASE("shape mismatch names the parameter") {
        SyntheticSpec other = fixtures::tiny_spec();
        other.attributes = 6;
        other.groups = 2;
        Dataset ds2 = generate_synthetic(other);
        PsvmaModel narrow(ds2.table, fixtures::tiny_model_config(ds2), 1);
        CHECK_THROWS_WITH_AS(apply_checkpoint(narrow, ckpt),
                             doctest::Contains("dsvtm1.imse.w_g1"), std::runtime_error);
    }

    SUBCASE("unknown names are rejected") {
        Checkpoint extra = ckpt;
        extra.entries["mystery.w"] = {{2, 2}, {1, 2, 3, 4}};
        CHECK_THROWS_WITH_AS(apply_checkpoint(model, extra),
                             doctest::Contains("unknown parameter"), std::runtime_error);
    }

    SUBCASE("bad magic") {
        auto bad = temp_file("bad_magic.ckpt");
        std::ofstream out(bad, std::ios::binary);
        out << "NOTACKPT0 some junk";
        out.close();
        CHECK_THROWS_WITH_AS(load_checkpoint(bad.string()), doctest::Contains("corrupt"),
                             std::runtime_error);
    }
}

TEST_CASE("epoch log format") {
    std::vector<EpochRow> log(2);
    log[0] = {1, 0.5, 0.25, 0.1, 0.01, 1.0, 50.0};
    log[1] = {2, 0.4, 0.2, 0.05, 0.01, 0.8, 60.0};
    auto path = temp_file("log.csv");
    write_epoch_log(log, path.string());
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,l_cls,l_sem,d_kl,l_deb,total,seen_val_acc");
    std::string row;
    std::getline(in, row);
    CHECK(row.substr(0, 2) == "1,");
}

TEST_SUITE_END();
