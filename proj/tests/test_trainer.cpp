#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "somer/errors.hpp"
#include "somer/seeding.hpp"
#include "somer/trainer.hpp"

using namespace somer;

namespace {

Normalized toy_data(std::size_t users, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> g(0, 1);
    Dataset ds;
    ds.num_features = 3;
    ds.profile_dim = 2;
    for (std::size_t i = 0; i < users; ++i) {
        UserRecord r;
        r.user_id = "user" + std::to_string(100 + i);
        r.profile.dense = {static_cast<double>(i % 4), 1.0};
        for (int k = 0; k < 6; ++k) r.triplets.push_back({30.0 * u(rng), k % 3, g(rng) + static_cast<double>(i % 3)});
        std::sort(r.triplets.begin(), r.triplets.end(), [](auto& a, auto& b) { return a.t < b.t; });
        ds.users.push_back(r);
    }
    return normalize(ds);
}

TrainConfig toy_config() {
    TrainConfig c;
    c.encoder.hidden_dim = 8;
    c.encoder.num_layers = 1;
    c.encoder.num_heads = 2;
    c.batch_size = 4;
    c.max_epochs = 3;
    c.lr = 1e-3;
    c.seed = 42;
    return c;
}

}  // namespace

TEST_CASE("cosine_lr") {
    CHECK(cosine_lr(0, 100, 0.1) == 0.1);
    CHECK(std::abs(cosine_lr(100, 100, 0.1)) <= 1e-18);
    CHECK(std::abs(cosine_lr(50, 100, 0.1) - 0.05) <= 1e-15);
    double prev = 1.0;
    for (std::size_t s = 0; s <= 37; ++s) {
        const double lr = cosine_lr(s, 37, 1.0);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("adam_step") {
    SUBCASE("two hand-computed steps on a scalar") {
        ParamSet ps;
        auto& w = ps.add("w", Matrix::Constant(1, 1, 1.0));
        AdamState st = AdamState::zeros_like(ps);
        const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double x = 1.0, m = 0.0, v = 0.0;
        for (int t = 1; t <= 2; ++t) {
            const double g = t == 1 ? 0.5 : -2.0;
            w.grad(0, 0) = g;
            adam_step(ps, st, lr);
            m = b1 * m + (1 - b1) * g;
            v = b2 * v + (1 - b2) * g * g;
            const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
            x -= lr * mh / (std::sqrt(vh) + eps);
            CHECK(std::abs(w.value(0, 0) - x) <= 1e-12);
        }
        CHECK(st.step == 2);
    }
    SUBCASE("zero gradient leaves parameters and decays moments") {
        ParamSet ps;
        auto& w = ps.add("w", Matrix::Constant(2, 2, 3.0));
        AdamState st = AdamState::zeros_like(ps);
        w.grad.setConstant(1.0);
        adam_step(ps, st, 0.01);
        const Matrix after_first = w.value;
        const double m1 = st.m[0](0, 0);
        w.grad.setZero();
        adam_step(ps, st, 0.01);
        CHECK(std::abs(st.m[0](0, 0) - 0.9 * m1) <= 1e-15);
        // Bias-corrected momentum still moves the parameter; a fresh state with zero gradient does not.
        ParamSet fresh;
        auto& z = fresh.add("z", Matrix::Constant(2, 2, 3.0));
        AdamState zs = AdamState::zeros_like(fresh);
        adam_step(fresh, zs, 0.01);
        CHECK(z.value == Matrix::Constant(2, 2, 3.0));
        CHECK(after_first(0, 0) < 3.0);
    }
    SUBCASE("constant gradient steps approach lr") {
        ParamSet ps;
        auto& w = ps.add("w", Matrix::Zero(1, 1));
        AdamState st = AdamState::zeros_like(ps);
        double last = 0.0;
        for (int t = 0; t < 2000; ++t) {
            w.grad(0, 0) = 0.3;
            const double before = w.value(0, 0);
            adam_step(ps, st, 1e-3);
            last = before - w.value(0, 0);
        }
        CHECK(last == doctest::Approx(1e-3).epsilon(1e-6));
    }
    SUBCASE("non-finite gradient names its group and changes nothing") {
        ParamSet ps;
        ps.add("alpha", Matrix::Ones(1, 2));
        ps.add("beta", Matrix::Ones(1, 2));
        auto& a = ps.at("alpha");
        auto& b = ps.at("beta");
        AdamState st = AdamState::zeros_like(ps);
        a.grad.setConstant(1.0);
        b.grad(0, 1) = std::nan("");
        try {
            adam_step(ps, st, 0.1);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("beta") != std::string::npos);
        }
        CHECK(a.value == Matrix::Ones(1, 2));
        CHECK(st.step == 0);
    }
}

TEST_CASE("split_users and batch_ranges") {
    const Split s = split_users(100, 0.7, 0.15, 9);
    CHECK(s.train.size() == 70);
    CHECK(s.validation.size() == 15);
    CHECK(s.test.size() == 15);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.validation.begin(), s.validation.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 100);
    CHECK(split_users(100, 0.7, 0.15, 9).train == s.train);
    CHECK(split_users(100, 0.7, 0.15, 10).train != s.train);

    const auto kept = batch_ranges(10, 4, false);
    REQUIRE(kept.size() == 3);
    CHECK(kept[2].begin == 8);
    CHECK(kept[2].end == 10);
    const auto dropped = batch_ranges(9, 4, false);
    CHECK(dropped.size() == 2);
    CHECK(dropped.back().end == 8);
    const auto merged = batch_ranges(9, 4, true);
    CHECK(merged.size() == 2);
    CHECK(merged.back().end == 9);
    CHECK_THROWS_AS(batch_ranges(5, 0, false), ConfigError);
}

TEST_CASE("config validation and json") {
    TrainConfig c;
    CHECK(c.effective_batch_size(false) == 128);
    CHECK(c.effective_batch_size(true) == 32);
    c.train_fraction = 0.9;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    TrainConfig d;
    d.lr = 0;
    CHECK_THROWS_AS(d.validate(), ConfigError);

    TrainConfig base = toy_config();
    const TrainConfig merged = train_config_from_json({{"tau", 0.25}}, base);
    CHECK(merged.tau == 0.25);
    CHECK(merged.lr == base.lr);
    CHECK(merged.encoder.hidden_dim == 8);
    const TrainConfig round = train_config_from_json(to_json(merged));
    CHECK(round.tau == 0.25);
    CHECK(round.encoder == merged.encoder);
}

TEST_CASE("pretrain with zero epochs returns the initial model") {
    TrainConfig c = toy_config();
    c.max_epochs = 0;
    const Normalized data = toy_data(12, 1);
    const PretrainResult r = pretrain(data, EdgeList{}, c);
    CHECK(r.history.empty());
    CHECK(r.best_epoch == 0);
    const EncoderParams init(r.checkpoint.encoder.config(), derive_seed(c.seed, 0x1417));
    for (std::size_t g = 0; g < init.params().size(); ++g) {
        CHECK(r.checkpoint.encoder.params()[g].value == init.params()[g].value);
    }
}

TEST_CASE("pretrain is deterministic and keeps the best checkpoint") {
    const Normalized data = toy_data(20, 2);
    EdgeList edges;
    edges.add("user100", "user101");
    edges.add("user102", "user110");
    TrainConfig c = toy_config();
    const auto dir = std::filesystem::temp_directory_path() / "somer_test_trainer";
    std::filesystem::create_directories(dir);
    c.history_path = dir / "history.jsonl";
    const PretrainResult a = pretrain(data, edges, c);
    c.history_path.reset();
    const PretrainResult b = pretrain(data, edges, c);

    REQUIRE(a.history.size() == b.history.size());
    CHECK(a.history[0].train.total == b.history[0].train.total);
    CHECK(a.history[0].validation.total == b.history[0].validation.total);
    for (const auto& r : a.history) {
        CHECK(std::abs(r.train.total - (r.train.info_nce + r.train.lambda * r.train.network)) <= 1e-12);
        CHECK(a.best_validation <= r.validation.total);
    }
    for (std::size_t i = 1; i < a.history.size(); ++i) CHECK(a.history[i].lr <= a.history[i - 1].lr);

    std::ifstream in(dir / "history.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK_FALSE(j.contains("seconds"));
        ++lines;
    }
    CHECK(lines == a.history.size());

    // The stored checkpoint reproduces the best validation loss.
    JointConfig joint;
    joint.tau = c.tau;
    joint.lambda = c.lambda;
    joint.augment.gamma = c.gamma;
    joint.augment.time_span_days = data.stats.span_days();
    joint.augment.max_draws = a.checkpoint.encoder.config().max_seq_len;
    std::vector<UserRecord> val;
    for (auto i : a.split.validation) val.push_back(data.dataset.users[i]);
    const LossBreakdown again = evaluate_loss(val, edges, a.checkpoint.encoder, a.checkpoint.link, joint, 4,
                                              derive_seed(c.seed, 0x7a11d));
    CHECK(again.total == a.best_validation);
}

TEST_CASE("early stopping with patience one") {
    const Normalized data = toy_data(16, 3);
    TrainConfig c = toy_config();
    c.max_epochs = 6;
    c.patience = 1;
    c.min_delta = 1e9;  // no later epoch can count as an improvement
    const PretrainResult r = pretrain(data, EdgeList{}, c);
    CHECK(r.history.size() == 2);
    CHECK(r.best_epoch == 1);
    CHECK(r.best_validation == r.history[0].validation.total);
}

TEST_CASE("pretrain rejects splits too small to train") {
    TrainConfig c = toy_config();
    CHECK_THROWS_AS(pretrain(toy_data(3, 4), EdgeList{}, c), ConfigError);
    CHECK_THROWS_AS(pretrain(Normalized{}, EdgeList{}, c), ConfigError);
}

TEST_CASE("a spent time budget stops after the first epoch") {
    TrainConfig c = toy_config();
    c.max_epochs = 5;
    c.time_budget_seconds = 1e-9;
    const PretrainResult r = pretrain(toy_data(12, 5), EdgeList{}, c);
    CHECK(r.history.size() == 1);
}
