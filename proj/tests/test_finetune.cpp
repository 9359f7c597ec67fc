#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "somer/errors.hpp"
#include "somer/finetune.hpp"

using namespace somer;

namespace {

// Half the users carry label 1 with a shifted profile and shifted values.
Normalized labeled_data(std::size_t users, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> g(0, 0.3);
    Dataset ds;
    ds.num_features = 3;
    ds.profile_dim = 2;
    for (std::size_t i = 0; i < users; ++i) {
        const int label = static_cast<int>(i % 2);
        UserRecord r;
        r.user_id = "u" + std::to_string(1000 + i);
        r.profile.dense = {label ? 50.0 : 1.0, 1.0};
        for (int k = 0; k < 5; ++k) r.triplets.push_back({10.0 * u(rng), k % 3, g(rng) + 2.0 * label});
        std::sort(r.triplets.begin(), r.triplets.end(), [](auto& a, auto& b) { return a.t < b.t; });
        r.label = label;
        ds.users.push_back(r);
    }
    return normalize(ds);
}

Checkpoint small_checkpoint(const Normalized& data) {
    EncoderConfig base;
    base.hidden_dim = 8;
    base.num_layers = 1;
    base.num_heads = 2;
    Checkpoint c;
    c.encoder = EncoderParams(config_for(data.dataset, data.stats, base), 17);
    c.stats = data.stats;
    return c;
}

FinetuneConfig small_config() {
    FinetuneConfig c;
    c.lr = 1e-2;
    c.max_epochs = 50;
    c.batch_size = 8;
    c.hidden = 16;
    c.dropout = 0.0;
    c.freeze_encoder = true;
    c.seed = 3;
    c.patience = 50;
    return c;
}

}  // namespace

TEST_CASE("classifier head eval path") {
    std::mt19937_64 rng(1);
    ClassifierHead head(6, 2, 5, 0.3);
    head.running_mean = oracle::random_matrix(1, 5, rng);
    head.running_var = oracle::random_matrix(1, 5, rng).array().abs() + 0.5;
    head.params.at("head.bn.gain").value = oracle::random_matrix(1, 5, rng);
    head.params.at("head.fc1.b").value = oracle::random_matrix(1, 5, rng);
    const Matrix x = oracle::random_matrix(4, 6, rng);
    const Vector z = head.logits(x);

    const Matrix& w1 = head.params.at("head.fc1.w").value;
    const Matrix& b1 = head.params.at("head.fc1.b").value;
    const Matrix& gain = head.params.at("head.bn.gain").value;
    const Matrix& bias = head.params.at("head.bn.bias").value;
    const Matrix& w2 = head.params.at("head.fc2.w").value;
    const double b2 = head.params.at("head.fc2.b").value(0, 0);
    for (Eigen::Index r = 0; r < 4; ++r) {
        double out = b2;
        for (Eigen::Index h = 0; h < 5; ++h) {
            double a = b1(0, h);
            for (Eigen::Index c = 0; c < 6; ++c) a += x(r, c) * w1(h, c);
            a = std::max(a, 0.0);
            a = (a - head.running_mean(h)) / std::sqrt(head.running_var(h) + head.bn_eps) * gain(0, h) + bias(0, h);
            out += a * w2(0, h);
        }
        CHECK(std::abs(z(r) - out) <= 1e-12);
    }
    // Rows are scored independently and dropout is off.
    for (Eigen::Index r = 0; r < 4; ++r) CHECK(head.logits(x.row(r))(0) == doctest::Approx(z(r)).epsilon(1e-14));
    CHECK(head.logits(x) == z);

    const ClassifierHead back = classifier_head_from_json(to_json(head));
    CHECK(back.logits(x) == z);
    CHECK_THROWS_AS(head.logits(Matrix::Zero(1, 5)), DimensionError);
    CHECK_THROWS_AS(ClassifierHead(6, 1, 5, 1.0), ConfigError);
}

TEST_CASE("running statistics use the unbiased batch variance") {
    ClassifierHead head(2, 1, 2, 0.0);
    RowVector mean(2), var(2);
    mean << 1.0, -2.0;
    var << 0.5, 2.0;
    head.update_running(mean, var, 5);
    CHECK(head.running_mean(0) == doctest::Approx(0.1));
    CHECK(head.running_mean(1) == doctest::Approx(-0.2));
    CHECK(head.running_var(0) == doctest::Approx(0.9 + 0.1 * 0.5 * 5.0 / 4.0));
    CHECK(head.running_var(1) == doctest::Approx(0.9 + 0.1 * 2.0 * 5.0 / 4.0));
}

TEST_CASE("a zero output layer predicts one half") {
    const Normalized data = labeled_data(10, 1);
    const Checkpoint ckpt = small_checkpoint(data);
    ClassifierHead head(ckpt.encoder.config().embedding_dim(), 5, 16, 0.0);
    head.params.at("head.fc2.w").value.setZero();
    const auto p = predict(ckpt.encoder, head, data.dataset.users);
    for (double v : p) CHECK(v == 0.5);

    ag::Tape tape;
    std::mt19937_64 rng(0);
    const Matrix emb = encode_users(data.dataset.users, ckpt.encoder);
    ag::Var z = head.forward_train(tape, tape.constant(emb), rng, nullptr);
    Vector y(10);
    for (Eigen::Index i = 0; i < 10; ++i) y(i) = static_cast<double>(i % 2);
    CHECK(ag::bce_with_logits(z, y).value()(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("predict does not depend on batch composition") {
    const Normalized data = labeled_data(12, 2);
    const Checkpoint ckpt = small_checkpoint(data);
    const ClassifierHead head(ckpt.encoder.config().embedding_dim(), 9, 16, 0.3);
    const auto all = predict(ckpt.encoder, head, data.dataset.users, 2);
    for (std::size_t i = 0; i < 12; ++i) {
        const auto one = predict(ckpt.encoder, head, std::span(data.dataset.users).subspan(i, 1));
        CHECK(one[0] == doctest::Approx(all[i]).epsilon(1e-13));
    }
}

TEST_CASE("f1_eval") {
    const std::vector<double> p{0.9, 0.5, 0.49, 0.1};
    const std::vector<int> y{1, 0, 1, 0};
    const auto s = f1_eval(p, y);
    CHECK(s.precision == 0.5);
    CHECK(s.recall == 0.5);
    CHECK(s.f1 == 0.5);
    CHECK(f1_eval(p, y, 0.45).recall == 1.0);
    CHECK_THROWS_AS(f1_eval(p, std::vector<int>{1}), DimensionError);
}

TEST_CASE("finetune") {
    const Normalized data = labeled_data(60, 4);
    const Checkpoint ckpt = small_checkpoint(data);

    SUBCASE("a frozen encoder on separable users drives the loss down") {
        const FinetuneResult r = finetune(ckpt, data, small_config());
        REQUIRE(!r.history.empty());
        CHECK(r.history.back().train_loss < 0.1);
        CHECK(r.labeled.size() == 60);
        for (std::size_t g = 0; g < ckpt.encoder.params().size(); ++g) {
            CHECK(r.checkpoint.encoder.params()[g].value == ckpt.encoder.params()[g].value);
        }
        CHECK(!r.checkpoint.head.is_null());

        std::vector<UserRecord> test;
        std::vector<int> y;
        for (std::size_t i : r.split.test) {
            test.push_back(data.dataset.users[r.labeled[i]]);
            y.push_back(*test.back().label);
        }
        const auto probs = predict(r.checkpoint.encoder, r.head, test);
        CHECK(f1_eval(probs, y).f1 == 1.0);
    }
    SUBCASE("full fine-tuning moves the encoder and is reproducible") {
        FinetuneConfig cfg = small_config();
        cfg.freeze_encoder = false;
        cfg.max_epochs = 3;
        cfg.dropout = 0.3;
        const FinetuneResult a = finetune(ckpt, data, cfg);
        const FinetuneResult b = finetune(ckpt, data, cfg);
        REQUIRE(a.history.size() == b.history.size());
        for (std::size_t e = 0; e < a.history.size(); ++e) {
            CHECK(a.history[e].train_loss == b.history[e].train_loss);
            CHECK(a.history[e].validation_loss == b.history[e].validation_loss);
        }
        bool moved = false;
        for (std::size_t g = 0; g < ckpt.encoder.params().size(); ++g) {
            moved = moved || a.checkpoint.encoder.params()[g].value != ckpt.encoder.params()[g].value;
        }
        CHECK(moved);
    }
    SUBCASE("label problems") {
        Normalized one_class = data;
        for (auto& u : one_class.dataset.users) u.label = 1;
        CHECK_THROWS_AS(finetune(ckpt, one_class, small_config()), DataError);
        Normalized unlabeled = data;
        for (auto& u : unlabeled.dataset.users) u.label.reset();
        CHECK_THROWS_AS(finetune(ckpt, unlabeled, small_config()), DataError);
        Normalized bad = data;
        bad.dataset.users[0].label = 2;
        CHECK_THROWS_AS(finetune(ckpt, bad, small_config()), DataError);
    }
    SUBCASE("config validation") {
        FinetuneConfig cfg = small_config();
        cfg.batch_size = 1;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        cfg = small_config();
        cfg.train_fraction = 0.9;
        cfg.val_fraction = 0.2;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        const FinetuneConfig back = finetune_config_from_json(to_json(small_config()));
        CHECK(back.lr == small_config().lr);
        CHECK(back.freeze_encoder);
    }
}
