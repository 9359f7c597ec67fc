#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "somer/encoder.hpp"
#include "somer/errors.hpp"

using namespace somer;

namespace {

EncoderConfig small_config(std::size_t k = 4, std::size_t layers = 1, std::size_t heads = 2) {
    EncoderConfig c;
    c.hidden_dim = k;
    c.num_layers = layers;
    c.num_heads = heads;
    c.num_features = 3;
    c.profile_dim = 2;
    c.max_seq_len = 16;
    return c;
}

std::vector<TripletEvent> random_triplets(std::size_t n, std::size_t features, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> g(0, 1);
    std::vector<TripletEvent> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({u(rng), static_cast<int>(rng() % features), g(rng)});
    return out;
}

UserRecord random_user(const std::string& id, std::size_t n, std::mt19937_64& rng) {
    UserRecord u;
    u.user_id = id;
    u.triplets = random_triplets(n, 3, rng);
    u.profile.dense = {std::normal_distribution<double>(0, 1)(rng), 0.3};
    return u;
}

// Scalar-loop transcription of the encoder for one user.
struct Reference {
    const ParamSet& p;
    std::size_t K, H, L;

    const Matrix& w(const std::string& n) const { return p.at(n).value; }

    // y = W tanh(w2 x + b) for a scalar or vector x.
    std::vector<double> ffn_tanh(const std::string& prefix, const std::vector<double>& x) const {
        const Matrix& w2 = w(prefix + ".w2");
        const Matrix& b = w(prefix + ".b");
        const Matrix& w1 = w(prefix + ".w1");
        std::vector<double> hidden(static_cast<std::size_t>(w2.rows()));
        for (Eigen::Index r = 0; r < w2.rows(); ++r) {
            double s = b(0, r);
            for (Eigen::Index c = 0; c < w2.cols(); ++c) s += w2(r, c) * x[static_cast<std::size_t>(c)];
            hidden[static_cast<std::size_t>(r)] = std::tanh(s);
        }
        std::vector<double> out(static_cast<std::size_t>(w1.rows()));
        for (Eigen::Index r = 0; r < w1.rows(); ++r) {
            double s = 0;
            for (Eigen::Index c = 0; c < w1.cols(); ++c) s += w1(r, c) * hidden[static_cast<std::size_t>(c)];
            out[static_cast<std::size_t>(r)] = s;
        }
        return out;
    }

    static std::vector<double> affine(const Matrix& wt, const Matrix* b, const std::vector<double>& x) {
        std::vector<double> out(static_cast<std::size_t>(wt.rows()));
        for (Eigen::Index r = 0; r < wt.rows(); ++r) {
            double s = b ? (*b)(0, r) : 0.0;
            for (Eigen::Index c = 0; c < wt.cols(); ++c) s += wt(r, c) * x[static_cast<std::size_t>(c)];
            out[static_cast<std::size_t>(r)] = s;
        }
        return out;
    }

    static std::vector<double> norm(const std::vector<double>& x, const Matrix& g, const Matrix& b) {
        double mean = 0, var = 0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            y[i] = g(0, static_cast<Eigen::Index>(i)) * (x[i] - mean) / std::sqrt(var + 1e-5) + b(0, static_cast<Eigen::Index>(i));
        return y;
    }

    std::vector<std::vector<double>> embed(const std::vector<TripletEvent>& tr) const {
        std::vector<std::vector<double>> x;
        for (const auto& e : tr) {
            auto et = ffn_tanh("time", {e.t});
            auto ev = ffn_tanh("value", {e.v});
            std::vector<double> row(K);
            for (std::size_t k = 0; k < K; ++k) row[k] = et[k] + ev[k] + w("feature.table")(e.f, static_cast<Eigen::Index>(k));
            x.push_back(row);
        }
        return x;
    }

    std::vector<std::vector<double>> layer(const std::vector<std::vector<double>>& x, std::size_t l) const {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const std::size_t n = x.size(), P = K / H;
        std::vector<std::vector<double>> q, k, v;
        for (const auto& r : x) {
            q.push_back(affine(w(pre + "wq"), nullptr, r));
            k.push_back(affine(w(pre + "wk"), nullptr, r));
            v.push_back(affine(w(pre + "wv"), nullptr, r));
        }
        std::vector<std::vector<double>> out;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> heads(K, 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                std::vector<double> s(n);
                for (std::size_t j = 0; j < n; ++j) {
                    double d = 0;
                    for (std::size_t c = 0; c < P; ++c) d += q[i][h * P + c] * k[j][h * P + c];
                    s[j] = d / std::sqrt(static_cast<double>(P));
                }
                const auto a = oracle::softmax(s);
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t c = 0; c < P; ++c) heads[h * P + c] += a[j] * v[j][h * P + c];
            }
            const Matrix& bo = w(pre + "bo");
            auto merged = affine(w(pre + "wo"), &bo, heads);
            for (std::size_t c = 0; c < K; ++c) merged[c] += x[i][c];
            const auto h1 = norm(merged, w(pre + "ln1.gain"), w(pre + "ln1.bias"));
            const Matrix& b1 = w(pre + "ffn.b1");
            auto inner = affine(w(pre + "ffn.w1"), &b1, h1);
            for (auto& z : inner) z = std::max(z, 0.0);
            const Matrix& b2 = w(pre + "ffn.b2");
            auto ff = affine(w(pre + "ffn.w2"), &b2, inner);
            for (std::size_t c = 0; c < K; ++c) ff[c] += h1[c];
            out.push_back(norm(ff, w(pre + "ln2.gain"), w(pre + "ln2.bias")));
        }
        return out;
    }

    std::vector<double> user(const UserRecord& u) const {
        auto x = embed(u.triplets);
        for (std::size_t l = 0; l < L; ++l) x = layer(x, l);
        std::vector<double> scores;
        for (const auto& r : x) scores.push_back(ffn_tanh("fusion", r)[0]);
        const auto a = oracle::softmax(scores);
        std::vector<double> e(2 * K, 0.0);
        for (std::size_t n = 0; n < x.size(); ++n)
            for (std::size_t c = 0; c < K; ++c) e[c] += a[n] * x[n][c];
        const auto prof = ffn_tanh("profile", u.profile.dense);
        for (std::size_t c = 0; c < K; ++c) e[K + c] = prof[c];
        return e;
    }
};

}  // namespace

TEST_CASE("config validation and hashing") {
    EncoderConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    CHECK(c.head_dim() == 2);
    CHECK(c.embedding_dim() == 8);
    EncoderConfig bad = c;
    bad.num_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(encoder_config_from_json(to_json(c)) == c);
    CHECK(config_hash(c) == config_hash(encoder_config_from_json(to_json(c))));
    CHECK(config_hash(c) != config_hash(small_config(8)));
}

TEST_CASE("embed_triplets") {
    SUBCASE("zero parameters give zero output") {
        const EncoderParams p = EncoderParams::zeros(small_config());
        std::mt19937_64 rng(1);
        const std::vector<std::vector<TripletEvent>> seqs{random_triplets(5, 3, rng)};
        const auto out = embed_triplets(TripletBatch::pack(seqs), p);
        CHECK(out[0].cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("hand-set K = 2 weights") {
        EncoderConfig c = small_config(2, 1, 1);
        EncoderParams p = EncoderParams::zeros(c);
        auto& ps = p.params();
        ps.at("time.w2").value << 1.0, 0.5;
        ps.at("time.b").value << 0.1, -0.2;
        ps.at("time.w1").value << 1, 0, 0, 1;
        ps.at("value.w2").value << -0.3, 0.7;
        ps.at("value.b").value << 0.0, 0.4;
        ps.at("value.w1").value << 2, 1, 0, -1;
        ps.at("feature.table").value.row(0) << 0.25, -0.5;
        const std::vector<std::vector<TripletEvent>> seqs{{{1.0, 0, 2.0}}};
        const Matrix out = embed_triplets(TripletBatch::pack(seqs), p)[0];
        const double et0 = std::tanh(1.0 + 0.1), et1 = std::tanh(0.5 - 0.2);
        const double h0 = std::tanh(-0.6), h1 = std::tanh(1.4 + 0.4);
        CHECK(std::abs(out(0, 0) - (et0 + 2 * h0 + h1 + 0.25)) <= 1e-12);
        CHECK(std::abs(out(0, 1) - (et1 - h1 - 0.5)) <= 1e-12);
    }
    SUBCASE("time zero leaves only the value and feature paths") {
        EncoderConfig c = small_config(2, 1, 1);
        EncoderParams p = EncoderParams::zeros(c);
        p.params().at("time.w2").value << 1, 0;
        p.params().at("time.w1").value << 1, 0, 0, 1;
        p.params().at("feature.table").value.row(1) << 3, 4;
        const std::vector<std::vector<TripletEvent>> seqs{{{0.0, 1, 5.0}}};
        const Matrix out = embed_triplets(TripletBatch::pack(seqs), p)[0];
        CHECK(out(0, 0) == 3.0);
        CHECK(out(0, 1) == 4.0);
    }
    SUBCASE("feature index out of range") {
        const EncoderParams p(small_config(), 1);
        const std::vector<std::vector<TripletEvent>> seqs{{{0.0, 3, 1.0}}};
        CHECK_THROWS_AS(embed_triplets(TripletBatch::pack(seqs), p), DataError);
    }
}

TEST_CASE("transformer and fusion") {
    const EncoderConfig c = small_config(4, 2, 2);
    const EncoderParams p(c, 3);
    SUBCASE("a single key attends to itself") {
        const std::vector<std::vector<TripletEvent>> seqs{{{0.4, 1, 0.7}}};
        const auto batch = TripletBatch::pack(seqs);
        const auto x = embed_triplets(batch, p);
        Matrix weights;
        fuse(transformer_forward(x, batch, p), batch, p, &weights);
        CHECK(weights(0, 0) == 1.0);
    }
    SUBCASE("identical positions get identical outputs and equal weights") {
        const std::vector<std::vector<TripletEvent>> seqs{{{0.4, 1, 0.7}, {0.4, 1, 0.7}}};
        const auto batch = TripletBatch::pack(seqs);
        const auto h = transformer_forward(embed_triplets(batch, p), batch, p);
        CHECK((h[0].row(0) - h[0].row(1)).cwiseAbs().maxCoeff() == 0.0);
        Matrix weights;
        const Matrix e = fuse(h, batch, p, &weights);
        CHECK(std::abs(weights(0, 0) - 0.5) <= 1e-15);
        CHECK((e.row(0) - h[0].row(0)).cwiseAbs().maxCoeff() <= 1e-12);
    }
    SUBCASE("fusion weights form a distribution over real positions") {
        std::mt19937_64 rng(4);
        const std::vector<std::vector<TripletEvent>> seqs{random_triplets(7, 3, rng), random_triplets(3, 3, rng)};
        const auto batch = TripletBatch::pack(seqs);
        Matrix weights;
        fuse(transformer_forward(embed_triplets(batch, p), batch, p), batch, p, &weights);
        for (Eigen::Index b = 0; b < 2; ++b) CHECK(std::abs(weights.row(b).sum() - 1.0) <= 1e-12);
        for (Eigen::Index n = 3; n < 7; ++n) CHECK(weights(1, n) == 0.0);
    }
}

TEST_CASE("encode_user matches the scalar reference") {
    for (std::size_t layers : {1u, 2u}) {
        const EncoderConfig c = small_config(4, layers, 2);
        const EncoderParams p(c, 17 + layers);
        std::mt19937_64 rng(5);
        for (int trial = 0; trial < 5; ++trial) {
            const UserRecord u = random_user("u", 3 + static_cast<std::size_t>(trial), rng);
            const RowVector got = encode_user(u, p);
            const auto want = Reference{p.params(), 4, 2, layers}.user(u);
            REQUIRE(got.size() == 8);
            for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(got(static_cast<Eigen::Index>(i)) - want[i]) <= 1e-10);
        }
    }
}

TEST_CASE("encoding is independent of batch position and padding") {
    const EncoderConfig c = small_config(8, 2, 2);
    const EncoderParams p(c, 6);
    std::mt19937_64 rng(7);
    std::vector<UserRecord> users;
    for (int i = 0; i < 8; ++i) users.push_back(random_user("u" + std::to_string(i), 2 + static_cast<std::size_t>(i) * 2, rng));
    std::swap(users[0], users[7]);
    const RowVector alone = encode_user(users[0], p);

    std::vector<std::vector<TripletEvent>> seqs;
    std::vector<Profile> profiles;
    for (auto it = users.rbegin(); it != users.rend(); ++it) {
        seqs.push_back(it->triplets);
        profiles.push_back(it->profile);
    }
    const Matrix batch = encode_batch(TripletBatch::pack(seqs, 40), profiles, p);
    CHECK((batch.row(7) - alone).cwiseAbs().maxCoeff() <= 1e-10);

    const Matrix all = encode_users(users, p, 2);
    for (std::size_t i = 0; i < users.size(); ++i) {
        CHECK((all.row(static_cast<Eigen::Index>(i)) - encode_user(users[i], p)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((all.row(static_cast<Eigen::Index>(i)) - batch.row(static_cast<Eigen::Index>(7 - i))).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("default configuration embeds into 128 dimensions") {
    EncoderConfig c;
    const EncoderParams p(c, 1);
    std::mt19937_64 rng(8);
    UserRecord u = random_user("u", 6, rng);
    CHECK(encode_user(u, p).size() == 128);
    UserRecord twin = u;
    twin.user_id = "twin";
    CHECK(encode_user(u, p) == encode_user(twin, p));
}

TEST_CASE("profile embedding") {
    SUBCASE("zero profile with zero bias") {
        const EncoderParams p(small_config(), 2);
        Profile prof;
        prof.dense = {0.0, 0.0};
        CHECK(embed_profile(prof, p).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("hand-set dense weights") {
        EncoderConfig c = small_config(2, 1, 1);
        EncoderParams p = EncoderParams::zeros(c);
        Matrix& w2 = p.params().at("profile.w2").value;  // 4 x 2
        w2 << 1, 0, 0.5, 0, -1, 2, 0, 0;
        p.params().at("profile.b").value << 0, 0.1, 0, 0;
        Matrix& w1 = p.params().at("profile.w1").value;  // 2 x 4
        w1 << 1, 1, 0, 0, 0, 0, 1, 3;
        Profile prof;
        prof.dense = {1.0, 0.0};
        const RowVector e = embed_profile(prof, p);
        CHECK(std::abs(e(0) - (std::tanh(1.0) + std::tanh(0.6))) <= 1e-12);
        CHECK(std::abs(e(1) - std::tanh(-1.0)) <= 1e-12);
    }
    SUBCASE("token bags average lookup rows") {
        EncoderConfig c = small_config();
        c.profile_mode = ProfileMode::tokens;
        c.vocab_size = 5;
        const EncoderParams p(c, 9);
        const Matrix& table = p.params().at("profile.table").value;
        Profile one;
        one.token_ids = {3};
        CHECK(embed_profile(one, p) == RowVector(table.row(3)));
        Profile two;
        two.token_ids = {1, 4};
        CHECK((embed_profile(two, p) - 0.5 * (table.row(1) + table.row(4))).cwiseAbs().maxCoeff() <= 1e-15);
        Profile none;
        none.token_ids = {};
        CHECK_THROWS_AS(embed_profile(none, p), DataError);
    }
}

TEST_CASE("checkpoints round-trip and guard their hash") {
    const auto dir = std::filesystem::temp_directory_path() / "somer_test_encoder";
    std::filesystem::create_directories(dir);
    Checkpoint ck;
    ck.encoder = EncoderParams(small_config(), 4);
    ck.stats.feature_mean = {0, 0, 0};
    ck.stats.feature_std = {1, 1, 1};
    save_checkpoint(dir / "ck.json", ck);
    const Checkpoint back = load_checkpoint(dir / "ck.json");
    CHECK(back.encoder.config() == ck.encoder.config());
    for (std::size_t g = 0; g < ck.encoder.params().size(); ++g) {
        CHECK(back.encoder.params()[g].value == ck.encoder.params()[g].value);
    }
    const std::string hash = config_hash(small_config());
    CHECK_NOTHROW(load_checkpoint(dir / "ck.json", hash));
    CHECK_THROWS_AS(load_checkpoint(dir / "ck.json", std::string("0000000000000000")), DataError);
    CHECK_NOTHROW(load_checkpoint(dir / "ck.json", std::string("0000000000000000"), true));
}
