#include "somer/encoder.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "somer/parallel.hpp"
#include "somer/seeding.hpp"

namespace somer {

using nlohmann::json;

void EncoderConfig::validate() const {
    if (hidden_dim == 0 || num_heads == 0) throw ConfigError("encoder: hidden_dim and num_heads must be positive");
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("encoder: hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
    }
    if (num_features == 0) throw ConfigError("encoder: num_features must be positive");
    if (max_seq_len == 0) throw ConfigError("encoder: max_seq_len must be positive");
    if (profile_mode == ProfileMode::dense && profile_dim == 0) {
        throw ConfigError("encoder: dense profiles need profile_dim > 0");
    }
}

json to_json(const EncoderConfig& c) {
    return json{{"hidden_dim", c.hidden_dim},
                {"num_layers", c.num_layers},
                {"num_heads", c.num_heads},
                {"num_features", c.num_features},
                {"profile_dim", c.profile_dim},
                {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len},
                {"profile_mode", c.profile_mode == ProfileMode::dense ? "dense" : "tokens"}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.num_features = j.value("num_features", c.num_features);
    c.profile_dim = j.value("profile_dim", c.profile_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    const std::string mode = j.value("profile_mode", std::string("dense"));
    if (mode != "dense" && mode != "tokens") throw ConfigError("profile_mode must be 'dense' or 'tokens'");
    c.profile_mode = mode == "dense" ? ProfileMode::dense : ProfileMode::tokens;
    c.validate();
    return c;
}

std::string config_hash(const EncoderConfig& c) { return hex_digest(to_json(c).dump()); }

EncoderConfig config_for(const Dataset& dataset, const NormalizationStats& stats, EncoderConfig base) {
    base.num_features = dataset.num_features;
    base.profile_mode = dataset.profile_mode;
    if (dataset.profile_mode == ProfileMode::dense) {
        base.profile_dim = dataset.profile_dim;
        base.vocab_size = 0;
    } else {
        base.profile_dim = 0;
        base.vocab_size = stats.vocab.size();
    }
    base.validate();
    return base;
}

namespace {

Matrix lookup(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 0.02);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

Matrix zeros(std::size_t r, std::size_t c) {
    return Matrix::Zero(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Matrix ones(std::size_t r, std::size_t c) {
    return Matrix::Ones(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Adds every group in a fixed order; `rng == nullptr` leaves all trainable weights at zero.
void build_params(const EncoderConfig& c, ParamSet& ps, std::mt19937_64* rng) {
    const std::size_t k = c.hidden_dim;
    auto mat = [&](std::size_t out, std::size_t in) {
        return rng ? glorot_uniform(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in), *rng)
                   : zeros(out, in);
    };
    auto table = [&](std::size_t rows, std::size_t cols) { return rng ? lookup(rows, cols, *rng) : zeros(rows, cols); };
    auto gain = [&](std::size_t n) { return rng ? ones(1, n) : zeros(1, n); };

    ps.add("time.w2", mat(k, 1));
    ps.add("time.b", zeros(1, k));
    ps.add("time.w1", mat(k, k));
    ps.add("value.w2", mat(k, 1));
    ps.add("value.b", zeros(1, k));
    ps.add("value.w1", mat(k, k));
    ps.add("feature.table", table(c.num_features, k));
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        ps.add(p + "wq", mat(k, k));
        ps.add(p + "wk", mat(k, k));
        ps.add(p + "wv", mat(k, k));
        ps.add(p + "wo", mat(k, k));
        ps.add(p + "bo", zeros(1, k));
        ps.add(p + "ln1.gain", gain(k));
        ps.add(p + "ln1.bias", zeros(1, k));
        ps.add(p + "ffn.w1", mat(2 * k, k));
        ps.add(p + "ffn.b1", zeros(1, 2 * k));
        ps.add(p + "ffn.w2", mat(k, 2 * k));
        ps.add(p + "ffn.b2", zeros(1, k));
        ps.add(p + "ln2.gain", gain(k));
        ps.add(p + "ln2.bias", zeros(1, k));
    }
    ps.add("fusion.w2", mat(2 * k, k));
    ps.add("fusion.b", zeros(1, 2 * k));
    ps.add("fusion.w1", mat(1, 2 * k));
    if (c.profile_mode == ProfileMode::dense) {
        ps.add("profile.w2", mat(2 * k, c.profile_dim));
        ps.add("profile.b", zeros(1, 2 * k));
        ps.add("profile.w1", mat(k, 2 * k));
    } else {
        ps.add("profile.table", table(c.vocab_size, k));
    }
}

}  // namespace

EncoderParams::EncoderParams(EncoderConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    build_params(config_, params_, &rng);
}

EncoderParams EncoderParams::zeros(EncoderConfig config) {
    config.validate();
    EncoderParams p;
    p.config_ = config;
    build_params(config, p.params_, nullptr);
    return p;
}

TripletBatch TripletBatch::pack(std::span<const std::vector<TripletEvent>> sequences, std::size_t pad_to) {
    std::size_t n = pad_to;
    for (const auto& s : sequences) {
        if (s.empty()) throw DataError("triplet batch: empty sequence");
        n = std::max(n, s.size());
    }
    const auto b = static_cast<Eigen::Index>(sequences.size());
    const auto nn = static_cast<Eigen::Index>(n);
    TripletBatch batch;
    batch.t = Matrix::Zero(b, nn);
    batch.f = Eigen::MatrixXi::Zero(b, nn);
    batch.v = Matrix::Zero(b, nn);
    batch.mask.setZero(b, nn);
    for (Eigen::Index i = 0; i < b; ++i) {
        const auto& s = sequences[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < s.size(); ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            batch.t(i, jj) = s[j].t;
            batch.f(i, jj) = s[j].f;
            batch.v(i, jj) = s[j].v;
            batch.mask(i, jj) = 1;
        }
    }
    return batch;
}

EncoderGraph::EncoderGraph(ag::Tape& tape, const EncoderParams& params, GradBuffer* sink)
    : tape_(tape), params_(params), sink_(sink) {
    if (sink_ && sink_->size() != params.params().size()) {
        throw DimensionError("encoder graph: gradient buffer does not match parameter set");
    }
}

ag::Var EncoderGraph::param(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    const std::size_t idx = params_.params().index_of(name);
    Matrix* sink = sink_ ? &(*sink_)[idx] : nullptr;
    ag::Var v = tape_.param(params_.params()[idx].value, sink);
    cache_.emplace(name, v);
    return v;
}

ag::Var EncoderGraph::triplets(const Matrix& t, std::span<const int> f, const Matrix& v) {
    const auto n = static_cast<std::size_t>(t.rows());
    if (t.cols() != 1 || v.cols() != 1 || static_cast<std::size_t>(v.rows()) != n || f.size() != n) {
        throw DimensionError("triplet embedding: expected N x 1 times and values with N feature indices");
    }
    const auto nf = static_cast<int>(params_.config().num_features);
    for (int idx : f) {
        if (idx < 0 || idx >= nf) {
            throw DataError("triplet embedding: feature index " + std::to_string(idx) + " outside [0, " +
                            std::to_string(nf) + ")");
        }
    }
    ag::Var tv = tape_.constant(t);
    ag::Var vv = tape_.constant(v);
    ag::Var et = ag::linear(ag::tanh(ag::linear(tv, param("time.w2"), param("time.b"))), param("time.w1"), {});
    ag::Var ev = ag::linear(ag::tanh(ag::linear(vv, param("value.w2"), param("value.b"))), param("value.w1"), {});
    ag::Var ef = ag::gather_rows(param("feature.table"), std::vector<int>(f.begin(), f.end()));
    return ag::add(ag::add(et, ev), ef);
}

ag::Var EncoderGraph::layer(ag::Var x, std::size_t l, std::span<const std::uint8_t> mask) {
    const auto& cfg = params_.config();
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto heads = static_cast<Eigen::Index>(cfg.num_heads);
    const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    ag::Var q = ag::linear(x, param(p + "wq"), {});
    ag::Var k = ag::linear(x, param(p + "wk"), {});
    ag::Var v = ag::linear(x, param(p + "wv"), {});
    std::vector<ag::Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (Eigen::Index h = 0; h < heads; ++h) {
        ag::Var qh = ag::slice_cols(q, h * hd, hd);
        ag::Var kh = ag::slice_cols(k, h * hd, hd);
        ag::Var vh = ag::slice_cols(v, h * hd, hd);
        outs.push_back(ag::attention(qh, kh, vh, inv_sqrt, mask));
    }
    ag::Var merged = ag::linear(ag::concat_cols(outs), param(p + "wo"), param(p + "bo"));
    ag::Var h1 = ag::layer_norm_rows(ag::add(x, merged), param(p + "ln1.gain"), param(p + "ln1.bias"));
    ag::Var ff = ag::linear(ag::relu(ag::linear(h1, param(p + "ffn.w1"), param(p + "ffn.b1"))), param(p + "ffn.w2"),
                            param(p + "ffn.b2"));
    return ag::layer_norm_rows(ag::add(h1, ff), param(p + "ln2.gain"), param(p + "ln2.bias"));
}

ag::Var EncoderGraph::transformer(ag::Var x, std::span<const std::uint8_t> mask) {
    for (std::size_t l = 0; l < params_.config().num_layers; ++l) x = layer(x, l, mask);
    return x;
}

ag::Var EncoderGraph::fuse(ag::Var x, std::span<const std::uint8_t> mask, RowVector* weights) {
    ag::Var scores = ag::linear(ag::tanh(ag::linear(x, param("fusion.w2"), param("fusion.b"))), param("fusion.w1"), {});
    ag::Var w = ag::softmax_rows(ag::transpose(scores), mask);
    if (weights) *weights = w.value().row(0);
    return ag::matmul(w, x);
}

ag::Var EncoderGraph::profile(const Profile& profile) {
    const auto& cfg = params_.config();
    if (cfg.profile_mode == ProfileMode::dense) {
        if (profile.dense.size() != cfg.profile_dim) {
            throw DimensionError("profile embedding: expected " + std::to_string(cfg.profile_dim) +
                                 " dense values, got " + std::to_string(profile.dense.size()));
        }
        Matrix d(1, static_cast<Eigen::Index>(cfg.profile_dim));
        for (std::size_t i = 0; i < cfg.profile_dim; ++i) d(0, static_cast<Eigen::Index>(i)) = profile.dense[i];
        ag::Var dv = tape_.constant(std::move(d));
        return ag::linear(ag::tanh(ag::linear(dv, param("profile.w2"), param("profile.b"))), param("profile.w1"), {});
    }
    std::vector<int> rows;
    for (int id : profile.token_ids) {
        if (id >= 0 && static_cast<std::size_t>(id) < cfg.vocab_size) rows.push_back(id);
    }
    if (rows.empty()) throw DataError("profile embedding: no known profile tokens");
    return ag::mean_rows(ag::gather_rows(param("profile.table"), std::move(rows)));
}

ag::Var EncoderGraph::user(std::span<const TripletEvent> triplets, const Profile& profile) {
    if (triplets.empty()) throw DataError("encoder: user has an empty history");
    std::vector<TripletEvent> seq(triplets.begin(), triplets.end());
    seq = cap_recent(std::move(seq), params_.config().max_seq_len);
    const auto n = static_cast<Eigen::Index>(seq.size());
    Matrix t(n, 1), v(n, 1);
    std::vector<int> f(seq.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& tr = seq[static_cast<std::size_t>(i)];
        t(i, 0) = tr.t;
        v(i, 0) = tr.v;
        f[static_cast<std::size_t>(i)] = tr.f;
    }
    ag::Var x = transformer(this->triplets(t, f, v));
    ag::Var parts[] = {fuse(x), this->profile(profile)};
    return ag::concat_cols(parts);
}

namespace {

Matrix column(const Matrix& m, Eigen::Index row) { return m.row(row).transpose(); }

std::span<const std::uint8_t> mask_row(const TripletBatch& b, Eigen::Index row) {
    return {b.mask.data() + row * b.mask.cols(), static_cast<std::size_t>(b.mask.cols())};
}

}  // namespace

SequenceBatch embed_triplets(const TripletBatch& batch, const EncoderParams& params) {
    SequenceBatch out;
    for (Eigen::Index b = 0; b < batch.t.rows(); ++b) {
        ag::Tape tape;
        EncoderGraph g(tape, params);
        std::vector<int> f(static_cast<std::size_t>(batch.f.cols()));
        for (Eigen::Index j = 0; j < batch.f.cols(); ++j) f[static_cast<std::size_t>(j)] = batch.f(b, j);
        out.push_back(g.triplets(column(batch.t, b), f, column(batch.v, b)).value());
    }
    return out;
}

SequenceBatch transformer_forward(const SequenceBatch& x, const TripletBatch& batch, const EncoderParams& params) {
    if (x.size() != batch.batch_size()) throw DimensionError("transformer_forward: batch size mismatch");
    SequenceBatch out;
    for (std::size_t b = 0; b < x.size(); ++b) {
        const auto& cfg = params.config();
        if (static_cast<std::size_t>(x[b].cols()) != cfg.hidden_dim ||
            static_cast<std::size_t>(x[b].rows()) != batch.length()) {
            throw DimensionError("transformer_forward: input " + shape_string(x[b]) + " does not match N=" +
                                 std::to_string(batch.length()) + ", K=" + std::to_string(cfg.hidden_dim));
        }
        ag::Tape tape;
        EncoderGraph g(tape, params);
        out.push_back(g.transformer(tape.constant(x[b]), mask_row(batch, static_cast<Eigen::Index>(b))).value());
    }
    return out;
}

Matrix fuse(const SequenceBatch& x, const TripletBatch& batch, const EncoderParams& params, Matrix* weights) {
    if (x.size() != batch.batch_size()) throw DimensionError("fuse: batch size mismatch");
    const auto k = static_cast<Eigen::Index>(params.config().hidden_dim);
    Matrix out(static_cast<Eigen::Index>(x.size()), k);
    if (weights) weights->setZero(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(batch.length()));
    for (std::size_t b = 0; b < x.size(); ++b) {
        ag::Tape tape;
        EncoderGraph g(tape, params);
        RowVector w;
        const auto bi = static_cast<Eigen::Index>(b);
        out.row(bi) = g.fuse(tape.constant(x[b]), mask_row(batch, bi), &w).value().row(0);
        if (weights) weights->row(bi) = w;
    }
    return out;
}

RowVector embed_profile(const Profile& profile, const EncoderParams& params) {
    ag::Tape tape;
    EncoderGraph g(tape, params);
    return g.profile(profile).value().row(0);
}

RowVector encode_user(const UserRecord& user, const EncoderParams& params) {
    ag::Tape tape;
    EncoderGraph g(tape, params);
    RowVector e = g.user(user.triplets, user.profile).value().row(0);
    if (!e.allFinite()) throw NumericError("encoder: non-finite embedding for user '" + user.user_id + "'");
    return e;
}

Matrix encode_users(std::span<const UserRecord> users, const EncoderParams& params, std::size_t threads) {
    Matrix out(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(params.config().embedding_dim()));
    parallel_for(users.size(), threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t i = begin; i < end; ++i) out.row(static_cast<Eigen::Index>(i)) = encode_user(users[i], params);
    });
    return out;
}

Matrix encode_batch(const TripletBatch& batch, std::span<const Profile> profiles, const EncoderParams& params) {
    if (profiles.size() != batch.batch_size()) throw DimensionError("encode_batch: one profile per row required");
    const SequenceBatch x = transformer_forward(embed_triplets(batch, params), batch, params);
    const Matrix hist = fuse(x, batch, params);
    const auto k = static_cast<Eigen::Index>(params.config().hidden_dim);
    Matrix out(hist.rows(), 2 * k);
    for (Eigen::Index b = 0; b < hist.rows(); ++b) {
        out.row(b).head(k) = hist.row(b);
        out.row(b).tail(k) = embed_profile(profiles[static_cast<std::size_t>(b)], params);
    }
    return out;
}

json params_to_json(const ParamSet& params) {
    json groups = json::array();
    for (const auto& g : params) {
        groups.push_back(json{{"name", g.name},
                              {"rows", g.value.rows()},
                              {"cols", g.value.cols()},
                              {"data", std::vector<double>(g.value.data(), g.value.data() + g.value.size())}});
    }
    return groups;
}

void params_from_json(const json& j, ParamSet& params) {
    for (const auto& g : j) {
        const std::string name = g.at("name").get<std::string>();
        const auto rows = g.at("rows").get<Eigen::Index>();
        const auto cols = g.at("cols").get<Eigen::Index>();
        const auto data = g.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
            throw DataError("checkpoint: group '" + name + "' has " + std::to_string(data.size()) + " values for " +
                            std::to_string(rows) + "x" + std::to_string(cols));
        }
        Matrix value = Eigen::Map<const Matrix>(data.data(), rows, cols);
        if (params.contains(name)) {
            ParamGroup& dst = params.at(name);
            if (dst.value.rows() != rows || dst.value.cols() != cols) {
                throw DimensionError("checkpoint: group '" + name + "' is " + std::to_string(rows) + "x" +
                                     std::to_string(cols) + ", expected " + shape_string(dst.value));
            }
            dst.value = std::move(value);
        } else {
            params.add(name, std::move(value));
        }
    }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json j{{"format", "somer-checkpoint"},
           {"version", 1},
           {"config", to_json(ckpt.encoder.config())},
           {"config_hash", config_hash(ckpt.encoder.config())},
           {"encoder", params_to_json(ckpt.encoder.params())},
           {"link", params_to_json(ckpt.link)},
           {"preprocessor", to_json(ckpt.preprocessor)},
           {"normalization", to_json(ckpt.stats)}};
    if (!ckpt.head.is_null()) j["head"] = ckpt.head;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out << j.dump() << '\n';
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash,
                           bool force) {
    const json j = read_json_file(path);
    if (j.value("format", std::string()) != "somer-checkpoint") {
        throw DataError("'" + path.string() + "' is not a checkpoint");
    }
    const EncoderConfig cfg = encoder_config_from_json(j.at("config"));
    const std::string stored = j.at("config_hash").get<std::string>();
    const std::string actual = config_hash(cfg);
    if (!force) {
        if (stored != actual) {
            throw DataError("checkpoint '" + path.string() + "': stored hash " + stored +
                            " does not match its configuration (" + actual + ")");
        }
        if (expected_hash && *expected_hash != actual) {
            throw DataError("checkpoint '" + path.string() + "': configuration hash " + actual + ", expected " +
                            *expected_hash);
        }
    }
    Checkpoint ckpt;
    ckpt.encoder = EncoderParams::zeros(cfg);
    params_from_json(j.at("encoder"), ckpt.encoder.params());
    params_from_json(j.at("link"), ckpt.link);
    ckpt.preprocessor = preprocessor_from_json(j.at("preprocessor"));
    ckpt.stats = stats_from_json(j.at("normalization"));
    if (j.contains("head")) ckpt.head = j.at("head");
    return ckpt;
}

}  // namespace somer
