#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "somer/autograd.hpp"
#include "somer/dataio.hpp"
#include "somer/numerics.hpp"

namespace somer {

struct EncoderConfig {
    std::size_t hidden_dim = 64;  // K
    std::size_t num_layers = 2;   // L
    std::size_t num_heads = 4;    // H
    std::size_t num_features = 5; // F
    std::size_t profile_dim = 2;  // D, dense profiles
    std::size_t vocab_size = 0;   // token profiles
    std::size_t max_seq_len = 512;
    ProfileMode profile_mode = ProfileMode::dense;

    std::size_t head_dim() const { return hidden_dim / num_heads; }
    std::size_t embedding_dim() const { return 2 * hidden_dim; }
    /// Throws ConfigError when the shapes are inconsistent.
    void validate() const;

    bool operator==(const EncoderConfig&) const = default;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
/// Stable hex digest of the configuration.
std::string config_hash(const EncoderConfig& c);

/// Configuration matching the shapes of a normalized dataset.
EncoderConfig config_for(const Dataset& dataset, const NormalizationStats& stats, EncoderConfig base = {});

/// Every trainable weight of the encoder.
///
/// Weights follow the out x in convention; a layer computes x * W^T + b on row-major
/// activations. Group names:
///   time.{w2,b,w1}  value.{w2,b,w1}  feature.table
///   layer<l>.{wq,wk,wv,wo,bo,ln1.gain,ln1.bias,ffn.w1,ffn.b1,ffn.w2,ffn.b2,ln2.gain,ln2.bias}
///   fusion.{w2,b,w1}
///   profile.{w2,b,w1} (dense) or profile.table (tokens)
class EncoderParams {
public:
    EncoderParams() = default;
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains, N(0, 0.02) lookup tables.
    EncoderParams(EncoderConfig config, std::uint64_t seed);

    static EncoderParams zeros(EncoderConfig config);

    const EncoderConfig& config() const noexcept { return config_; }
    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }

private:
    EncoderConfig config_;
    ParamSet params_;
};

/// Padded batch of triplet sequences; mask(b, n) != 0 marks a real triplet.
struct TripletBatch {
    Matrix t;
    Eigen::MatrixXi f;
    Matrix v;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask;

    std::size_t batch_size() const { return static_cast<std::size_t>(t.rows()); }
    std::size_t length() const { return static_cast<std::size_t>(t.cols()); }

    /// Packs sequences, padding with t = 0, f = 0, v = 0. Sequences must be non-empty.
    static TripletBatch pack(std::span<const std::vector<TripletEvent>> sequences, std::size_t pad_to = 0);
};

/// B sequences of N x K activations.
using SequenceBatch = std::vector<Matrix>;

/// Builds the encoder's forward computation on a tape. Parameter leaves are created once per
/// graph; gradients flow into `sink` (aligned with params().params()) when it is non-null.
class EncoderGraph {
public:
    EncoderGraph(ag::Tape& tape, const EncoderParams& params, GradBuffer* sink = nullptr);

    /// e^t + e^v + e^f for N triplets; returns N x K.
    ag::Var triplets(const Matrix& t, std::span<const int> f, const Matrix& v);
    /// L post-norm transformer layers; keys with mask == 0 are ignored.
    ag::Var transformer(ag::Var x, std::span<const std::uint8_t> mask = {});
    ag::Var layer(ag::Var x, std::size_t l, std::span<const std::uint8_t> mask = {});
    /// Attention pooling over positions; returns 1 x K. `weights` receives the 1 x N distribution.
    ag::Var fuse(ag::Var x, std::span<const std::uint8_t> mask = {}, RowVector* weights = nullptr);
    /// Returns 1 x K.
    ag::Var profile(const Profile& profile);
    /// e^hist ⊕ e^prof for one user; returns 1 x 2K. Keeps the max_seq_len most recent triplets.
    ag::Var user(std::span<const TripletEvent> triplets, const Profile& profile);

    ag::Var param(const std::string& name);

private:
    ag::Tape& tape_;
    const EncoderParams& params_;
    GradBuffer* sink_;
    std::unordered_map<std::string, ag::Var> cache_;
};

SequenceBatch embed_triplets(const TripletBatch& batch, const EncoderParams& params);
SequenceBatch transformer_forward(const SequenceBatch& x, const TripletBatch& batch, const EncoderParams& params);
/// B x K history embeddings; `weights` (optional) receives the B x N fusion distribution.
Matrix fuse(const SequenceBatch& x, const TripletBatch& batch, const EncoderParams& params, Matrix* weights = nullptr);
RowVector embed_profile(const Profile& profile, const EncoderParams& params);
/// Full 2K embedding of one normalized user.
RowVector encode_user(const UserRecord& user, const EncoderParams& params);
/// One row per user, in input order.
Matrix encode_users(std::span<const UserRecord> users, const EncoderParams& params, std::size_t threads = 1);
/// Padded-batch composition of the four stages above (B x 2K).
Matrix encode_batch(const TripletBatch& batch, std::span<const Profile> profiles, const EncoderParams& params);

/// Self-describing training artifact.
struct Checkpoint {
    EncoderParams encoder;
    ParamSet link;
    Preprocessor preprocessor;
    NormalizationStats stats;
    nlohmann::json head;  // null unless fine-tuned
};

nlohmann::json params_to_json(const ParamSet& params);
void params_from_json(const nlohmann::json& j, ParamSet& params);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Rejects a checkpoint whose stored hash does not match its configuration, or does not
/// match `expected_hash` when given, unless `force` is set.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash = {},
                           bool force = false);

}  // namespace somer
