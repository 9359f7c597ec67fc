#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "somer/autograd.hpp"
#include "somer/dataio.hpp"
#include "somer/encoder.hpp"
#include "somer/numerics.hpp"

namespace somer {

struct AugmentConfig {
    double gamma = 2.0;
    int lag_min_days = 1;
    int lag_max_days = 3;
    double scale_step = 0.5;
    bool clamp_scale_nonneg = false;
    /// Raw days covered by normalized time [0, 1]; converts lags into normalized units.
    double time_span_days = 1.0;
    /// Upper bound on the bootstrap draw count; 0 leaves it unbounded.
    std::size_t max_draws = 0;

    void validate() const;
};

/// Every random choice augment() made, for property tests.
struct AugmentTrace {
    std::size_t draws = 0;
    std::vector<std::size_t> picks;
    std::vector<int> lags;
    std::vector<double> scales;
};

/// Value factors {1 - gamma, 1 - gamma + step, ...} up to and including 1 + gamma.
std::vector<double> scale_grid(const AugmentConfig& cfg);
/// Inclusive bounds on the bootstrap draw count for a history of n triplets.
std::pair<std::size_t, std::size_t> draw_count_range(std::size_t n, const AugmentConfig& cfg);

/// Bootstrapped positive view of one history: resample with replacement, rescale values,
/// lag timestamps.
std::vector<TripletEvent> augment(std::span<const TripletEvent> triplets, const AugmentConfig& cfg,
                                  std::mt19937_64& rng, AugmentTrace* trace = nullptr);

/// Link-prediction head parameters: link.w2 (2K x 4K), link.b (1 x 2K), link.w1 (1 x 2K).
ParamSet make_link_head(std::size_t hidden_dim, std::uint64_t seed);
ParamSet zero_link_head(std::size_t hidden_dim);

/// Mean over anchors of logsumexp_{j != i}(a_i . a_j / tau) - a_i . p_i / tau.
ag::Var info_nce(ag::Var anchors, ag::Var positives, double tau);
double info_nce_loss(const Matrix& anchors, const Matrix& positives, double tau);

/// 1 if users i and j are connected (either direction), for every ordered pair i != j.
Matrix pair_labels(std::span<const std::string> ids, const EdgeList& edges);
/// Mean BCE of the link head over all B(B-1) ordered pairs; a constant 0 when B == 1.
ag::Var link_loss(ag::Var embeddings, const Matrix& labels, ag::Var w2, ag::Var b, ag::Var w1);
double link_loss(const Matrix& embeddings, std::span<const std::string> ids, const EdgeList& edges,
                 const ParamSet& head);
/// Pair probability for the ordered pair (e_i, e_j).
double link_probability(const RowVector& ei, const RowVector& ej, const ParamSet& head);

struct LossBreakdown {
    double info_nce = 0.0;
    double network = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

struct JointConfig {
    double tau = 0.5;
    double lambda = 1.0;
    AugmentConfig augment;
};

/// Loss over embedding matrices; fills dL/dA, dL/dP and head gradients when the outputs are given.
LossBreakdown embedding_loss(const Matrix& anchors, const Matrix& positives, std::span<const std::string> ids,
                             const EdgeList& edges, const ParamSet& head, const JointConfig& cfg,
                             Matrix* anchor_grad = nullptr, Matrix* positive_grad = nullptr,
                             GradBuffer* head_grad = nullptr);

/// Draws one augmented positive per user; user i uses a generator seeded from (seed, i).
std::vector<std::vector<TripletEvent>> make_positives(std::span<const UserRecord> users, const AugmentConfig& cfg,
                                                      std::uint64_t seed);

/// Joint loss for a batch with fixed positives (anchor profile reused for the positive view).
/// When gradient buffers are given, the full gradient is accumulated into them by re-running each
/// sequence's forward pass on its own tape, spread over `threads` workers with a fixed-order sum.
LossBreakdown joint_loss(std::span<const UserRecord> users, std::span<const std::vector<TripletEvent>> positives,
                         const EdgeList& edges, const EncoderParams& encoder, const ParamSet& head,
                         const JointConfig& cfg, GradBuffer* encoder_grad = nullptr, GradBuffer* head_grad = nullptr,
                         std::size_t threads = 1);

}  // namespace somer
