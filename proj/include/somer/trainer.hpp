#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "json.hpp"
#include "somer/dataio.hpp"
#include "somer/encoder.hpp"
#include "somer/numerics.hpp"
#include "somer/objectives.hpp"

namespace somer {

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t step = 0;

    static AdamState zeros_like(const ParamSet& params);
};

/// One bias-corrected Adam update from each group's `grad`. Throws NumericError naming the
/// first group with a non-finite gradient, before touching any parameter.
void adam_step(ParamSet& params, AdamState& state, double lr, const AdamConfig& cfg = {});

struct TrainConfig {
    double lr = 5e-5;
    std::size_t max_epochs = 60;
    /// 0 picks 128, or 32 when the link objective is active.
    std::size_t batch_size = 0;
    double tau = 0.5;
    double gamma = 2.0;
    double lambda = 1.0;
    bool clamp_scale_nonneg = false;
    std::uint64_t seed = 0;
    std::size_t patience = 5;
    double min_delta = 1e-4;
    double train_fraction = 0.70;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    std::size_t threads = 1;
    /// Also evaluate the untrained model on the training split.
    bool eval_initial = false;
    /// Wall-clock limit in seconds; 0 means none. No epoch starts once the previous epoch's
    /// duration would carry the run past the limit.
    double time_budget_seconds = 0.0;
    EncoderConfig encoder;
    std::optional<std::filesystem::path> history_path;

    void validate() const;
    /// Batch size after resolving the automatic default.
    std::size_t effective_batch_size(bool link_active) const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Keys absent from `j` keep the values already in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct EpochReport {
    std::size_t epoch = 0;
    LossBreakdown train;
    LossBreakdown validation;
    double lr = 0.0;
    double seconds = 0.0;
};

/// Wall time is left out so that history files are reproducible.
nlohmann::json to_json(const EpochReport& r);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

/// Seeded shuffle of [0, n) cut into train / validation / test.
Split split_users(std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed);

struct BatchRange {
    std::size_t begin;
    std::size_t end;
};

/// Consecutive batches over [0, n). A trailing batch of one is merged into its predecessor
/// when `merge_tail` is set and dropped otherwise.
std::vector<BatchRange> batch_ranges(std::size_t n, std::size_t batch, bool merge_tail);

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<EpochReport> history;
    /// 0 when no epoch ran.
    std::size_t best_epoch = 0;
    double best_validation = 0.0;
    std::optional<LossBreakdown> initial_train;
    Split split;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Joint self-supervised pretraining with Adam, cosine decay and early stopping on the
/// validation loss. Returns the best-validation parameters.
PretrainResult pretrain(const Normalized& data, const EdgeList& edges, const TrainConfig& cfg,
                        const Preprocessor& preprocessor = {}, const EpochCallback& on_epoch = {});

/// Mean joint loss over `users` in fixed-order batches with positives drawn from `seed`.
LossBreakdown evaluate_loss(std::span<const UserRecord> users, const EdgeList& edges, const EncoderParams& encoder,
                            const ParamSet& head, const JointConfig& cfg, std::size_t batch_size, std::uint64_t seed,
                            std::size_t threads = 1);

}  // namespace somer
