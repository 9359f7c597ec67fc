#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "somer/autograd.hpp"
#include "somer/baselines.hpp"
#include "somer/encoder.hpp"
#include "somer/trainer.hpp"

namespace somer {

/// Binary classifier over user embeddings:
/// linear(2K -> hidden) -> ReLU -> dropout -> batch norm -> linear(hidden -> 1).
///
/// Groups: head.fc1.w, head.fc1.b, head.bn.gain, head.bn.bias, head.fc2.w, head.fc2.b.
struct ClassifierHead {
    ParamSet params;
    RowVector running_mean;
    RowVector running_var;
    double dropout = 0.3;
    double momentum = 0.1;
    double bn_eps = 1e-5;

    ClassifierHead() = default;
    ClassifierHead(std::size_t input_dim, std::uint64_t seed, std::size_t hidden = 128, double dropout = 0.3);

    std::size_t input_dim() const;
    std::size_t hidden_dim() const;

    /// Training-mode logits (B x 1) with batch statistics and a fresh dropout mask from `rng`.
    /// The batch mean and population variance are returned through the optional outputs.
    ag::Var forward_train(ag::Tape& tape, ag::Var embeddings, std::mt19937_64& rng, GradBuffer* sink,
                          RowVector* batch_mean = nullptr, RowVector* batch_var = nullptr) const;
    /// Eval-mode logits: no dropout, running statistics. Rows are independent.
    Vector logits(const Matrix& embeddings) const;
    /// Momentum update of the running statistics (unbiased variance, as is conventional).
    void update_running(const RowVector& batch_mean, const RowVector& batch_var, std::size_t batch_size);
};

nlohmann::json to_json(const ClassifierHead& head);
ClassifierHead classifier_head_from_json(const nlohmann::json& j);

struct FinetuneConfig {
    double lr = 5e-5;
    std::size_t max_epochs = 60;
    std::size_t batch_size = 128;
    std::size_t hidden = 128;
    double dropout = 0.3;
    bool freeze_encoder = false;
    std::uint64_t seed = 0;
    std::size_t patience = 5;
    double min_delta = 1e-4;
    double train_fraction = 0.70;
    double val_fraction = 0.15;
    std::size_t threads = 1;
    std::optional<std::filesystem::path> history_path;

    void validate() const;
};

nlohmann::json to_json(const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j, FinetuneConfig base = {});

struct FinetuneEpoch {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

nlohmann::json to_json(const FinetuneEpoch& e);

struct FinetuneResult {
    /// Encoder (updated unless frozen) with the classifier stored in its head section.
    Checkpoint checkpoint;
    ClassifierHead head;
    std::vector<FinetuneEpoch> history;
    std::size_t best_epoch = 0;
    double best_validation = 0.0;
    /// Indices into the labeled users, in dataset order.
    Split split;
    std::vector<std::size_t> labeled;
};

/// Supervised fine-tuning with sigmoid + BCE on users carrying a 0/1 label. Uses the same
/// optimizer, cosine schedule and early stopping as pretraining.
FinetuneResult finetune(const Checkpoint& checkpoint, const Normalized& data, const FinetuneConfig& cfg);

/// Eval-mode probability per user.
std::vector<double> predict(const EncoderParams& encoder, const ClassifierHead& head,
                            std::span<const UserRecord> users, std::size_t threads = 1);

/// Probabilities at or above the threshold count as positive.
DetectionScore f1_eval(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);

}  // namespace somer
