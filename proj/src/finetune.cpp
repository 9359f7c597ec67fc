#include "somer/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "somer/errors.hpp"
#include "somer/parallel.hpp"
#include "somer/seeding.hpp"

namespace somer {

namespace {

constexpr std::uint64_t kHeadInitStream = 0xc1a5;

enum Group : std::size_t { fc1_w, fc1_b, bn_gain, bn_bias, fc2_w, fc2_b };

}  // namespace

ClassifierHead::ClassifierHead(std::size_t input_dim, std::uint64_t seed, std::size_t hidden, double dropout_rate)
    : dropout(dropout_rate) {
    if (input_dim == 0 || hidden == 0) throw ConfigError("classifier head: dimensions must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("classifier head: dropout must lie in [0, 1)");
    std::mt19937_64 rng(seed);
    const auto in = static_cast<Eigen::Index>(input_dim);
    const auto h = static_cast<Eigen::Index>(hidden);
    params.add("head.fc1.w", glorot_uniform(h, in, rng));
    params.add("head.fc1.b", Matrix::Zero(1, h));
    params.add("head.bn.gain", Matrix::Ones(1, h));
    params.add("head.bn.bias", Matrix::Zero(1, h));
    params.add("head.fc2.w", glorot_uniform(1, h, rng));
    params.add("head.fc2.b", Matrix::Zero(1, 1));
    running_mean = RowVector::Zero(h);
    running_var = RowVector::Ones(h);
}

std::size_t ClassifierHead::input_dim() const { return static_cast<std::size_t>(params[fc1_w].value.cols()); }
std::size_t ClassifierHead::hidden_dim() const { return static_cast<std::size_t>(params[fc1_w].value.rows()); }

ag::Var ClassifierHead::forward_train(ag::Tape& tape, ag::Var embeddings, std::mt19937_64& rng, GradBuffer* sink,
                                      RowVector* batch_mean, RowVector* batch_var) const {
    if (static_cast<std::size_t>(embeddings.cols()) != input_dim()) {
        throw DimensionError("classifier head expects " + std::to_string(input_dim()) + " inputs, got " +
                             std::to_string(embeddings.cols()));
    }
    auto p = [&](std::size_t g) {
        return tape.param(params[g].value, sink != nullptr ? &(*sink)[g] : nullptr);
    };
    ag::Var h = ag::relu(ag::linear(embeddings, p(fc1_w), p(fc1_b)));
    if (dropout > 0.0) {
        std::bernoulli_distribution keep(1.0 - dropout);
        Matrix mask(h.rows(), h.cols());
        const double kept = 1.0 / (1.0 - dropout);
        for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? kept : 0.0;
        h = ag::mul(h, tape.constant(std::move(mask)));
    }
    h = ag::batch_norm_train(h, p(bn_gain), p(bn_bias), bn_eps, batch_mean, batch_var);
    return ag::linear(h, p(fc2_w), p(fc2_b));
}

Vector ClassifierHead::logits(const Matrix& embeddings) const {
    if (static_cast<std::size_t>(embeddings.cols()) != input_dim()) {
        throw DimensionError("classifier head expects " + std::to_string(input_dim()) + " inputs, got " +
                             std::to_string(embeddings.cols()));
    }
    Matrix h = ((embeddings * params[fc1_w].value.transpose()).rowwise() + params[fc1_b].value.row(0)).cwiseMax(0.0);
    const RowVector inv = (running_var.array() + bn_eps).rsqrt().matrix();
    h.rowwise() -= running_mean;
    h.array().rowwise() *= (inv.array() * params[bn_gain].value.row(0).array());
    h.rowwise() += params[bn_bias].value.row(0);
    return (h * params[fc2_w].value.transpose()).col(0).array() + params[fc2_b].value(0, 0);
}

void ClassifierHead::update_running(const RowVector& batch_mean, const RowVector& batch_var, std::size_t batch_size) {
    const double n = static_cast<double>(batch_size);
    const double correction = batch_size > 1 ? n / (n - 1.0) : 1.0;
    running_mean = (1.0 - momentum) * running_mean + momentum * batch_mean;
    running_var = (1.0 - momentum) * running_var + momentum * correction * batch_var;
}

nlohmann::json to_json(const ClassifierHead& head) {
    return {{"dropout", head.dropout},
            {"momentum", head.momentum},
            {"bn_eps", head.bn_eps},
            {"params", params_to_json(head.params)},
            {"running_mean", std::vector<double>(head.running_mean.data(),
                                                 head.running_mean.data() + head.running_mean.size())},
            {"running_var",
             std::vector<double>(head.running_var.data(), head.running_var.data() + head.running_var.size())}};
}

ClassifierHead classifier_head_from_json(const nlohmann::json& j) {
    try {
        const auto& groups = j.at("params");
        std::size_t input = 0, hidden = 0;
        for (const auto& g : groups) {
            if (g.at("name") == "head.fc1.w") {
                hidden = g.at("rows").get<std::size_t>();
                input = g.at("cols").get<std::size_t>();
            }
        }
        if (input == 0 || hidden == 0) throw DataError("classifier head: missing head.fc1.w");
        ClassifierHead head(input, 0, hidden, j.at("dropout").get<double>());
        head.momentum = j.at("momentum").get<double>();
        head.bn_eps = j.at("bn_eps").get<double>();
        params_from_json(groups, head.params);
        const auto rm = j.at("running_mean").get<std::vector<double>>();
        const auto rv = j.at("running_var").get<std::vector<double>>();
        if (rm.size() != hidden || rv.size() != hidden) throw DataError("classifier head: running statistics size");
        head.running_mean = Eigen::Map<const RowVector>(rm.data(), static_cast<Eigen::Index>(hidden));
        head.running_var = Eigen::Map<const RowVector>(rv.data(), static_cast<Eigen::Index>(hidden));
        return head;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("classifier head: ") + e.what());
    }
}

void FinetuneConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("finetune: lr must be positive");
    if (batch_size < 2) throw ConfigError("finetune: batch size must be at least 2");
    if (hidden == 0) throw ConfigError("finetune: hidden size must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("finetune: dropout must lie in [0, 1)");
    if (patience == 0) throw ConfigError("finetune: patience must be positive");
    if (!(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction <= 1.0)) {
        throw ConfigError("finetune: split fractions must be positive and sum to at most 1");
    }
}

nlohmann::json to_json(const FinetuneConfig& c) {
    nlohmann::json j{{"lr", c.lr},
                     {"max_epochs", c.max_epochs},
                     {"batch_size", c.batch_size},
                     {"hidden", c.hidden},
                     {"dropout", c.dropout},
                     {"freeze_encoder", c.freeze_encoder},
                     {"seed", c.seed},
                     {"patience", c.patience},
                     {"min_delta", c.min_delta},
                     {"train_fraction", c.train_fraction},
                     {"val_fraction", c.val_fraction},
                     {"threads", c.threads}};
    return j;
}

FinetuneConfig finetune_config_from_json(const nlohmann::json& j, FinetuneConfig c) {
    try {
        c.lr = j.value("lr", c.lr);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.hidden = j.value("hidden", c.hidden);
        c.dropout = j.value("dropout", c.dropout);
        c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
        c.seed = j.value("seed", c.seed);
        c.patience = j.value("patience", c.patience);
        c.min_delta = j.value("min_delta", c.min_delta);
        c.train_fraction = j.value("train_fraction", c.train_fraction);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.threads = j.value("threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("finetune config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json to_json(const FinetuneEpoch& e) {
    return {{"epoch", e.epoch},
            {"train_loss", e.train_loss},
            {"validation_loss", e.validation_loss},
            {"lr", e.lr}};
}

namespace {

double mean_bce(const Vector& logits, const Vector& labels) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double z = logits(i);
        sum += std::max(z, 0.0) - z * labels(i) + std::log1p(std::exp(-std::abs(z)));
    }
    return sum / static_cast<double>(logits.size());
}

}  // namespace

FinetuneResult finetune(const Checkpoint& checkpoint, const Normalized& data, const FinetuneConfig& cfg) {
    cfg.validate();
    const auto& users = data.dataset.users;
    FinetuneResult result;
    for (std::size_t i = 0; i < users.size(); ++i) {
        if (!users[i].label) continue;
        if (*users[i].label != 0 && *users[i].label != 1) {
            throw DataError("finetune: user '" + users[i].user_id + "' has label " + std::to_string(*users[i].label) +
                            "; expected 0 or 1");
        }
        result.labeled.push_back(i);
    }
    if (result.labeled.empty()) throw DataError("finetune: no labeled users");

    result.split = split_users(result.labeled.size(), cfg.train_fraction, cfg.val_fraction, cfg.seed);
    auto pick = [&](const std::vector<std::size_t>& idx) {
        std::vector<UserRecord> out;
        for (std::size_t i : idx) out.push_back(users[result.labeled[i]]);
        return out;
    };
    const std::vector<UserRecord> train = pick(result.split.train);
    const std::vector<UserRecord> val = pick(result.split.validation);
    if (train.size() < 2) throw ConfigError("finetune: training split needs at least 2 users");
    if (val.empty()) throw ConfigError("finetune: validation split is empty");
    const bool any_pos = std::any_of(train.begin(), train.end(), [](const UserRecord& u) { return *u.label == 1; });
    const bool any_neg = std::any_of(train.begin(), train.end(), [](const UserRecord& u) { return *u.label == 0; });
    if (!any_pos || !any_neg) throw DataError("finetune: training labels contain a single class");

    auto label_vector = [](const std::vector<UserRecord>& us) {
        Vector y(static_cast<Eigen::Index>(us.size()));
        for (std::size_t i = 0; i < us.size(); ++i) y(static_cast<Eigen::Index>(i)) = *us[i].label;
        return y;
    };
    const Vector val_labels = label_vector(val);

    EncoderParams encoder = checkpoint.encoder;
    ClassifierHead head(encoder.config().embedding_dim(), derive_seed(cfg.seed, kHeadInitStream), cfg.hidden,
                        cfg.dropout);
    result.checkpoint = checkpoint;
    result.checkpoint.head = to_json(head);
    result.head = head;

    // Frozen encoders never change, so their embeddings are computed once.
    Matrix frozen_train;
    Matrix frozen_val;
    if (cfg.freeze_encoder) {
        frozen_train = encode_users(train, encoder, cfg.threads);
        frozen_val = encode_users(val, encoder, cfg.threads);
    }
    if (cfg.max_epochs == 0) return result;

    const std::size_t batches_per_epoch = batch_ranges(train.size(), cfg.batch_size, false).size();
    const std::size_t total_steps = std::max<std::size_t>(1, cfg.max_epochs * batches_per_epoch);
    AdamState enc_state = AdamState::zeros_like(encoder.params());
    AdamState head_state = AdamState::zeros_like(head.params);

    std::ofstream history;
    if (cfg.history_path) {
        history.open(*cfg.history_path);
        if (!history) throw IoError("cannot write history to '" + cfg.history_path->string() + "'");
    }

    double best = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffler(derive_seed(cfg.seed, 1000 + epoch));
        std::shuffle(order.begin(), order.end(), shuffler);
        const std::uint64_t epoch_seed = derive_seed(cfg.seed, 3000 + epoch);

        double loss_sum = 0.0;
        double weight = 0.0;
        double lr = cfg.lr;
        const auto ranges = batch_ranges(order.size(), cfg.batch_size, false);
        for (std::size_t r = 0; r < ranges.size(); ++r) {
            const std::size_t b = ranges[r].end - ranges[r].begin;
            std::vector<UserRecord> batch;
            Matrix emb(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(head.input_dim()));
            for (std::size_t i = 0; i < b; ++i) {
                const std::size_t u = order[ranges[r].begin + i];
                batch.push_back(train[u]);
                if (cfg.freeze_encoder) emb.row(static_cast<Eigen::Index>(i)) = frozen_train.row(static_cast<Eigen::Index>(u));
            }
            if (!cfg.freeze_encoder) emb = encode_users(batch, encoder, cfg.threads);
            const Vector y = label_vector(batch);

            ag::Tape tape;
            GradBuffer head_grad = make_grad_buffer(head.params);
            ag::Var e = cfg.freeze_encoder ? tape.constant(emb) : tape.leaf(emb);
            std::mt19937_64 dropout_rng(derive_seed(epoch_seed, r));
            RowVector mean, var;
            ag::Var logits = head.forward_train(tape, e, dropout_rng, &head_grad, &mean, &var);
            ag::Var loss = ag::bce_with_logits(logits, y);
            tape.backward(loss);
            const double value = loss.value()(0, 0);
            if (!std::isfinite(value)) throw NumericError("finetune: non-finite training loss");

            lr = cosine_lr(step, total_steps, cfg.lr);
            if (!cfg.freeze_encoder) {
                const Matrix de = tape.grad(e);
                const std::size_t workers = effective_workers(b, cfg.threads);
                std::vector<GradBuffer> partial(workers);
                for (auto& buf : partial) buf = make_grad_buffer(encoder.params());
                parallel_for(b, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
                    for (std::size_t s = begin; s < end; ++s) {
                        ag::Tape t;
                        EncoderGraph g(t, encoder, &partial[w]);
                        t.backward(g.user(batch[s].triplets, batch[s].profile), de.row(static_cast<Eigen::Index>(s)));
                    }
                });
                GradBuffer enc_grad = make_grad_buffer(encoder.params());
                for (const auto& buf : partial) accumulate(enc_grad, buf);
                for (std::size_t i = 0; i < enc_grad.size(); ++i) encoder.params()[i].grad = std::move(enc_grad[i]);
                adam_step(encoder.params(), enc_state, lr);
            }
            for (std::size_t i = 0; i < head_grad.size(); ++i) head.params[i].grad = std::move(head_grad[i]);
            adam_step(head.params, head_state, lr);
            head.update_running(mean, var, b);
            ++step;
            loss_sum += value * static_cast<double>(b);
            weight += static_cast<double>(b);
        }
        encoder.params().zero_grad();
        head.params.zero_grad();

        FinetuneEpoch report;
        report.epoch = epoch;
        report.train_loss = weight > 0.0 ? loss_sum / weight : 0.0;
        const Matrix val_emb = cfg.freeze_encoder ? frozen_val : encode_users(val, encoder, cfg.threads);
        report.validation_loss = mean_bce(head.logits(val_emb), val_labels);
        report.lr = lr;
        report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.history.push_back(report);
        if (history.is_open()) history << to_json(report).dump() << '\n' << std::flush;

        if (report.validation_loss < best - cfg.min_delta) {
            best = report.validation_loss;
            result.best_epoch = epoch;
            result.best_validation = best;
            result.checkpoint.encoder = encoder;
            result.head = head;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    result.checkpoint.head = to_json(result.head);
    return result;
}

std::vector<double> predict(const EncoderParams& encoder, const ClassifierHead& head,
                            std::span<const UserRecord> users, std::size_t threads) {
    if (head.input_dim() != encoder.config().embedding_dim()) {
        throw DimensionError("predict: classifier expects " + std::to_string(head.input_dim()) +
                             " inputs but the encoder produces " + std::to_string(encoder.config().embedding_dim()));
    }
    const Vector z = head.logits(encode_users(users, encoder, threads));
    std::vector<double> probs(static_cast<std::size_t>(z.size()));
    for (Eigen::Index i = 0; i < z.size(); ++i) probs[static_cast<std::size_t>(i)] = sigmoid(z(i));
    return probs;
}

DetectionScore f1_eval(std::span<const double> probs, std::span<const int> labels, double threshold) {
    if (probs.size() != labels.size()) throw DimensionError("f1_eval: one label per probability required");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const bool hit = probs[i] >= threshold;
        if (hit && labels[i] == 1) ++tp;
        if (hit && labels[i] != 1) ++fp;
        if (!hit && labels[i] == 1) ++fn;
    }
    DetectionScore s;
    if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

}  // namespace somer
