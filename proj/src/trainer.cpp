#include "somer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "somer/seeding.hpp"

namespace somer {

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be at least 1");
    const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamState AdamState::zeros_like(const ParamSet& params) {
    AdamState s;
    for (const auto& g : params) {
        s.m.push_back(Matrix::Zero(g.value.rows(), g.value.cols()));
        s.v.push_back(Matrix::Zero(g.value.rows(), g.value.cols()));
    }
    return s;
}

void adam_step(ParamSet& params, AdamState& state, double lr, const AdamConfig& cfg) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw DimensionError("adam_step: optimizer state does not match the parameter set");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamGroup& g = params[i];
        if (g.grad.rows() != g.value.rows() || g.grad.cols() != g.value.cols() ||
            state.m[i].rows() != g.value.rows() || state.m[i].cols() != g.value.cols()) {
            throw DimensionError("adam_step: group '" + g.name + "' gradient or state has the wrong shape");
        }
        if (!g.grad.allFinite()) throw NumericError("adam_step: non-finite gradient in group '" + g.name + "'");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ParamGroup& g = params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g.grad;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.grad.cwiseAbs2();
        g.value.array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.eps);
    }
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (batch_size == 1) throw ConfigError("train: batch_size must be at least 2");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (!(gamma > 0.0)) throw ConfigError("train: gamma must be positive");
    if (!(lambda >= 0.0)) throw ConfigError("train: lambda must be non-negative");
    if (!(min_delta >= 0.0)) throw ConfigError("train: min_delta must be non-negative");
    if (!(time_budget_seconds >= 0.0)) throw ConfigError("train: time_budget_seconds must be non-negative");
    for (double f : {train_fraction, val_fraction, test_fraction}) {
        if (!(f >= 0.0)) throw ConfigError("train: split fractions must be non-negative");
    }
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
        throw ConfigError("train: split fractions must sum to 1");
    }
    encoder.validate();
}

std::size_t TrainConfig::effective_batch_size(bool link_active) const {
    if (batch_size != 0) return batch_size;
    return link_active ? 32 : 128;
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j{{"lr", c.lr},
                     {"max_epochs", c.max_epochs},
                     {"batch_size", c.batch_size},
                     {"tau", c.tau},
                     {"gamma", c.gamma},
                     {"lambda", c.lambda},
                     {"clamp_scale_nonneg", c.clamp_scale_nonneg},
                     {"seed", c.seed},
                     {"patience", c.patience},
                     {"min_delta", c.min_delta},
                     {"train_fraction", c.train_fraction},
                     {"val_fraction", c.val_fraction},
                     {"test_fraction", c.test_fraction},
                     {"threads", c.threads},
                     {"eval_initial", c.eval_initial},
                     {"time_budget_seconds", c.time_budget_seconds},
                     {"encoder", to_json(c.encoder)}};
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("training config must be a JSON object");
    try {
        c.lr = j.value("lr", c.lr);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.tau = j.value("tau", c.tau);
        c.gamma = j.value("gamma", c.gamma);
        c.lambda = j.value("lambda", c.lambda);
        c.clamp_scale_nonneg = j.value("clamp_scale_nonneg", c.clamp_scale_nonneg);
        c.seed = j.value("seed", c.seed);
        c.patience = j.value("patience", c.patience);
        c.min_delta = j.value("min_delta", c.min_delta);
        c.train_fraction = j.value("train_fraction", c.train_fraction);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.test_fraction = j.value("test_fraction", c.test_fraction);
        c.threads = j.value("threads", c.threads);
        c.eval_initial = j.value("eval_initial", c.eval_initial);
        c.time_budget_seconds = j.value("time_budget_seconds", c.time_budget_seconds);
        if (j.contains("encoder")) {
            nlohmann::json merged = to_json(c.encoder);
            merged.update(j.at("encoder"));
            c.encoder = encoder_config_from_json(merged);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("training config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json to_json(const EpochReport& r) {
    auto loss = [](const LossBreakdown& l) {
        return nlohmann::json{{"info_nce", l.info_nce}, {"network", l.network}, {"total", l.total}, {"lambda", l.lambda}};
    };
    return {{"epoch", r.epoch}, {"train", loss(r.train)}, {"validation", loss(r.validation)}, {"lr", r.lr}};
}

Split split_users(std::size_t n, double train_fraction, double val_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, 0x5117));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n))));
    const auto n_val =
        std::min(n - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                        order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

std::vector<BatchRange> batch_ranges(std::size_t n, std::size_t batch, bool merge_tail) {
    if (batch == 0) throw ConfigError("batch size must be positive");
    std::vector<BatchRange> out;
    for (std::size_t b = 0; b < n; b += batch) out.push_back({b, std::min(n, b + batch)});
    if (!out.empty() && out.back().end - out.back().begin < 2) {
        if (merge_tail && out.size() > 1) {
            const std::size_t end = out.back().end;
            out.pop_back();
            out.back().end = end;
        } else {
            out.pop_back();
        }
    }
    return out;
}

namespace {

std::vector<UserRecord> gather(const std::vector<UserRecord>& users, std::span<const std::size_t> idx) {
    std::vector<UserRecord> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(users[i]);
    return out;
}

void add_weighted(LossBreakdown& acc, const LossBreakdown& l, double w) {
    acc.info_nce += w * l.info_nce;
    acc.network += w * l.network;
}

LossBreakdown finish(LossBreakdown acc, double total_weight, double lambda) {
    acc.lambda = lambda;
    if (total_weight > 0.0) {
        acc.info_nce /= total_weight;
        acc.network /= total_weight;
    }
    acc.total = acc.info_nce + lambda * acc.network;
    return acc;
}

void copy_grads(ParamSet& params, GradBuffer& grads) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].grad = std::move(grads[i]);
}

constexpr std::uint64_t kValidationStream = 0x7a11d;
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kHeadStream = 0x4ead;

}  // namespace

LossBreakdown evaluate_loss(std::span<const UserRecord> users, const EdgeList& edges, const EncoderParams& encoder,
                            const ParamSet& head, const JointConfig& cfg, std::size_t batch_size, std::uint64_t seed,
                            std::size_t threads) {
    LossBreakdown acc;
    double weight = 0.0;
    const auto ranges = batch_ranges(users.size(), batch_size, true);
    for (std::size_t r = 0; r < ranges.size(); ++r) {
        auto batch = users.subspan(ranges[r].begin, ranges[r].end - ranges[r].begin);
        const auto positives = make_positives(batch, cfg.augment, derive_seed(seed, r));
        const LossBreakdown l = joint_loss(batch, positives, edges, encoder, head, cfg, nullptr, nullptr, threads);
        add_weighted(acc, l, static_cast<double>(batch.size()));
        weight += static_cast<double>(batch.size());
    }
    if (weight == 0.0) throw DataError("evaluate_loss: need at least 2 users");
    return finish(acc, weight, cfg.lambda);
}

PretrainResult pretrain(const Normalized& data, const EdgeList& edges, const TrainConfig& cfg,
                        const Preprocessor& preprocessor, const EpochCallback& on_epoch) {
    cfg.validate();
    const auto& all = data.dataset.users;
    if (all.empty()) throw ConfigError("pretrain: dataset is empty");

    PretrainResult result;
    result.split = split_users(all.size(), cfg.train_fraction, cfg.val_fraction, cfg.seed);
    const std::vector<UserRecord> train = gather(all, result.split.train);
    const std::vector<UserRecord> val = gather(all, result.split.validation);

    const EncoderConfig enc_cfg = config_for(data.dataset, data.stats, cfg.encoder);
    EncoderParams encoder(enc_cfg, derive_seed(cfg.seed, kInitStream));
    ParamSet head = make_link_head(enc_cfg.hidden_dim, derive_seed(cfg.seed, kHeadStream));

    JointConfig joint;
    joint.tau = cfg.tau;
    joint.lambda = cfg.lambda;
    joint.augment.gamma = cfg.gamma;
    joint.augment.clamp_scale_nonneg = cfg.clamp_scale_nonneg;
    joint.augment.time_span_days = data.stats.span_days() > 0.0 ? data.stats.span_days() : 1.0;
    joint.augment.max_draws = enc_cfg.max_seq_len;

    const bool link_active = cfg.lambda != 0.0 && !edges.empty();
    const std::size_t batch = cfg.effective_batch_size(link_active);

    result.checkpoint.encoder = encoder;
    result.checkpoint.link = head;
    result.checkpoint.preprocessor = preprocessor;
    result.checkpoint.stats = data.stats;

    if (cfg.eval_initial && train.size() >= 2) {
        result.initial_train = evaluate_loss(train, edges, encoder, head, joint, batch,
                                             derive_seed(cfg.seed, kValidationStream + 1), cfg.threads);
    }
    if (cfg.max_epochs == 0) return result;
    if (train.size() < 2) throw ConfigError("pretrain: training split needs at least 2 users");
    if (val.size() < 2) throw ConfigError("pretrain: validation split needs at least 2 users");

    const std::size_t batches_per_epoch = batch_ranges(train.size(), batch, false).size();
    const std::size_t total_steps = std::max<std::size_t>(1, cfg.max_epochs * batches_per_epoch);
    AdamState enc_state = AdamState::zeros_like(encoder.params());
    AdamState head_state = AdamState::zeros_like(head);

    std::ofstream history;
    if (cfg.history_path) {
        history.open(*cfg.history_path);
        if (!history) throw IoError("cannot write history to '" + cfg.history_path->string() + "'");
    }

    double best = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    const auto run_started = std::chrono::steady_clock::now();
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        if (cfg.time_budget_seconds > 0.0 && !result.history.empty()) {
            const double spent = std::chrono::duration<double>(started - run_started).count();
            if (spent + result.history.back().seconds > cfg.time_budget_seconds) break;
        }
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 shuffler(derive_seed(cfg.seed, 1000 + epoch));
        std::shuffle(order.begin(), order.end(), shuffler);
        const std::uint64_t epoch_seed = derive_seed(cfg.seed, 2000 + epoch);

        LossBreakdown acc;
        double weight = 0.0;
        double lr = cfg.lr;
        const auto ranges = batch_ranges(order.size(), batch, false);
        for (std::size_t r = 0; r < ranges.size(); ++r) {
            std::vector<UserRecord> users;
            for (std::size_t i = ranges[r].begin; i < ranges[r].end; ++i) users.push_back(train[order[i]]);
            const auto positives = make_positives(users, joint.augment, derive_seed(epoch_seed, r));
            GradBuffer enc_grad = make_grad_buffer(encoder.params());
            GradBuffer head_grad = make_grad_buffer(head);
            const LossBreakdown l =
                joint_loss(users, positives, edges, encoder, head, joint, &enc_grad, &head_grad, cfg.threads);
            lr = cosine_lr(step, total_steps, cfg.lr);
            copy_grads(encoder.params(), enc_grad);
            copy_grads(head, head_grad);
            adam_step(encoder.params(), enc_state, lr);
            adam_step(head, head_state, lr);
            ++step;
            add_weighted(acc, l, static_cast<double>(users.size()));
            weight += static_cast<double>(users.size());
        }
        encoder.params().zero_grad();
        head.zero_grad();

        EpochReport report;
        report.epoch = epoch;
        report.train = finish(acc, weight, cfg.lambda);
        report.validation = evaluate_loss(val, edges, encoder, head, joint, batch,
                                          derive_seed(cfg.seed, kValidationStream), cfg.threads);
        report.lr = lr;
        report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.history.push_back(report);
        if (history.is_open()) history << to_json(report).dump() << '\n' << std::flush;
        if (on_epoch) on_epoch(report);

        if (report.validation.total < best - cfg.min_delta) {
            best = report.validation.total;
            result.best_epoch = epoch;
            result.best_validation = best;
            result.checkpoint.encoder = encoder;
            result.checkpoint.link = head;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    return result;
}

}  // namespace somer
