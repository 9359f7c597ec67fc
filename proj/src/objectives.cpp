#include "somer/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "somer/parallel.hpp"
#include "somer/seeding.hpp"

namespace somer {

namespace {

// Guards floor/ceil against products like 0.9 * 10 landing just below an integer.
constexpr double kGridTol = 1e-9;

}  // namespace

void AugmentConfig::validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("augment: gamma must be positive");
    if (!(scale_step > 0.0)) throw ConfigError("augment: scale_step must be positive");
    if (lag_min_days < 0 || lag_max_days < lag_min_days) throw ConfigError("augment: invalid lag range");
    if (!(time_span_days > 0.0)) throw ConfigError("augment: time_span_days must be positive");
}

std::vector<double> scale_grid(const AugmentConfig& cfg) {
    std::vector<double> grid;
    const double lo = 1.0 - cfg.gamma;
    const double hi = 1.0 + cfg.gamma;
    for (int k = 0;; ++k) {
        const double s = lo + cfg.scale_step * k;
        if (s > hi + kGridTol) break;
        if (cfg.clamp_scale_nonneg && s < -kGridTol) continue;
        grid.push_back(s);
    }
    return grid;
}

std::pair<std::size_t, std::size_t> draw_count_range(std::size_t n, const AugmentConfig& cfg) {
    const double nd = static_cast<double>(n);
    const double lo_raw = std::floor((1.0 - cfg.gamma) * nd + kGridTol);
    const double hi_raw = std::ceil((1.0 + cfg.gamma) * nd - kGridTol);
    std::size_t lo = lo_raw < 1.0 ? 1 : static_cast<std::size_t>(lo_raw);
    std::size_t hi = std::max<std::size_t>(1, static_cast<std::size_t>(hi_raw));
    if (cfg.max_draws > 0) hi = std::min(hi, cfg.max_draws);
    lo = std::min(lo, hi);
    return {lo, hi};
}

std::vector<TripletEvent> augment(std::span<const TripletEvent> triplets, const AugmentConfig& cfg,
                                  std::mt19937_64& rng, AugmentTrace* trace) {
    if (triplets.empty()) throw DataError("augment: empty history");
    cfg.validate();
    const std::vector<double> grid = scale_grid(cfg);
    if (grid.empty()) throw ConfigError("augment: scale grid is empty");
    const auto [lo, hi] = draw_count_range(triplets.size(), cfg);

    std::uniform_int_distribution<std::size_t> count_dist(lo, hi);
    std::uniform_int_distribution<std::size_t> pick_dist(0, triplets.size() - 1);
    std::uniform_int_distribution<std::size_t> scale_dist(0, grid.size() - 1);
    std::uniform_int_distribution<int> lag_dist(cfg.lag_min_days, cfg.lag_max_days);

    const std::size_t m = count_dist(rng);
    if (trace) {
        *trace = AugmentTrace{};
        trace->draws = m;
    }
    std::vector<TripletEvent> out;
    out.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pick = pick_dist(rng);
        const double scale = grid[scale_dist(rng)];
        const int lag = lag_dist(rng);
        TripletEvent e = triplets[pick];
        e.v *= scale;
        e.t = std::clamp(e.t + lag / cfg.time_span_days, 0.0, 1.0);
        out.push_back(e);
        if (trace) {
            trace->picks.push_back(pick);
            trace->scales.push_back(scale);
            trace->lags.push_back(lag);
        }
    }
    return out;
}

ParamSet make_link_head(std::size_t hidden_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto k = static_cast<Eigen::Index>(hidden_dim);
    ParamSet head;
    head.add("link.w2", glorot_uniform(2 * k, 4 * k, rng));
    head.add("link.b", Matrix::Zero(1, 2 * k));
    head.add("link.w1", glorot_uniform(1, 2 * k, rng));
    return head;
}

ParamSet zero_link_head(std::size_t hidden_dim) {
    const auto k = static_cast<Eigen::Index>(hidden_dim);
    ParamSet head;
    head.add("link.w2", Matrix::Zero(2 * k, 4 * k));
    head.add("link.b", Matrix::Zero(1, 2 * k));
    head.add("link.w1", Matrix::Zero(1, 2 * k));
    return head;
}

ag::Var info_nce(ag::Var anchors, ag::Var positives, double tau) {
    if (!(tau > 0.0)) throw ConfigError("info_nce: tau must be positive");
    const Eigen::Index b = anchors.rows();
    if (b < 2) throw DataError("info_nce: need at least 2 anchors, got " + std::to_string(b));
    if (positives.rows() != b || positives.cols() != anchors.cols()) {
        throw DimensionError("info_nce: anchors " + shape_string(anchors.value()) + " vs positives " +
                             shape_string(positives.value()));
    }
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> others =
        Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Ones(b, b);
    for (Eigen::Index i = 0; i < b; ++i) others(i, i) = 0;
    ag::Var sims = ag::scale(ag::matmul_nt(anchors, anchors), 1.0 / tau);
    ag::Var pos = ag::scale(ag::row_sum(ag::mul(anchors, positives)), 1.0 / tau);
    return ag::mean_all(ag::sub(ag::logsumexp_rows(sims, others), pos));
}

double info_nce_loss(const Matrix& anchors, const Matrix& positives, double tau) {
    ag::Tape tape;
    return info_nce(tape.constant(anchors), tape.constant(positives), tau).value()(0, 0);
}

Matrix pair_labels(std::span<const std::string> ids, const EdgeList& edges) {
    const std::size_t b = ids.size();
    Matrix labels(static_cast<Eigen::Index>(b * (b - std::min<std::size_t>(b, 1))), 1);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            if (i != j) labels(row++, 0) = edges.contains(ids[i], ids[j]) ? 1.0 : 0.0;
        }
    }
    return labels;
}

ag::Var link_loss(ag::Var embeddings, const Matrix& labels, ag::Var w2, ag::Var b, ag::Var w1) {
    const auto n = static_cast<int>(embeddings.rows());
    if (n < 2) return embeddings.tape->constant(Matrix::Zero(1, 1));
    std::vector<int> left, right;
    left.reserve(static_cast<std::size_t>(n * (n - 1)));
    right.reserve(left.capacity());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            left.push_back(i);
            right.push_back(j);
        }
    }
    if (labels.rows() != static_cast<Eigen::Index>(left.size()) || labels.cols() != 1) {
        throw DimensionError("link_loss: expected " + std::to_string(left.size()) + " x 1 labels, got " +
                             shape_string(labels));
    }
    ag::Var parts[] = {ag::gather_rows(embeddings, std::move(left)), ag::gather_rows(embeddings, std::move(right))};
    ag::Var hidden = ag::relu(ag::linear(ag::concat_cols(parts), w2, b));
    return ag::bce_with_logits(ag::linear(hidden, w1, {}), labels);
}

double link_loss(const Matrix& embeddings, std::span<const std::string> ids, const EdgeList& edges,
                 const ParamSet& head) {
    if (static_cast<std::size_t>(embeddings.rows()) != ids.size()) {
        throw DimensionError("link_loss: " + std::to_string(ids.size()) + " ids for " + shape_string(embeddings));
    }
    ag::Tape tape;
    ag::Var e = tape.constant(embeddings);
    return link_loss(e, pair_labels(ids, edges), tape.constant(head.at("link.w2").value),
                     tape.constant(head.at("link.b").value), tape.constant(head.at("link.w1").value))
        .value()(0, 0);
}

double link_probability(const RowVector& ei, const RowVector& ej, const ParamSet& head) {
    RowVector x(ei.size() + ej.size());
    x << ei, ej;
    const Matrix& w2 = head.at("link.w2").value;
    RowVector h = (x * w2.transpose() + head.at("link.b").value).cwiseMax(0.0);
    return sigmoid((h * head.at("link.w1").value.transpose())(0, 0));
}

LossBreakdown embedding_loss(const Matrix& anchors, const Matrix& positives, std::span<const std::string> ids,
                             const EdgeList& edges, const ParamSet& head, const JointConfig& cfg,
                             Matrix* anchor_grad, Matrix* positive_grad, GradBuffer* head_grad) {
    ag::Tape tape;
    ag::Var a = tape.leaf(anchors);
    ag::Var p = tape.leaf(positives);
    ag::Var nce = info_nce(a, p, cfg.tau);
    ag::Var total = nce;
    LossBreakdown out;
    out.lambda = cfg.lambda;
    out.info_nce = nce.value()(0, 0);
    if (cfg.lambda != 0.0) {
        if (ids.size() != static_cast<std::size_t>(anchors.rows())) {
            throw DimensionError("joint loss: one id per anchor required");
        }
        Matrix* sinks[3] = {nullptr, nullptr, nullptr};
        if (head_grad) {
            for (std::size_t g = 0; g < 3; ++g) sinks[g] = &(*head_grad)[g];
        }
        ag::Var net = link_loss(a, pair_labels(ids, edges), tape.param(head.at("link.w2").value, sinks[0]),
                                tape.param(head.at("link.b").value, sinks[1]),
                                tape.param(head.at("link.w1").value, sinks[2]));
        out.network = net.value()(0, 0);
        total = ag::add(nce, ag::scale(net, cfg.lambda));
    }
    out.total = out.info_nce + cfg.lambda * out.network;
    if (!std::isfinite(out.total)) throw NumericError("joint loss is not finite");
    if (anchor_grad || positive_grad || head_grad) {
        tape.backward(total);
        if (anchor_grad) *anchor_grad = tape.grad(a);
        if (positive_grad) *positive_grad = tape.grad(p);
    }
    return out;
}

std::vector<std::vector<TripletEvent>> make_positives(std::span<const UserRecord> users, const AugmentConfig& cfg,
                                                      std::uint64_t seed) {
    std::vector<std::vector<TripletEvent>> out;
    out.reserve(users.size());
    for (std::size_t i = 0; i < users.size(); ++i) {
        std::mt19937_64 rng(derive_seed(seed, i));
        out.push_back(augment(users[i].triplets, cfg, rng));
    }
    return out;
}

LossBreakdown joint_loss(std::span<const UserRecord> users, std::span<const std::vector<TripletEvent>> positives,
                         const EdgeList& edges, const EncoderParams& encoder, const ParamSet& head,
                         const JointConfig& cfg, GradBuffer* encoder_grad, GradBuffer* head_grad,
                         std::size_t threads) {
    const std::size_t b = users.size();
    if (positives.size() != b) throw DimensionError("joint loss: one positive view per user required");
    if (head.size() != 3) throw DimensionError("joint loss: link head must hold 3 groups");
    const auto dim = static_cast<Eigen::Index>(encoder.config().embedding_dim());

    // Sequence s < b is user s; sequence b + s is its positive view.
    auto sequence = [&](std::size_t s) -> std::span<const TripletEvent> {
        return s < b ? std::span<const TripletEvent>(users[s].triplets) : std::span<const TripletEvent>(positives[s - b]);
    };

    Matrix embeddings(static_cast<Eigen::Index>(2 * b), dim);
    parallel_for(2 * b, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
        for (std::size_t s = begin; s < end; ++s) {
            ag::Tape tape;
            EncoderGraph g(tape, encoder);
            embeddings.row(static_cast<Eigen::Index>(s)) = g.user(sequence(s), users[s % b].profile).value();
        }
    });
    require_finite(embeddings, "joint loss embeddings");

    std::vector<std::string> ids;
    ids.reserve(b);
    for (const auto& u : users) ids.push_back(u.user_id);

    const auto bi = static_cast<Eigen::Index>(b);
    Matrix da, dp;
    const bool want_encoder = encoder_grad != nullptr;
    LossBreakdown loss = embedding_loss(embeddings.topRows(bi), embeddings.bottomRows(bi), ids, edges, head, cfg,
                                        want_encoder ? &da : nullptr, want_encoder ? &dp : nullptr, head_grad);
    if (!want_encoder) return loss;
    if (encoder_grad->size() != encoder.params().size()) {
        throw DimensionError("joint loss: encoder gradient buffer does not match parameters");
    }

    const std::size_t workers = effective_workers(2 * b, threads);
    std::vector<GradBuffer> partial(workers);
    for (auto& buf : partial) buf = make_grad_buffer(encoder.params());
    parallel_for(2 * b, workers, [&](std::size_t begin, std::size_t end, std::size_t w) {
        for (std::size_t s = begin; s < end; ++s) {
            const Matrix seed = s < b ? Matrix(da.row(static_cast<Eigen::Index>(s)))
                                      : Matrix(dp.row(static_cast<Eigen::Index>(s - b)));
            ag::Tape tape;
            EncoderGraph g(tape, encoder, &partial[w]);
            tape.backward(g.user(sequence(s), users[s % b].profile), seed);
        }
    });
    for (const auto& buf : partial) accumulate(*encoder_grad, buf);
    return loss;
}

}  // namespace somer
