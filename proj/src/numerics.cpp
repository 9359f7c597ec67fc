#include "somer/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace somer {

std::string shape_string(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_finite(const Matrix& m, std::string_view what) {
    if (!m.allFinite()) {
        throw NumericError(std::string(what) + ": non-finite value in " + shape_string(m) + " matrix");
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_string(a) + " by " + shape_string(b));
    }
    Matrix out = a * b;
    require_finite(out, "matmul");
    return out;
}

std::vector<double> masked_softmax(std::span<const double> scores, std::span<const std::uint8_t> mask) {
    if (scores.size() != mask.size()) {
        throw DimensionError("masked_softmax: " + std::to_string(scores.size()) + " scores but " +
                             std::to_string(mask.size()) + " mask entries");
    }
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (mask[i]) hi = std::max(hi, scores[i]);
    }
    if (!std::isfinite(hi)) {
        throw NumericError("masked_softmax: every position is masked");
    }
    std::vector<double> out(scores.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (mask[i]) {
            out[i] = std::exp(scores[i] - hi);
            total += out[i];
        }
    }
    for (double& p : out) p /= total;
    return out;
}

RowVector layer_norm(const RowVector& x, const RowVector& gain, const RowVector& bias, double eps) {
    if (gain.size() != x.size() || bias.size() != x.size()) {
        throw DimensionError("layer_norm: input length " + std::to_string(x.size()) + ", gain length " +
                             std::to_string(gain.size()) + ", bias length " + std::to_string(bias.size()));
    }
    if (x.size() == 0) return x;
    const double mean = x.mean();
    const RowVector centered = x.array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + eps);
    return (centered.array() * inv * gain.array() + bias.array()).matrix();
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

ParamGroup& ParamSet::add(std::string name, Matrix value) {
    if (index_.count(name)) {
        throw ConfigError("duplicate parameter group '" + name + "'");
    }
    index_.emplace(name, groups_.size());
    Matrix grad = Matrix::Zero(value.rows(), value.cols());
    groups_.push_back(ParamGroup{std::move(name), std::move(value), std::move(grad)});
    return groups_.back();
}

std::size_t ParamSet::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
        throw ConfigError("unknown parameter group '" + std::string(name) + "'");
    }
    return it->second;
}

ParamGroup& ParamSet::at(std::string_view name) { return groups_[index_of(name)]; }
const ParamGroup& ParamSet::at(std::string_view name) const { return groups_[index_of(name)]; }
bool ParamSet::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

void ParamSet::zero_grad() {
    for (auto& g : groups_) g.grad.setZero(g.value.rows(), g.value.cols());
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += static_cast<std::size_t>(g.value.size());
    return n;
}

GradBuffer make_grad_buffer(const ParamSet& params) {
    GradBuffer buf;
    buf.reserve(params.size());
    for (const auto& g : params) buf.push_back(Matrix::Zero(g.value.rows(), g.value.cols()));
    return buf;
}

void accumulate(GradBuffer& into, const GradBuffer& from) {
    if (into.size() != from.size()) {
        throw DimensionError("accumulate: gradient buffers of different length");
    }
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

FdReport finite_difference_check(const std::function<double()>& loss, std::span<ParamGroup* const> params,
                                 double eps, std::size_t samples_per_group, std::uint64_t seed) {
    if (!(eps >= 1e-6 && eps <= 1e-3)) {
        throw ConfigError("finite_difference_check: eps must lie in [1e-6, 1e-3]");
    }
    std::mt19937_64 rng(seed);
    FdReport report;
    for (ParamGroup* group : params) {
        if (group->grad.rows() != group->value.rows() || group->grad.cols() != group->value.cols()) {
            throw DimensionError("finite_difference_check: gradient of '" + group->name + "' is " +
                                 shape_string(group->grad) + ", value is " + shape_string(group->value));
        }
        const auto total = static_cast<std::size_t>(group->value.size());
        std::vector<std::size_t> coords;
        if (total <= samples_per_group) {
            coords.resize(total);
            for (std::size_t i = 0; i < total; ++i) coords[i] = i;
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, total - 1);
            coords.reserve(samples_per_group);
            for (std::size_t i = 0; i < samples_per_group; ++i) coords.push_back(pick(rng));
        }

        FdGroupResult result{group->name, coords.size(), 0.0};
        double* data = group->value.data();
        const double* grad = group->grad.data();
        for (std::size_t c : coords) {
            const double saved = data[c];
            data[c] = saved + eps;
            const double up = loss();
            data[c] = saved - eps;
            const double down = loss();
            data[c] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("finite_difference_check: non-finite loss while perturbing '" + group->name + "'");
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = grad[c];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
        }
        report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
        report.groups.push_back(std::move(result));
    }
    return report;
}

Matrix glorot_uniform(Eigen::Index out, Eigen::Index in, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix m(out, in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

}  // namespace somer
