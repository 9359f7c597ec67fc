#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "somer/errors.hpp"

namespace somer {

/// Dense double matrix, row-major storage.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;

/// Boolean mask stored as bytes so it can be viewed through std::span.
using Mask = std::vector<std::uint8_t>;

inline constexpr double kLayerNormEps = 1e-5;

std::string shape_string(const Matrix& m);

/// Throws NumericError if any entry is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);

/// Matrix product. Throws DimensionError naming both shapes when a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Softmax restricted to positions where mask is nonzero; masked positions get 0.
/// Throws NumericError if every position is masked.
std::vector<double> masked_softmax(std::span<const double> scores, std::span<const std::uint8_t> mask);

/// gain * (x - mean) / sqrt(var + eps) + bias, population variance.
RowVector layer_norm(const RowVector& x, const RowVector& gain, const RowVector& bias,
                     double eps = kLayerNormEps);

double sigmoid(double x);

/// out x in matrix drawn uniformly from +-sqrt(6 / (in + out)).
Matrix glorot_uniform(Eigen::Index out, Eigen::Index in, std::mt19937_64& rng);

/// A named trainable tensor with its accumulated gradient.
struct ParamGroup {
    std::string name;
    Matrix value;
    Matrix grad;
};

/// Ordered collection of parameter groups, addressable by name.
class ParamSet {
public:
    ParamGroup& add(std::string name, Matrix value);

    ParamGroup& at(std::string_view name);
    const ParamGroup& at(std::string_view name) const;
    std::size_t index_of(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const noexcept { return groups_.size(); }
    ParamGroup& operator[](std::size_t i) { return groups_[i]; }
    const ParamGroup& operator[](std::size_t i) const { return groups_[i]; }

    auto begin() { return groups_.begin(); }
    auto end() { return groups_.end(); }
    auto begin() const { return groups_.begin(); }
    auto end() const { return groups_.end(); }

    void zero_grad();
    std::size_t parameter_count() const;

private:
    std::vector<ParamGroup> groups_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// One gradient buffer per group, shape-aligned with a ParamSet.
using GradBuffer = std::vector<Matrix>;

GradBuffer make_grad_buffer(const ParamSet& params);
void accumulate(GradBuffer& into, const GradBuffer& from);

struct FdGroupResult {
    std::string name;
    std::size_t coordinates_checked = 0;
    double max_rel_error = 0.0;
};

struct FdReport {
    double max_rel_error = 0.0;
    std::vector<FdGroupResult> groups;
};

/// Compares the analytic gradients stored in each group's `grad` against central
/// differences of `loss`. Checks every coordinate of a group when it has at most
/// `samples_per_group` entries, otherwise a seeded random sample of that size.
/// Relative error per coordinate: |a - c| / max(|a|, |c|, 1e-8).
FdReport finite_difference_check(const std::function<double()>& loss, std::span<ParamGroup* const> params,
                                 double eps, std::size_t samples_per_group = 200, std::uint64_t seed = 0);

}  // namespace somer
