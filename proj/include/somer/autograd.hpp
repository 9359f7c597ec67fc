#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to its Vars. Calling backward() walks the
// record in reverse and accumulates gradients. Parameter leaves reference the
// caller's matrix (no copy) and flush their gradient into a caller-supplied sink.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "somer/numerics.hpp"

namespace somer::ag {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Value that never receives a gradient.
    Var constant(Matrix value);
    /// Differentiable input; read its gradient with grad() after backward().
    Var leaf(Matrix value);
    /// Differentiable reference to `value`, which must outlive the tape.
    /// After backward() the gradient is added into `*sink` when sink is non-null.
    Var param(const Matrix& value, Matrix* sink);

    const Matrix& value(Var v) const;
    /// Gradient of the last backward() target with respect to v (zeros if unreached).
    Matrix grad(Var v) const;

    /// Reverse pass seeded with d(target)/d(out) = seed.
    void backward(Var out, const Matrix& seed);
    /// Reverse pass for a 1x1 output.
    void backward(Var out);

    std::size_t size() const noexcept { return nodes_.size(); }

    // Internal: used by the op implementations.
    using Backward = std::function<void(Tape&, int)>;
    Var push(Matrix value, bool needs_grad, Backward back);
    bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
    Matrix& grad_ref(int id);
    /// Adds g into the gradient of node id, taking ownership when it is the first contribution.
    void add_grad(int id, Matrix g);
    const Matrix& upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

private:
    struct Node {
        Matrix value;
        const Matrix* external = nullptr;
        Matrix grad;
        bool needs_grad = false;
        Matrix* sink = nullptr;
        Backward back;
    };
    std::vector<Node> nodes_;
};

// Shape-checked operations. All operands must belong to the same tape.
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
/// x * w^T + bias (bias is a 1 x out row broadcast over rows; pass an empty Var to omit)
Var linear(Var x, Var w, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1 x cols row to every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var mul(Var a, Var b);
Var tanh(Var a);
Var relu(Var a);
Var transpose(Var a);
Var gather_rows(Var table, std::vector<int> rows);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Row-wise layer normalization with 1 x cols gain and bias.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = kLayerNormEps);
/// Row-wise softmax; columns with col_mask == 0 receive probability 0.
/// An empty mask means all columns are active.
Var softmax_rows(Var scores, std::span<const std::uint8_t> col_mask = {});
/// Scaled dot-product attention for one head: softmax(q k^T * scale) v, ignoring keys with
/// key_mask == 0. Stores only the attention weights for the backward pass.
Var attention(Var q, Var k, Var v, double scale, std::span<const std::uint8_t> key_mask = {});
/// Row-wise log-sum-exp over entries where allowed(i, j) != 0; result is rows x 1.
Var logsumexp_rows(Var scores, const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& allowed);
/// Sum over columns; rows x 1.
Var row_sum(Var a);
/// Mean over rows; 1 x cols.
Var mean_rows(Var a);
Var mean_all(Var a);
/// Mean binary cross-entropy of sigmoid(logits) against labels, computed stably. 1 x 1.
Var bce_with_logits(Var logits, const Matrix& labels);
/// Batch normalization over rows using batch statistics (population variance).
/// The batch mean and variance are written to the optional outputs.
Var batch_norm_train(Var x, Var gain, Var bias, double eps, RowVector* batch_mean = nullptr,
                     RowVector* batch_var = nullptr);

}  // namespace somer::ag
