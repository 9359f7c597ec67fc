#include "somer/autograd.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace somer::ag {

namespace {

Tape& tape_of(Var a) {
    if (a.tape == nullptr) throw ConfigError("autograd: operand is not attached to a tape");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    Tape& t = tape_of(a);
    if (b.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
    return t;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
    }
}

bool present(Var v) { return v.tape != nullptr && v.id >= 0; }

}  // namespace

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push(Matrix value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::leaf(Matrix value) { return push(std::move(value), true, {}); }

Var Tape::param(const Matrix& value, Matrix* sink) {
    Node n;
    n.external = &value;
    n.needs_grad = true;
    n.sink = sink;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external != nullptr ? *n.external : n.value;
}

Matrix Tape::grad(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.size() == 0) {
        const Matrix& val = value(v);
        return Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
}

void Tape::add_grad(int id, Matrix g) {
    Matrix& cur = nodes_[static_cast<std::size_t>(id)].grad;
    if (cur.size() == 0) {
        cur = std::move(g);
    } else {
        cur += g;
    }
}

Matrix& Tape::grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
        const Matrix& val = n.external != nullptr ? *n.external : n.value;
        n.grad = Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
}

void Tape::backward(Var out, const Matrix& seed) {
    const Matrix& v = value(out);
    require_same_shape(v, seed, "backward");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<std::size_t>(out.id)].grad = seed;
    for (int id = out.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
        n.back(*this, id);
    }
    for (auto& n : nodes_) {
        if (n.sink != nullptr && n.grad.size() != 0) *n.sink += n.grad;
    }
}

void Tape::backward(Var out) {
    const Matrix& v = value(out);
    if (v.rows() != 1 || v.cols() != 1) {
        throw DimensionError("backward: scalar seed needs a 1x1 output, got " + shape_string(v));
    }
    backward(out, Matrix::Ones(1, 1));
}

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw DimensionError("matmul: cannot multiply " + shape_string(av) + " by " + shape_string(bv));
    }
    Matrix out = av * bv;
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), ng, [a, b](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.add_grad(a.id, up * tp.value(b).transpose());
        if (tp.needs_grad(b)) tp.add_grad(b.id, tp.value(a).transpose() * up);
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw DimensionError("matmul_nt: cannot multiply " + shape_string(av) + " by transpose of " +
                             shape_string(bv));
    }
    Matrix out = av * bv.transpose();
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), ng, [a, b](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.add_grad(a.id, up * tp.value(b));
        if (tp.needs_grad(b)) tp.add_grad(b.id, up.transpose() * tp.value(a));
    });
}

Var linear(Var x, Var w, Var bias) {
    Tape& t = tape_of(x, w);
    const Matrix& xv = x.value();
    const Matrix& wv = w.value();
    if (xv.cols() != wv.cols()) {
        throw DimensionError("linear: input " + shape_string(xv) + " does not match weight " + shape_string(wv));
    }
    Matrix out = xv * wv.transpose();
    const bool has_bias = present(bias);
    if (has_bias) {
        if (bias.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
        const Matrix& bv = bias.value();
        if (bv.rows() != 1 || bv.cols() != wv.rows()) {
            throw DimensionError("linear: bias " + shape_string(bv) + " does not match weight " + shape_string(wv));
        }
        out.rowwise() += bv.row(0);
    }
    const bool ng = t.needs_grad(x) || t.needs_grad(w) || (has_bias && t.needs_grad(bias));
    return t.push(std::move(out), ng, [x, w, bias, has_bias](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(x)) tp.add_grad(x.id, up * tp.value(w));
        if (tp.needs_grad(w)) tp.add_grad(w.id, up.transpose() * tp.value(x));
        if (has_bias && tp.needs_grad(bias)) tp.grad_ref(bias.id) += up.colwise().sum();
    });
}

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value() + b.value();
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), ng, [a, b](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.add_grad(a.id, up);
        if (tp.needs_grad(b)) tp.add_grad(b.id, up);
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Matrix out = a.value() - b.value();
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), ng, [a, b](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.grad_ref(a.id) += up;
        if (tp.needs_grad(b)) tp.grad_ref(b.id) -= up;
    });
}

Var add_row(Var a, Var row) {
    Tape& t = tape_of(a, row);
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != a.value().cols()) {
        throw DimensionError("add_row: row " + shape_string(rv) + " does not broadcast over " +
                             shape_string(a.value()));
    }
    Matrix out = a.value();
    out.rowwise() += rv.row(0);
    const bool ng = t.needs_grad(a) || t.needs_grad(row);
    return t.push(std::move(out), ng, [a, row](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.grad_ref(a.id) += up;
        if (tp.needs_grad(row)) tp.grad_ref(row.id) += up.colwise().sum();
    });
}

Var scale(Var a, double s) {
    Tape& t = tape_of(a);
    Matrix out = a.value() * s;
    return t.push(std::move(out), t.needs_grad(a), [a, s](Tape& tp, int self) {
        tp.add_grad(a.id, tp.upstream(self) * s);
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    return t.push(std::move(out), ng, [a, b](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(a)) tp.grad_ref(a.id) += up.cwiseProduct(tp.value(b));
        if (tp.needs_grad(b)) tp.grad_ref(b.id) += up.cwiseProduct(tp.value(a));
    });
}

Var tanh(Var a) {
    Tape& t = tape_of(a);
    Matrix out = a.value().array().tanh().matrix();
    return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
        const Matrix& y = tp.value(Var{&tp, self});
        tp.grad_ref(a.id).array() += tp.upstream(self).array() * (1.0 - y.array().square());
    });
}

Var relu(Var a) {
    Tape& t = tape_of(a);
    Matrix out = a.value().cwiseMax(0.0);
    return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
        const Matrix& x = tp.value(a);
        tp.grad_ref(a.id).array() += (x.array() > 0.0).select(tp.upstream(self).array(), 0.0);
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    Matrix out = a.value().transpose();
    return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
        tp.grad_ref(a.id) += tp.upstream(self).transpose();
    });
}

Var gather_rows(Var table, std::vector<int> rows) {
    Tape& t = tape_of(table);
    const Matrix& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= tv.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                                 std::to_string(tv.rows()) + " rows");
        }
        out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    return t.push(std::move(out), t.needs_grad(table), [table, rows = std::move(rows)](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        Matrix& g = tp.grad_ref(table.id);
        for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += up.row(static_cast<Eigen::Index>(i));
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    Tape& t = tape_of(parts[0]);
    const Eigen::Index rows = parts[0].value().rows();
    Eigen::Index cols = 0;
    bool ng = false;
    for (Var p : parts) {
        if (p.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
        if (p.value().rows() != rows) {
            throw DimensionError("concat_cols: row counts " + std::to_string(rows) + " and " +
                                 std::to_string(p.value().rows()) + " differ");
        }
        cols += p.value().cols();
        ng = ng || t.needs_grad(p);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleCols(at, p.value().cols()) = p.value();
        at += p.value().cols();
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return t.push(std::move(out), ng, [saved = std::move(saved)](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        Eigen::Index off = 0;
        for (Var p : saved) {
            const Eigen::Index c = tp.value(p).cols();
            if (tp.needs_grad(p)) tp.grad_ref(p.id) += up.middleCols(off, c);
            off += c;
        }
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    Tape& t = tape_of(a);
    const Matrix& av = a.value();
    if (start < 0 || count < 0 || start + count > av.cols()) {
        throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") outside " + shape_string(av));
    }
    Matrix out = av.middleCols(start, count);
    return t.push(std::move(out), t.needs_grad(a), [a, start, count](Tape& tp, int self) {
        tp.grad_ref(a.id).middleCols(start, count) += tp.upstream(self);
    });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    Tape& t = tape_of(x, gain);
    if (bias.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
    const Matrix& xv = x.value();
    const Matrix& gv = gain.value();
    const Matrix& bv = bias.value();
    if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols()) {
        throw DimensionError("layer_norm_rows: gain " + shape_string(gv) + ", bias " + shape_string(bv) +
                             " for input " + shape_string(xv));
    }
    const double n = static_cast<double>(xv.cols());
    Vector mean = xv.rowwise().sum() / n;
    Matrix xhat = xv.colwise() - mean;
    Vector inv = ((xhat.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
    xhat.array().colwise() *= inv.array();
    Matrix out = xhat.array().rowwise() * gv.row(0).array();
    out.rowwise() += bv.row(0);
    const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    return t.push(std::move(out), ng,
                  [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv), n](Tape& tp, int self) {
                      const Matrix& up = tp.upstream(self);
                      if (tp.needs_grad(gain)) tp.grad_ref(gain.id) += up.cwiseProduct(xhat).colwise().sum();
                      if (tp.needs_grad(bias)) tp.grad_ref(bias.id) += up.colwise().sum();
                      if (tp.needs_grad(x)) {
                          Matrix dxhat = up.array().rowwise() * tp.value(gain).row(0).array();
                          Vector m1 = dxhat.rowwise().sum() / n;
                          Vector m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
                          Matrix dx = dxhat.colwise() - m1;
                          dx.array() -= xhat.array().colwise() * m2.array();
                          dx.array().colwise() *= inv.array();
                          tp.add_grad(x.id, std::move(dx));
                      }
                  });
}

namespace {

// Row-wise masked softmax in place.
void softmax_inplace(Matrix& p, std::span<const std::uint8_t> col_mask, const char* op) {
    if (!col_mask.empty()) {
        if (static_cast<Eigen::Index>(col_mask.size()) != p.cols()) {
            throw DimensionError(std::string(op) + ": mask of length " + std::to_string(col_mask.size()) + " for " +
                                 shape_string(p));
        }
        bool any = false;
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            if (col_mask[static_cast<std::size_t>(j)]) {
                any = true;
            } else {
                p.col(j).setConstant(-std::numeric_limits<double>::infinity());
            }
        }
        if (!any) throw NumericError(std::string(op) + ": every position is masked");
    } else if (p.cols() == 0) {
        throw NumericError(std::string(op) + ": empty row");
    }
    Vector hi = p.rowwise().maxCoeff();
    p.colwise() -= hi;
    p = p.array().exp().matrix();
    Vector total = p.rowwise().sum();
    p.array().colwise() /= total.array();
}

// Softmax backward: p * (up - rowsum(up * p)).
Matrix softmax_backward(const Matrix& up, const Matrix& p) {
    Vector dot = up.cwiseProduct(p).rowwise().sum();
    Matrix g = up.colwise() - dot;
    g.array() *= p.array();
    return g;
}

}  // namespace

Var softmax_rows(Var scores, std::span<const std::uint8_t> col_mask) {
    Tape& t = tape_of(scores);
    Matrix p = scores.value();
    softmax_inplace(p, col_mask, "softmax_rows");
    return t.push(std::move(p), t.needs_grad(scores), [scores](Tape& tp, int self) {
        tp.add_grad(scores.id, softmax_backward(tp.upstream(self), tp.value(Var{&tp, self})));
    });
}

Var attention(Var q, Var k, Var v, double scale, std::span<const std::uint8_t> key_mask) {
    Tape& t = tape_of(q, k);
    if (v.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    if (qv.cols() != kv.cols() || kv.rows() != vv.rows()) {
        throw DimensionError("attention: query " + shape_string(qv) + ", key " + shape_string(kv) + ", value " +
                             shape_string(vv));
    }
    Matrix p(qv.rows(), kv.rows());
    p.noalias() = qv * kv.transpose();
    p *= scale;
    softmax_inplace(p, key_mask, "attention");
    Matrix out = p * vv;
    const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    return t.push(std::move(out), ng, [q, k, v, scale, p = std::move(p)](Tape& tp, int self) {
        const Matrix& up = tp.upstream(self);
        if (tp.needs_grad(v)) tp.add_grad(v.id, p.transpose() * up);
        if (!tp.needs_grad(q) && !tp.needs_grad(k)) return;
        Matrix ds = softmax_backward(up * tp.value(v).transpose(), p);
        ds *= scale;
        if (tp.needs_grad(q)) tp.add_grad(q.id, ds * tp.value(k));
        if (tp.needs_grad(k)) tp.add_grad(k.id, ds.transpose() * tp.value(q));
    });
}

Var logsumexp_rows(Var scores, const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& allowed) {
    Tape& t = tape_of(scores);
    const Matrix& s = scores.value();
    if (allowed.rows() != s.rows() || allowed.cols() != s.cols()) {
        throw DimensionError("logsumexp_rows: mask shape does not match " + shape_string(s));
    }
    Matrix out(s.rows(), 1);
    Matrix weights = Matrix::Zero(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (allowed(i, j)) hi = std::max(hi, s(i, j));
        }
        if (!std::isfinite(hi)) throw NumericError("logsumexp_rows: row " + std::to_string(i) + " has no entries");
        double total = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            if (allowed(i, j)) {
                weights(i, j) = std::exp(s(i, j) - hi);
                total += weights(i, j);
            }
        }
        weights.row(i) /= total;
        out(i, 0) = hi + std::log(total);
    }
    return t.push(std::move(out), t.needs_grad(scores),
                  [scores, weights = std::move(weights)](Tape& tp, int self) {
                      const Matrix& up = tp.upstream(self);
                      tp.grad_ref(scores.id).array() += weights.array().colwise() * up.col(0).array();
                  });
}

Var row_sum(Var a) {
    Tape& t = tape_of(a);
    Matrix out = a.value().rowwise().sum();
    return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
        tp.grad_ref(a.id).colwise() += tp.upstream(self).col(0);
    });
}

Var mean_rows(Var a) {
    Tape& t = tape_of(a);
    const Matrix& av = a.value();
    if (av.rows() == 0) throw DimensionError("mean_rows: no rows");
    const double n = static_cast<double>(av.rows());
    Matrix out = av.colwise().sum() / n;
    return t.push(std::move(out), t.needs_grad(a), [a, n](Tape& tp, int self) {
        tp.grad_ref(a.id).rowwise() += tp.upstream(self).row(0) / n;
    });
}

Var mean_all(Var a) {
    Tape& t = tape_of(a);
    const Matrix& av = a.value();
    if (av.size() == 0) throw DimensionError("mean_all: empty matrix");
    const double n = static_cast<double>(av.size());
    Matrix out(1, 1);
    out(0, 0) = av.sum() / n;
    return t.push(std::move(out), t.needs_grad(a), [a, n](Tape& tp, int self) {
        tp.grad_ref(a.id).array() += tp.upstream(self)(0, 0) / n;
    });
}

Var bce_with_logits(Var logits, const Matrix& labels) {
    Tape& t = tape_of(logits);
    const Matrix& z = logits.value();
    require_same_shape(z, labels, "bce_with_logits");
    if (z.size() == 0) throw DimensionError("bce_with_logits: empty input");
    const double n = static_cast<double>(z.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            const double zz = z(i, j);
            total += std::max(zz, 0.0) - zz * labels(i, j) + std::log1p(std::exp(-std::abs(zz)));
        }
    }
    Matrix out(1, 1);
    out(0, 0) = total / n;
    return t.push(std::move(out), t.needs_grad(logits), [logits, labels, n](Tape& tp, int self) {
        const double up = tp.upstream(self)(0, 0);
        const Matrix& zv = tp.value(logits);
        Matrix& g = tp.grad_ref(logits.id);
        for (Eigen::Index i = 0; i < zv.rows(); ++i) {
            for (Eigen::Index j = 0; j < zv.cols(); ++j) {
                g(i, j) += up * (sigmoid(zv(i, j)) - labels(i, j)) / n;
            }
        }
    });
}

Var batch_norm_train(Var x, Var gain, Var bias, double eps, RowVector* batch_mean, RowVector* batch_var) {
    Tape& t = tape_of(x, gain);
    if (bias.tape != &t) throw ConfigError("autograd: operands belong to different tapes");
    const Matrix& xv = x.value();
    const Matrix& gv = gain.value();
    const Matrix& bv = bias.value();
    if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols()) {
        throw DimensionError("batch_norm_train: gain " + shape_string(gv) + ", bias " + shape_string(bv) +
                             " for input " + shape_string(xv));
    }
    if (xv.rows() == 0) throw DimensionError("batch_norm_train: empty batch");
    const double n = static_cast<double>(xv.rows());
    RowVector mean = xv.colwise().sum() / n;
    Matrix xhat = xv.rowwise() - mean;
    RowVector var = xhat.array().square().colwise().sum() / n;
    RowVector inv = (var.array() + eps).rsqrt().matrix();
    xhat.array().rowwise() *= inv.array();
    Matrix out = xhat.array().rowwise() * gv.row(0).array();
    out.rowwise() += bv.row(0);
    if (batch_mean != nullptr) *batch_mean = mean;
    if (batch_var != nullptr) *batch_var = var;
    const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    return t.push(std::move(out), ng,
                  [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv), n](Tape& tp, int self) {
                      const Matrix& up = tp.upstream(self);
                      if (tp.needs_grad(gain)) tp.grad_ref(gain.id) += up.cwiseProduct(xhat).colwise().sum();
                      if (tp.needs_grad(bias)) tp.grad_ref(bias.id) += up.colwise().sum();
                      if (tp.needs_grad(x)) {
                          Matrix dxhat = up.array().rowwise() * tp.value(gain).row(0).array();
                          RowVector m1 = dxhat.colwise().sum() / n;
                          RowVector m2 = dxhat.cwiseProduct(xhat).colwise().sum() / n;
                          Matrix dx = dxhat.rowwise() - m1;
                          dx.array() -= xhat.array().rowwise() * m2.array();
                          dx.array().rowwise() *= inv.array();
                          tp.grad_ref(x.id) += dx;
                      }
                  });
}

}  // namespace somer::ag
