#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "somer/autograd.hpp"
#include "somer/errors.hpp"

using namespace somer;
namespace {

using Build = std::function<ag::Var(ag::Tape&, std::vector<ag::Var>&)>;

// Scalarizes an op's output against fixed random weights, then compares the tape gradient
// of each input with central differences evaluated on fresh tapes.
double worst_gradient_error(const Build& build, std::vector<Matrix> inputs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Matrix weights;
    auto evaluate = [&](const std::vector<Matrix>& xs, std::vector<Matrix>* grads) {
        ag::Tape tape;
        std::vector<ag::Var> leaves;
        for (const auto& x : xs) leaves.push_back(tape.leaf(x));
        const ag::Var out = build(tape, leaves);
        if (weights.size() == 0) weights = oracle::random_matrix(out.rows(), out.cols(), rng);
        const double value = (out.value().array() * weights.array()).sum();
        if (grads) {
            tape.backward(out, weights);
            for (const auto& l : leaves) grads->push_back(tape.grad(l));
        }
        return value;
    };
    std::vector<Matrix> analytic;
    evaluate(inputs, &analytic);
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
            const double saved = inputs[k].data()[i];
            inputs[k].data()[i] = saved + h;
            const double up = evaluate(inputs, nullptr);
            inputs[k].data()[i] = saved - h;
            const double down = evaluate(inputs, nullptr);
            inputs[k].data()[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[k].data()[i];
            worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
        }
    }
    return worst;
}

Matrix rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return oracle::random_matrix(r, c, rng);
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise and linear-algebra ops differentiate correctly") {
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::matmul(x[0], x[1]); }, {rnd(3, 4, 1), rnd(4, 2, 2)}, 1) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::matmul_nt(x[0], x[1]); }, {rnd(3, 4, 1), rnd(5, 4, 2)}, 2) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::linear(x[0], x[1], x[2]); },
                               {rnd(3, 4, 1), rnd(5, 4, 2), rnd(1, 5, 3)}, 3) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::linear(x[0], x[1], ag::Var{}); },
                               {rnd(3, 4, 1), rnd(5, 4, 2)}, 3) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::add(x[0], x[1]); }, {rnd(2, 3, 1), rnd(2, 3, 2)}, 4) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::sub(x[0], x[1]); }, {rnd(2, 3, 1), rnd(2, 3, 2)}, 5) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::add_row(x[0], x[1]); }, {rnd(4, 3, 1), rnd(1, 3, 2)}, 6) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::scale(x[0], -2.5); }, {rnd(2, 2, 1)}, 7) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::mul(x[0], x[1]); }, {rnd(3, 3, 1), rnd(3, 3, 2)}, 8) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::tanh(x[0]); }, {rnd(3, 3, 1)}, 9) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::relu(x[0]); }, {rnd(3, 3, 4)}, 10) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::transpose(x[0]); }, {rnd(2, 5, 1)}, 11) < kTol);
}

TEST_CASE("structural ops differentiate correctly") {
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::gather_rows(x[0], {2, 0, 2, 3}); }, {rnd(4, 3, 1)}, 1) < kTol);
    CHECK(worst_gradient_error(
              [](ag::Tape&, auto& x) {
                  const ag::Var parts[] = {x[0], x[1]};
                  return ag::concat_cols(parts);
              },
              {rnd(2, 3, 1), rnd(2, 2, 2)}, 2) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::slice_cols(x[0], 1, 3); }, {rnd(3, 5, 1)}, 3) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::row_sum(x[0]); }, {rnd(3, 4, 1)}, 4) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::mean_rows(x[0]); }, {rnd(3, 4, 1)}, 5) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::mean_all(x[0]); }, {rnd(3, 4, 1)}, 6) < kTol);
}

TEST_CASE("normalization, softmax and attention differentiate correctly") {
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::layer_norm_rows(x[0], x[1], x[2]); },
                               {rnd(3, 6, 1), rnd(1, 6, 2), rnd(1, 6, 3)}, 1) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::softmax_rows(x[0]); }, {rnd(3, 4, 1)}, 2) < kTol);
    const Mask cols{1, 0, 1, 1};
    CHECK(worst_gradient_error([&](ag::Tape&, auto& x) { return ag::softmax_rows(x[0], cols); }, {rnd(3, 4, 1)}, 3) < kTol);
    const Mask keys{1, 1, 0, 1, 0};
    CHECK(worst_gradient_error([&](ag::Tape&, auto& x) { return ag::attention(x[0], x[1], x[2], 0.5, keys); },
                               {rnd(5, 4, 1), rnd(5, 4, 2), rnd(5, 3, 3)}, 4) < kTol);
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> allowed(3, 3);
    allowed << 0, 1, 1, 1, 0, 1, 1, 1, 0;
    CHECK(worst_gradient_error([&](ag::Tape&, auto& x) { return ag::logsumexp_rows(x[0], allowed); }, {rnd(3, 3, 1)}, 5) < kTol);
    Matrix labels(4, 1);
    labels << 1, 0, 0, 1;
    CHECK(worst_gradient_error([&](ag::Tape&, auto& x) { return ag::bce_with_logits(x[0], labels); }, {rnd(4, 1, 1)}, 6) < kTol);
    CHECK(worst_gradient_error([](ag::Tape&, auto& x) { return ag::batch_norm_train(x[0], x[1], x[2], 1e-5); },
                               {rnd(6, 3, 1), rnd(1, 3, 2), rnd(1, 3, 3)}, 7) < kTol);
}

TEST_CASE("attention matches a straight-line computation") {
    const Matrix q = rnd(4, 3, 1), k = rnd(4, 3, 2), v = rnd(4, 2, 3);
    const Mask keys{1, 0, 1, 1};
    ag::Tape tape;
    const Matrix out = ag::attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 0.7, keys).value();
    for (Eigen::Index i = 0; i < 4; ++i) {
        std::vector<double> s;
        std::vector<Eigen::Index> idx;
        for (Eigen::Index j = 0; j < 4; ++j) {
            if (!keys[static_cast<std::size_t>(j)]) continue;
            s.push_back(0.7 * oracle::dot(q.row(i), k.row(j)));
            idx.push_back(j);
        }
        const auto p = oracle::softmax(s);
        for (Eigen::Index c = 0; c < 2; ++c) {
            double expect = 0.0;
            for (std::size_t m = 0; m < idx.size(); ++m) expect += p[m] * v(idx[m], c);
            CHECK(std::abs(out(i, c) - expect) <= 1e-12);
        }
    }
}

TEST_CASE("bce_with_logits is stable at extreme logits") {
    Matrix z(2, 1), y(2, 1);
    z << 800, -800;
    y << 0, 1;
    ag::Tape tape;
    const double loss = ag::bce_with_logits(tape.leaf(z), y).value()(0, 0);
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(800.0));
}

TEST_CASE("parameters flush gradients into their sinks") {
    const Matrix w = rnd(2, 2, 1);
    Matrix sink = Matrix::Zero(2, 2);
    for (int pass = 0; pass < 2; ++pass) {
        ag::Tape tape;
        const ag::Var p = tape.param(w, &sink);
        tape.backward(ag::mean_all(ag::mul(p, p)));
    }
    CHECK((sink - w).cwiseAbs().maxCoeff() <= 1e-15);  // 2 passes of 2w/4
}

TEST_CASE("constants receive no gradient and shapes are checked") {
    ag::Tape tape;
    const ag::Var c = tape.constant(Matrix::Ones(2, 2));
    const ag::Var x = tape.leaf(Matrix::Ones(2, 2));
    tape.backward(ag::mean_all(ag::mul(c, x)));
    CHECK(tape.grad(c).cwiseAbs().maxCoeff() == 0.0);
    CHECK(tape.grad(x)(0, 0) == 0.25);
    CHECK_THROWS_AS(ag::matmul(x, tape.leaf(Matrix::Ones(3, 1))), DimensionError);
    CHECK_THROWS_AS(ag::add(x, tape.leaf(Matrix::Ones(2, 3))), DimensionError);

    ag::Tape other;
    CHECK_THROWS_AS(ag::add(x, other.leaf(Matrix::Ones(2, 2))), ConfigError);
}
