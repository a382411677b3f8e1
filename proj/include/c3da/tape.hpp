#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "c3da/common.hpp"

namespace c3da {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

// Reverse-mode autodiff over dense double matrices. A Tape is built per
// forward pass and discarded afterwards; nodes reference only earlier nodes,
// so a single reverse sweep over creation order is a valid topological order.
class Tape {
public:
    using Var = std::int32_t;

    Var leaf(Matrix value, bool needs_grad = true) {
        return push(std::move(value), needs_grad, {});
    }

    Var constant(Matrix value) { return leaf(std::move(value), false); }

    const Matrix& value(Var v) const { return nodes_[v].value; }
    const Matrix& grad(Var v) const { return nodes_[v].grad; }
    double scalar(Var v) const { return nodes_[v].value(0, 0); }
    std::size_t size() const { return nodes_.size(); }

    Var matmul(Var a, Var b) {
        Matrix out = value(a) * value(b);
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad.noalias() += nodes_[o].grad * value(b).transpose();
            if (needs(b)) nodes_[b].grad.noalias() += value(a).transpose() * nodes_[o].grad;
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Matrix out = value(a) * value(b).transpose();
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad.noalias() += nodes_[o].grad * value(b);
            if (needs(b)) nodes_[b].grad.noalias() += nodes_[o].grad.transpose() * value(a);
        });
    }

    Var add(Var a, Var b) {
        Matrix out = value(a) + value(b);
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad;
            if (needs(b)) nodes_[b].grad += nodes_[o].grad;
        });
    }

    Var sub(Var a, Var b) {
        Matrix out = value(a) - value(b);
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad;
            if (needs(b)) nodes_[b].grad -= nodes_[o].grad;
        });
    }

    Var hadamard(Var a, Var b) {
        Matrix out = value(a).cwiseProduct(value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad.cwiseProduct(value(b));
            if (needs(b)) nodes_[b].grad += nodes_[o].grad.cwiseProduct(value(a));
        });
    }

    Var div(Var a, Var b) {
        Matrix out = value(a).cwiseQuotient(value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad.cwiseQuotient(value(b));
            if (needs(b))
                nodes_[b].grad -= nodes_[o]
                                      .grad.cwiseProduct(value(a))
                                      .cwiseQuotient(value(b).cwiseProduct(value(b)));
        });
    }

    Var scale(Var a, double k) {
        Matrix out = value(a) * k;
        return push(std::move(out), needs(a), [this, a, k](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad * k;
        });
    }

    Var add_scalar(Var a, double k) {
        Matrix out = value(a).array() + k;
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad;
        });
    }

    Var neg(Var a) { return scale(a, -1.0); }

    // Adds a 1xC row vector to every row of a.
    Var add_rowvec(Var a, Var row) {
        Matrix out = value(a).rowwise() + value(row).row(0);
        return push(std::move(out), needs(a) || needs(row), [this, a, row](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad;
            if (needs(row)) nodes_[row].grad += nodes_[o].grad.colwise().sum();
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        Eigen::Index rows = 0;
        const Eigen::Index cols = value(parts.front()).cols();
        for (Var p : parts) rows += value(p).rows();
        Matrix out(rows, cols);
        Eigen::Index r = 0;
        bool ng = false;
        for (Var p : parts) {
            out.middleRows(r, value(p).rows()) = value(p);
            r += value(p).rows();
            ng = ng || needs(p);
        }
        std::vector<Var> ps = parts;
        return push(std::move(out), ng, [this, ps](Var o) {
            Eigen::Index r = 0;
            for (Var p : ps) {
                if (needs(p)) nodes_[p].grad += nodes_[o].grad.middleRows(r, value(p).rows());
                r += value(p).rows();
            }
        });
    }

    Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
        Matrix out = value(a).middleRows(r0, n);
        return push(std::move(out), needs(a), [this, a, r0, n](Var o) {
            if (needs(a)) nodes_[a].grad.middleRows(r0, n) += nodes_[o].grad;
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        Eigen::Index cols = 0;
        const Eigen::Index rows = value(parts.front()).rows();
        for (Var p : parts) cols += value(p).cols();
        Matrix out(rows, cols);
        Eigen::Index c = 0;
        bool ng = false;
        for (Var p : parts) {
            out.middleCols(c, value(p).cols()) = value(p);
            c += value(p).cols();
            ng = ng || needs(p);
        }
        std::vector<Var> ps = parts;
        return push(std::move(out), ng, [this, ps](Var o) {
            Eigen::Index c = 0;
            for (Var p : ps) {
                if (needs(p)) nodes_[p].grad += nodes_[o].grad.middleCols(c, value(p).cols());
                c += value(p).cols();
            }
        });
    }

    Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
        Matrix out = value(a).middleCols(c0, n);
        return push(std::move(out), needs(a), [this, a, c0, n](Var o) {
            if (needs(a)) nodes_[a].grad.middleCols(c0, n) += nodes_[o].grad;
        });
    }

    Var softmax_rows(Var a) {
        Matrix out = value(a);
        for (Eigen::Index r = 0; r < out.rows(); ++r) {
            const double mx = out.row(r).maxCoeff();
            out.row(r) = (out.row(r).array() - mx).exp();
            out.row(r) /= out.row(r).sum();
        }
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (!needs(a)) return;
            const Matrix& y = nodes_[o].value;
            const Matrix& dy = nodes_[o].grad;
            for (Eigen::Index r = 0; r < y.rows(); ++r) {
                const double dot = dy.row(r).dot(y.row(r));
                nodes_[a].grad.row(r) +=
                    y.row(r).cwiseProduct((dy.row(r).array() - dot).matrix());
            }
        });
    }

    // Exact GELU, 0.5 x (1 + erf(x / sqrt(2))). Smooth, so finite-difference
    // gradient checks stay well-behaved.
    Var gelu(Var a) {
        Matrix out = value(a).unaryExpr([](double x) {
            return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
        });
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (!needs(a)) return;
            const Matrix& x = nodes_[a].value;
            Matrix dgelu = x.unaryExpr([](double v) {
                const double phi = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                const double pdf = std::exp(-0.5 * v * v) * 0.39894228040143267794;
                return phi + v * pdf;
            });
            nodes_[a].grad += nodes_[o].grad.cwiseProduct(dgelu);
        });
    }

    Var relu(Var a) {
        Matrix out = value(a).cwiseMax(0.0);
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (!needs(a)) return;
            const Matrix mask =
                (nodes_[a].value.array() > 0.0).cast<double>().matrix();
            nodes_[a].grad += nodes_[o].grad.cwiseProduct(mask);
        });
    }

    Var sqrt_ew(Var a) {
        Matrix out = value(a).cwiseSqrt();
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (!needs(a)) return;
            nodes_[a].grad +=
                (nodes_[o].grad.array() / (2.0 * nodes_[o].value.array())).matrix();
        });
    }

    Var sum_all(Var a) {
        Matrix out(1, 1);
        out(0, 0) = value(a).sum();
        return push(std::move(out), needs(a), [this, a](Var o) {
            if (needs(a)) nodes_[a].grad.array() += nodes_[o].grad(0, 0);
        });
    }

    // Mean of the given rows; result is 1 x cols.
    Var mean_rows(Var a, std::vector<int> rows) {
        if (rows.empty()) throw ArgumentError("mean_rows: empty row set");
        Matrix out = Matrix::Zero(1, value(a).cols());
        for (int r : rows) out.row(0) += value(a).row(r);
        out /= static_cast<double>(rows.size());
        return push(std::move(out), needs(a), [this, a, rows = std::move(rows)](Var o) {
            if (!needs(a)) return;
            const double inv = 1.0 / static_cast<double>(rows.size());
            for (int r : rows) nodes_[a].grad.row(r) += nodes_[o].grad.row(0) * inv;
        });
    }

    // Per-row layer norm with learned 1xC gain/bias.
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Matrix& v = value(x);
        Matrix xhat(v.rows(), v.cols());
        std::vector<double> sigmas(v.rows());
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            const double mu = v.row(r).mean();
            const double var = (v.row(r).array() - mu).square().mean();
            const double sigma = std::sqrt(var + eps);
            sigmas[r] = sigma;
            xhat.row(r) = (v.row(r).array() - mu) / sigma;
        }
        Matrix out = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
        out.rowwise() += value(bias).row(0);
        return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                    [this, x, gain, bias, xhat = std::move(xhat),
                     sigmas = std::move(sigmas)](Var o) {
                        const Matrix& dy = nodes_[o].grad;
                        if (needs(gain))
                            nodes_[gain].grad += dy.cwiseProduct(xhat).colwise().sum();
                        if (needs(bias)) nodes_[bias].grad += dy.colwise().sum();
                        if (!needs(x)) return;
                        const RowVector g = value(gain).row(0);
                        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                            const RowVector dxh = dy.row(r).cwiseProduct(g);
                            const double m1 = dxh.mean();
                            const double m2 = dxh.cwiseProduct(xhat.row(r)).mean();
                            nodes_[x].grad.row(r) +=
                                (dxh.array() - m1 - xhat.row(r).array() * m2).matrix() /
                                sigmas[r];
                        }
                    });
    }

    // Rows of an embedding table selected by token id.
    Var gather_rows(Var table, std::vector<int> ids) {
        Matrix out(static_cast<Eigen::Index>(ids.size()), value(table).cols());
        for (std::size_t i = 0; i < ids.size(); ++i) out.row(i) = value(table).row(ids[i]);
        return push(std::move(out), needs(table),
                    [this, table, ids = std::move(ids)](Var o) {
                        if (!needs(table)) return;
                        for (std::size_t i = 0; i < ids.size(); ++i)
                            nodes_[table].grad.row(ids[i]) += nodes_[o].grad.row(i);
                    });
    }

    // Mean over rows of (logsumexp(row) - row[target]).
    Var cross_entropy_mean(Var logits, std::vector<int> targets) {
        const Matrix& z = value(logits);
        if (static_cast<Eigen::Index>(targets.size()) != z.rows())
            throw ArgumentError("cross_entropy_mean: target count != rows");
        double total = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            const double mx = z.row(r).maxCoeff();
            const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
            total += lse - z(r, targets[r]);
        }
        Matrix out(1, 1);
        out(0, 0) = total / static_cast<double>(z.rows());
        return push(std::move(out), needs(logits),
                    [this, logits, targets = std::move(targets)](Var o) {
                        if (!needs(logits)) return;
                        const Matrix& z = nodes_[logits].value;
                        const double g =
                            nodes_[o].grad(0, 0) / static_cast<double>(z.rows());
                        for (Eigen::Index r = 0; r < z.rows(); ++r) {
                            const double mx = z.row(r).maxCoeff();
                            RowVector p = (z.row(r).array() - mx).exp();
                            p /= p.sum();
                            nodes_[logits].grad.row(r) += p * g;
                            nodes_[logits].grad(r, targets[r]) -= g;
                        }
                    });
    }

    // Inverted dropout; mask drawn once in the forward pass.
    Var dropout(Var a, double rate, std::mt19937_64& rng) {
        if (rate <= 0.0) return a;
        if (rate >= 1.0) throw ArgumentError("dropout: rate must be < 1");
        std::bernoulli_distribution keep(1.0 - rate);
        Matrix mask(value(a).rows(), value(a).cols());
        const double inv = 1.0 / (1.0 - rate);
        for (Eigen::Index r = 0; r < mask.rows(); ++r)
            for (Eigen::Index c = 0; c < mask.cols(); ++c)
                mask(r, c) = keep(rng) ? inv : 0.0;
        Matrix out = value(a).cwiseProduct(mask);
        return push(std::move(out), needs(a), [this, a, mask = std::move(mask)](Var o) {
            if (needs(a)) nodes_[a].grad += nodes_[o].grad.cwiseProduct(mask);
        });
    }

    void backward(Var root) {
        if (value(root).rows() != 1 || value(root).cols() != 1)
            throw ArgumentError("backward: root must be scalar");
        for (auto& n : nodes_) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        nodes_[root].grad(0, 0) = 1.0;
        for (Var i = root; i >= 0; --i)
            if (nodes_[i].back && nodes_[i].needs_grad) nodes_[i].back(i);
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad{false};
        std::function<void(Var)> back;
    };

    bool needs(Var v) const { return nodes_[v].needs_grad; }

    Var push(Matrix value, bool needs_grad, std::function<void(Var)> back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace c3da
