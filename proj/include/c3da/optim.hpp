#pragma once

#include <cmath>
#include <map>
#include <string>

#include "c3da/common.hpp"
#include "c3da/tape.hpp"

namespace c3da {

// Optimizers update named tensors in place. State is keyed by tensor name, so
// one optimizer instance can serve several stores as long as names stay
// globally unique.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(const std::map<std::string, Matrix*>& params,
                      const std::map<std::string, Matrix>& grads) = 0;
};

class Adam : public Optimizer {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::map<std::string, Matrix*>& params,
              const std::map<std::string, Matrix>& grads) override {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Matrix& g = git->second;
            auto& [m, v] = state_[name];
            if (m.size() == 0) {
                m = Matrix::Zero(g.rows(), g.cols());
                v = Matrix::Zero(g.rows(), g.cols());
            }
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
            const Matrix mhat = m / bc1;
            const Matrix vhat = v / bc2;
            p->array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_{0};
    std::map<std::string, std::pair<Matrix, Matrix>> state_;
};

// Adaptive-moment optimizer with factored second moments for matrices and a
// full second moment for vectors. Fixed learning rate, no momentum, update
// RMS clipped to 1.
class Adafactor : public Optimizer {
public:
    explicit Adafactor(double lr, double eps1 = 1e-30, double clip = 1.0)
        : lr_(lr), eps1_(eps1), clip_(clip) {}

    void step(const std::map<std::string, Matrix*>& params,
              const std::map<std::string, Matrix>& grads) override {
        ++t_;
        const double beta2t = 1.0 - std::pow(static_cast<double>(t_), -0.8);
        for (const auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Matrix& g = git->second;
            const Matrix g2 = g.cwiseProduct(g).array() + eps1_;
            Matrix update;
            if (g.rows() > 1 && g.cols() > 1) {
                auto& [row_acc, col_acc] = factored_[name];
                if (row_acc.size() == 0) {
                    row_acc = Matrix::Zero(g.rows(), 1);
                    col_acc = Matrix::Zero(1, g.cols());
                }
                row_acc = beta2t * row_acc + (1.0 - beta2t) * g2.rowwise().sum();
                col_acc = beta2t * col_acc + (1.0 - beta2t) * g2.colwise().sum();
                const double row_total = row_acc.sum();
                const Matrix vhat = (row_acc * col_acc) / row_total;
                update = g.cwiseQuotient(vhat.cwiseSqrt());
            } else {
                Matrix& acc = full_[name];
                if (acc.size() == 0) acc = Matrix::Zero(g.rows(), g.cols());
                acc = beta2t * acc + (1.0 - beta2t) * g2;
                update = g.cwiseQuotient(acc.cwiseSqrt());
            }
            const double rms =
                std::sqrt(update.cwiseProduct(update).mean());
            if (rms > clip_) update /= rms / clip_;
            *p -= lr_ * update;
        }
    }

private:
    double lr_, eps1_, clip_;
    long t_{0};
    std::map<std::string, std::pair<Matrix, Matrix>> factored_;
    std::map<std::string, Matrix> full_;
};

}  // namespace c3da
