#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"

namespace hybridrank {

/// Adam with bias correction. Parameter tensors are passed as flat spans in a
/// fixed order on every step; moment buffers are allocated on the first call.
class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : m_lr(lr), m_beta1(beta1), m_beta2(beta2), m_eps(eps)
    {
        if (!(lr > 0.0)) {
            throw Error(ErrorKind::invalid_argument, "learning rate must be > 0");
        }
    }

    void step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads)
    {
        if (params.size() != grads.size()) {
            throw Error(ErrorKind::invalid_argument, "Adam: parameter and gradient lists differ in length");
        }
        if (m_m.empty()) {
            for (const auto& p : params) {
                m_m.emplace_back(p.size(), 0.0);
                m_v.emplace_back(p.size(), 0.0);
            }
        }
        ++m_t;
        const double c1 = 1.0 - std::pow(m_beta1, static_cast<double>(m_t));
        const double c2 = 1.0 - std::pow(m_beta2, static_cast<double>(m_t));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& m = m_m[k];
            auto& v = m_v[k];
            const auto& g = grads[k];
            const auto& p = params[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = m_beta1 * m[i] + (1.0 - m_beta1) * g[i];
                v[i] = m_beta2 * v[i] + (1.0 - m_beta2) * g[i] * g[i];
                p[i] -= m_lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + m_eps);
            }
        }
    }

    std::size_t steps() const { return m_t; }

  private:
    double m_lr;
    double m_beta1;
    double m_beta2;
    double m_eps;
    std::size_t m_t = 0;
    std::vector<std::vector<double>> m_m;
    std::vector<std::vector<double>> m_v;
};

inline std::span<double> flat(Eigen::MatrixXd& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> flat(const Eigen::MatrixXd& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

/// Symmetric scaled-uniform (Glorot) fill.
inline void glorot_uniform(Eigen::MatrixXd& m, std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-a, a);
    }
}

// ---------------------------------------------------------------------------
// List-wise softmax losses shared by the interaction scorer and the list
// re-ranker.

inline Eigen::VectorXd log_softmax(const Eigen::VectorXd& z)
{
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    return (z.array() - lse).matrix();
}

/// -log softmax(scores)[positive].
inline double listwise_loss(const Eigen::VectorXd& scores, std::size_t positive_index)
{
    if (positive_index >= static_cast<std::size_t>(scores.size())) {
        throw Error(ErrorKind::invalid_argument, "listwise_loss: positive index out of range");
    }
    return -log_softmax(scores)(static_cast<Eigen::Index>(positive_index));
}

struct RDropLoss {
    double total = 0.0;
    /// Mean of the two cross-entropies.
    double ce = 0.0;
    /// Symmetric KL term, before multiplying by alpha.
    double kl = 0.0;
    Eigen::VectorXd grad_z1;
    Eigen::VectorXd grad_z2;
};

/// total = (CE(p1) + CE(p2)) / 2 + alpha * (KL(p1||p2) + KL(p2||p1)) / 2
/// with p = softmax(z). Gradients are taken with respect to both logit vectors.
inline RDropLoss rdrop_loss(const Eigen::VectorXd& z1, const Eigen::VectorXd& z2, std::size_t positive_index, double alpha)
{
    const auto n = z1.size();
    if (z2.size() != n || positive_index >= static_cast<std::size_t>(n)) {
        throw Error(ErrorKind::invalid_argument, "rdrop_loss: shape mismatch");
    }
    const auto pos = static_cast<Eigen::Index>(positive_index);
    const Eigen::VectorXd lp = log_softmax(z1);
    const Eigen::VectorXd lq = log_softmax(z2);
    const Eigen::VectorXd p = lp.array().exp().matrix();
    const Eigen::VectorXd q = lq.array().exp().matrix();
    const Eigen::VectorXd d = lp - lq;

    RDropLoss out;
    out.ce = 0.5 * (-lp(pos) + -lq(pos));
    // (KL(p||q) + KL(q||p)) / 2 = sum((p - q)(log p - log q)) / 2; exactly 0 when z1 == z2.
    out.kl = 0.5 * ((p - q).array() * d.array()).sum();
    out.total = out.ce + alpha * out.kl;

    const double kl_pq = (p.array() * d.array()).sum();
    const double kl_qp = (q.array() * (-d).array()).sum();
    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(n);
    onehot(pos) = 1.0;
    out.grad_z1 = 0.5 * (p - onehot) + alpha * 0.5 * (p.array() * (d.array() - kl_pq) + p.array() - q.array()).matrix();
    out.grad_z2 = 0.5 * (q - onehot) + alpha * 0.5 * (q.array() * (-d.array() - kl_qp) + q.array() - p.array()).matrix();
    return out;
}

}  // namespace hybridrank
