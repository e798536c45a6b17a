#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "fusion.hpp"
#include "optim.hpp"
#include "rerank.hpp"

namespace hybridrank {

// ---------------------------------------------------------------------------
// List-aware transformer re-ranker.
//
// Each candidate enters as   x_i = P[rank_i - 1] + s_i * w_proj + b_proj
// where rank_i is its 1-based position in the retrieval-stage list, s_i its
// per-list minmax-normalized ranking-stage score and P a learned position
// table. A pre-norm encoder mixes the list:
//     x += Attn(LN1(x));  x += FFN(LN2(x))
// with full bidirectional multi-head attention and a ReLU feed-forward block.
// A linear head maps every position to a score. Rows are candidates.

struct HlatrConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t max_list_length = 100;
    std::size_t ff_width = 128;
    double dropout = 0.1;
    double lr = 1e-3;
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    std::uint64_t seed = 42;
    /// Optional R-Drop on the list loss (two dropout passes + symmetric KL).
    bool rdrop = false;
    double rdrop_alpha = 1.0;

    void validate() const
    {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
            throw Error(ErrorKind::invalid_argument, "hlatr: d_model must be a positive multiple of n_heads");
        }
        if (max_list_length < 2) {
            throw Error(ErrorKind::invalid_argument, "hlatr: max_list_length must be >= 2");
        }
        if (ff_width == 0 || epochs == 0 || batch_size == 0) {
            throw Error(ErrorKind::invalid_argument, "hlatr: ff_width, epochs and batch_size must be positive");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw Error(ErrorKind::invalid_argument, "hlatr: dropout must lie in [0, 1)");
        }
        if (!(lr > 0.0) || !(rdrop_alpha >= 0.0)) {
            throw Error(ErrorKind::invalid_argument, "hlatr: lr must be > 0 and rdrop_alpha >= 0");
        }
    }
};

inline nlohmann::json to_json(const HlatrConfig& c)
{
    return nlohmann::json{{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                          {"max_list_length", c.max_list_length}, {"ff_width", c.ff_width}, {"dropout", c.dropout},
                          {"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed},
                          {"rdrop", c.rdrop}, {"rdrop_alpha", c.rdrop_alpha}};
}

inline HlatrConfig hlatr_config_from_json(const nlohmann::json& j, HlatrConfig c = {})
{
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.max_list_length = j.value("max_list_length", c.max_list_length);
    c.ff_width = j.value("ff_width", c.ff_width);
    c.dropout = j.value("dropout", c.dropout);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.rdrop = j.value("rdrop", c.rdrop);
    c.rdrop_alpha = j.value("rdrop_alpha", c.rdrop_alpha);
    c.validate();
    return c;
}

struct HlatrLayer {
    Eigen::MatrixXd ln1_gain, ln1_bias;           // 1 x d
    Eigen::MatrixXd wq, bq, wk, bk, wv, bv;       // d x d, 1 x d
    Eigen::MatrixXd wo, bo;                       // d x d, 1 x d
    Eigen::MatrixXd ln2_gain, ln2_bias;           // 1 x d
    Eigen::MatrixXd ff_w1, ff_b1, ff_w2, ff_b2;   // d x f, 1 x f, f x d, 1 x d
};

struct HlatrModel {
    HlatrConfig config;
    Eigen::MatrixXd position;  // L x d
    Eigen::MatrixXd proj_w;    // 1 x d
    Eigen::MatrixXd proj_b;    // 1 x d
    std::vector<HlatrLayer> layers;
    Eigen::MatrixXd head_w;    // d x 1
    Eigen::MatrixXd head_b;    // 1 x 1

    /// Every tensor with its name, in checkpoint order.
    std::vector<std::pair<std::string, Eigen::MatrixXd*>> named_params()
    {
        std::vector<std::pair<std::string, Eigen::MatrixXd*>> out{{"position", &position}, {"proj_w", &proj_w}, {"proj_b", &proj_b}};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& L = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            for (auto [n, m] : std::initializer_list<std::pair<const char*, Eigen::MatrixXd*>>{
                     {"ln1_gain", &L.ln1_gain}, {"ln1_bias", &L.ln1_bias}, {"wq", &L.wq}, {"bq", &L.bq}, {"wk", &L.wk}, {"bk", &L.bk},
                     {"wv", &L.wv}, {"bv", &L.bv}, {"wo", &L.wo}, {"bo", &L.bo}, {"ln2_gain", &L.ln2_gain}, {"ln2_bias", &L.ln2_bias},
                     {"ff_w1", &L.ff_w1}, {"ff_b1", &L.ff_b1}, {"ff_w2", &L.ff_w2}, {"ff_b2", &L.ff_b2}}) {
                out.emplace_back(p + n, m);
            }
        }
        out.emplace_back("head_w", &head_w);
        out.emplace_back("head_b", &head_b);
        return out;
    }

    std::vector<std::pair<std::string, const Eigen::MatrixXd*>> named_params() const
    {
        std::vector<std::pair<std::string, const Eigen::MatrixXd*>> out;
        for (auto& [n, m] : const_cast<HlatrModel*>(this)->named_params()) {
            out.emplace_back(n, m);
        }
        return out;
    }

    /// All tensors zero except layer-norm gains, which are one.
    static HlatrModel zeros(const HlatrConfig& cfg)
    {
        cfg.validate();
        const auto d = static_cast<Eigen::Index>(cfg.d_model);
        const auto f = static_cast<Eigen::Index>(cfg.ff_width);
        HlatrModel m;
        m.config = cfg;
        m.position = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.max_list_length), d);
        m.proj_w = Eigen::MatrixXd::Zero(1, d);
        m.proj_b = Eigen::MatrixXd::Zero(1, d);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            HlatrLayer L;
            L.ln1_gain = Eigen::MatrixXd::Ones(1, d);
            L.ln1_bias = Eigen::MatrixXd::Zero(1, d);
            L.wq = L.wk = L.wv = L.wo = Eigen::MatrixXd::Zero(d, d);
            L.bq = L.bk = L.bv = L.bo = Eigen::MatrixXd::Zero(1, d);
            L.ln2_gain = Eigen::MatrixXd::Ones(1, d);
            L.ln2_bias = Eigen::MatrixXd::Zero(1, d);
            L.ff_w1 = Eigen::MatrixXd::Zero(d, f);
            L.ff_b1 = Eigen::MatrixXd::Zero(1, f);
            L.ff_w2 = Eigen::MatrixXd::Zero(f, d);
            L.ff_b2 = Eigen::MatrixXd::Zero(1, d);
            m.layers.push_back(std::move(L));
        }
        m.head_w = Eigen::MatrixXd::Zero(d, 1);
        m.head_b = Eigen::MatrixXd::Zero(1, 1);
        return m;
    }

    /// Seeded scaled-uniform initialization: Glorot for weight matrices,
    /// U(-0.1, 0.1) for position rows and the score projection, zero biases,
    /// unit layer-norm gains.
    static HlatrModel initialized(const HlatrConfig& cfg)
    {
        auto m = zeros(cfg);
        Rng rng(derive_seed(cfg.seed, "hlatr-init"));
        const auto d = cfg.d_model;
        const auto f = cfg.ff_width;
        for (Eigen::Index i = 0; i < m.position.size(); ++i) {
            m.position.data()[i] = rng.uniform(-0.1, 0.1);
        }
        for (Eigen::Index i = 0; i < m.proj_w.size(); ++i) {
            m.proj_w.data()[i] = rng.uniform(-1.0, 1.0);
        }
        for (auto& L : m.layers) {
            glorot_uniform(L.wq, d, d, rng);
            glorot_uniform(L.wk, d, d, rng);
            glorot_uniform(L.wv, d, d, rng);
            glorot_uniform(L.wo, d, d, rng);
            glorot_uniform(L.ff_w1, d, f, rng);
            glorot_uniform(L.ff_w2, f, d, rng);
        }
        glorot_uniform(m.head_w, d, 1, rng);
        return m;
    }

    /// Same shapes, every tensor zero (gradient buffers).
    HlatrModel zeros_like() const
    {
        HlatrModel g = *this;
        for (auto& [_, t] : g.named_params()) {
            t->setZero();
        }
        return g;
    }

    bool operator==(const HlatrModel& o) const
    {
        const auto a = named_params();
        const auto b = o.named_params();
        if (a.size() != b.size()) {
            return false;
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].second->rows() != b[i].second->rows() || a[i].second->cols() != b[i].second->cols() ||
                *a[i].second != *b[i].second) {
                return false;
            }
        }
        return true;
    }
};

/// One query's list as the re-ranker sees it.
struct RankedList {
    std::string query_id;
    std::vector<std::string> ids;
    /// 1-based positions in the retrieval-stage list.
    std::vector<int> retrieval_ranks;
    std::vector<double> ranking_scores;
    /// Index of the single positive, for training.
    std::optional<std::size_t> positive;

    std::size_t size() const { return ids.size(); }
};

namespace detail {

inline void check_list(const RankedList& list, const HlatrConfig& cfg)
{
    if (list.retrieval_ranks.size() != list.size() || list.ranking_scores.size() != list.size()) {
        throw Error(ErrorKind::invalid_argument, "ranked list '" + list.query_id + "' has inconsistent field lengths");
    }
    if (list.size() > cfg.max_list_length) {
        throw Error(ErrorKind::invalid_argument, "ranked list '" + list.query_id + "' has " + std::to_string(list.size()) +
                                                     " candidates, more than max_list_length " + std::to_string(cfg.max_list_length));
    }
    for (int r : list.retrieval_ranks) {
        if (r < 1) {
            throw Error(ErrorKind::invalid_argument, "ranked list '" + list.query_id + "' has a retrieval rank < 1");
        }
    }
}

/// Position-table row for a retrieval rank; ranks beyond the table share its
/// last row.
inline Eigen::Index position_row(int rank, const HlatrConfig& cfg)
{
    return static_cast<Eigen::Index>(std::min<std::size_t>(static_cast<std::size_t>(rank), cfg.max_list_length) - 1);
}

}  // namespace detail

/// Input vectors, one row per candidate. Ranking scores must already be
/// normalized for the list.
inline Eigen::MatrixXd build_inputs(const RankedList& list, const HlatrModel& model)
{
    detail::check_list(list, model.config);
    const auto n = static_cast<Eigen::Index>(list.size());
    Eigen::MatrixXd x(n, model.position.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = detail::position_row(list.retrieval_ranks[static_cast<std::size_t>(i)], model.config);
        x.row(i) = model.position.row(row) + list.ranking_scores[static_cast<std::size_t>(i)] * model.proj_w + model.proj_b;
    }
    return x;
}

/// Copy of `list` with ranking scores minmax-normalized.
inline RankedList normalized_list(RankedList list)
{
    if (!list.ranking_scores.empty()) {
        list.ranking_scores = normalize_values(list.ranking_scores, Normalization::minmax);
    }
    return list;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Eigen::MatrixXd xhat;
    Eigen::VectorXd inv_std;
};

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gain, const Eigen::MatrixXd& bias, LayerNormCache* cache)
{
    const auto d = static_cast<double>(x.cols());
    Eigen::MatrixXd xhat(x.rows(), x.cols());
    Eigen::VectorXd inv(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).sum() / d;
        const Eigen::RowVectorXd c = x.row(i).array() - mu;
        const double var = c.squaredNorm() / d;
        inv(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = c * inv(i);
    }
    Eigen::MatrixXd y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return y;
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& gain, const LayerNormCache& c,
                                           Eigen::MatrixXd& dgain, Eigen::MatrixXd& dbias)
{
    const auto d = static_cast<double>(dy.cols());
    dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const Eigen::MatrixXd dxhat = dy.array().rowwise() * gain.row(0).array();
    Eigen::MatrixXd dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(c.xhat.row(i));
        dx.row(i) = (c.inv_std(i) / d) * (d * dxhat.row(i).array() - s1 - c.xhat.row(i).array() * s2).matrix();
    }
    return dx;
}

inline Eigen::MatrixXd affine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w, const Eigen::MatrixXd& b)
{
    Eigen::MatrixXd y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

inline void softmax_rows(Eigen::MatrixXd& s)
{
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
    }
}

struct LayerCache {
    LayerNormCache ln1;
    Eigen::MatrixXd h1;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per head, n x n
    Eigen::MatrixXd concat;
    Eigen::MatrixXd drop1;  // empty = no dropout
    LayerNormCache ln2;
    Eigen::MatrixXd h2;
    Eigen::MatrixXd f1;  // pre-activation
    Eigen::MatrixXd r;   // relu(f1)
    Eigen::MatrixXd drop2;
};

struct ForwardCache {
    std::vector<Eigen::Index> position_rows;
    std::vector<double> scores_in;
    std::vector<LayerCache> layers;
    Eigen::MatrixXd x_final;
};

inline Eigen::MatrixXd dropout_matrix(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng)
{
    Eigen::MatrixXd m(rows, cols);
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform() < rate ? 0.0 : keep;
    }
    return m;
}

/// Encoder forward from input rows. `rng` non-null enables dropout.
inline Eigen::VectorXd encode(const HlatrModel& model, Eigen::MatrixXd x, Rng* rng, ForwardCache* cache)
{
    const auto& cfg = model.config;
    const auto n_heads = static_cast<Eigen::Index>(cfg.n_heads);
    const auto dh = static_cast<Eigen::Index>(cfg.d_model / cfg.n_heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool drop = rng != nullptr && cfg.dropout > 0.0;
    for (const auto& L : model.layers) {
        LayerCache lc;
        const Eigen::MatrixXd h1 = layer_norm(x, L.ln1_gain, L.ln1_bias, &lc.ln1);
        const Eigen::MatrixXd q = affine(h1, L.wq, L.bq);
        const Eigen::MatrixXd k = affine(h1, L.wk, L.bk);
        const Eigen::MatrixXd v = affine(h1, L.wv, L.bv);
        Eigen::MatrixXd concat(x.rows(), x.cols());
        for (Eigen::Index h = 0; h < n_heads; ++h) {
            Eigen::MatrixXd a = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
            softmax_rows(a);
            concat.middleCols(h * dh, dh) = a * v.middleCols(h * dh, dh);
            lc.attn.push_back(std::move(a));
        }
        Eigen::MatrixXd attn_out = affine(concat, L.wo, L.bo);
        if (drop) {
            lc.drop1 = dropout_matrix(attn_out.rows(), attn_out.cols(), cfg.dropout, *rng);
            attn_out.array() *= lc.drop1.array();
        }
        x += attn_out;

        const Eigen::MatrixXd h2 = layer_norm(x, L.ln2_gain, L.ln2_bias, &lc.ln2);
        Eigen::MatrixXd f1 = affine(h2, L.ff_w1, L.ff_b1);
        Eigen::MatrixXd r = f1.cwiseMax(0.0);
        Eigen::MatrixXd f2 = affine(r, L.ff_w2, L.ff_b2);
        if (drop) {
            lc.drop2 = dropout_matrix(f2.rows(), f2.cols(), cfg.dropout, *rng);
            f2.array() *= lc.drop2.array();
        }
        x += f2;
        if (cache) {
            lc.h1 = h1;
            lc.q = q;
            lc.k = k;
            lc.v = v;
            lc.concat = std::move(concat);
            lc.h2 = h2;
            lc.f1 = std::move(f1);
            lc.r = std::move(r);
            cache->layers.push_back(std::move(lc));
        }
    }
    Eigen::VectorXd scores = (x * model.head_w).col(0).array() + model.head_b(0, 0);
    if (cache) {
        cache->x_final = std::move(x);
    }
    return scores;
}

/// Accumulates parameter gradients into `g` given dLoss/dScores.
inline void backward(const HlatrModel& model, const ForwardCache& cache, const Eigen::VectorXd& dscores, HlatrModel& g)
{
    const auto& cfg = model.config;
    const auto n_heads = static_cast<Eigen::Index>(cfg.n_heads);
    const auto dh = static_cast<Eigen::Index>(cfg.d_model / cfg.n_heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    g.head_w += cache.x_final.transpose() * dscores;
    g.head_b(0, 0) += dscores.sum();
    Eigen::MatrixXd dx = dscores * model.head_w.transpose();

    for (std::size_t li = model.layers.size(); li-- > 0;) {
        const auto& L = model.layers[li];
        const auto& c = cache.layers[li];
        auto& G = g.layers[li];

        // feed-forward block
        Eigen::MatrixXd df2 = dx;
        if (c.drop2.size() > 0) {
            df2.array() *= c.drop2.array();
        }
        G.ff_w2 += c.r.transpose() * df2;
        G.ff_b2 += df2.colwise().sum();
        Eigen::MatrixXd dr = df2 * L.ff_w2.transpose();
        dr.array() *= (c.f1.array() > 0.0).cast<double>();
        G.ff_w1 += c.h2.transpose() * dr;
        G.ff_b1 += dr.colwise().sum();
        const Eigen::MatrixXd dh2 = dr * L.ff_w1.transpose();
        dx += layer_norm_backward(dh2, L.ln2_gain, c.ln2, G.ln2_gain, G.ln2_bias);

        // attention block
        Eigen::MatrixXd dattn = dx;
        if (c.drop1.size() > 0) {
            dattn.array() *= c.drop1.array();
        }
        G.wo += c.concat.transpose() * dattn;
        G.bo += dattn.colwise().sum();
        const Eigen::MatrixXd dconcat = dattn * L.wo.transpose();
        Eigen::MatrixXd dq(dx.rows(), dx.cols()), dk(dx.rows(), dx.cols()), dv(dx.rows(), dx.cols());
        for (Eigen::Index h = 0; h < n_heads; ++h) {
            const auto& a = c.attn[static_cast<std::size_t>(h)];
            const Eigen::MatrixXd dout = dconcat.middleCols(h * dh, dh);
            const Eigen::MatrixXd da = dout * c.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh) = a.transpose() * dout;
            const Eigen::VectorXd row_dot = (da.array() * a.array()).rowwise().sum();
            const Eigen::MatrixXd ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
            dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
        }
        G.wq += c.h1.transpose() * dq;
        G.bq += dq.colwise().sum();
        G.wk += c.h1.transpose() * dk;
        G.bk += dk.colwise().sum();
        G.wv += c.h1.transpose() * dv;
        G.bv += dv.colwise().sum();
        const Eigen::MatrixXd dh1 = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
        dx += layer_norm_backward(dh1, L.ln1_gain, c.ln1, G.ln1_gain, G.ln1_bias);
    }

    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
        g.position.row(cache.position_rows[static_cast<std::size_t>(i)]) += dx.row(i);
        g.proj_w += cache.scores_in[static_cast<std::size_t>(i)] * dx.row(i);
        g.proj_b += dx.row(i);
    }
}

inline Eigen::VectorXd forward_list(const HlatrModel& model, const RankedList& list, Rng* rng, ForwardCache* cache)
{
    Eigen::MatrixXd x = build_inputs(list, model);
    if (cache) {
        cache->position_rows.clear();
        for (int r : list.retrieval_ranks) {
            cache->position_rows.push_back(position_row(r, model.config));
        }
        cache->scores_in = list.ranking_scores;
    }
    return encode(model, std::move(x), rng, cache);
}

}  // namespace detail

/// Inference forward pass (no dropout) from prepared input rows.
inline Eigen::VectorXd forward(const HlatrModel& model, const Eigen::MatrixXd& inputs)
{
    if (static_cast<std::size_t>(inputs.rows()) > model.config.max_list_length) {
        throw Error(ErrorKind::invalid_argument, "forward: more inputs than max_list_length");
    }
    return detail::encode(model, inputs, nullptr, nullptr);
}

/// Scores of a list whose ranking scores are already normalized.
inline Eigen::VectorXd forward(const HlatrModel& model, const RankedList& list)
{
    return detail::forward_list(model, list, nullptr, nullptr);
}

/// Attention probabilities of every layer and head for a list (inference).
inline std::vector<Eigen::MatrixXd> attention_maps(const HlatrModel& model, const RankedList& list)
{
    detail::ForwardCache cache;
    detail::forward_list(model, list, nullptr, &cache);
    std::vector<Eigen::MatrixXd> out;
    for (auto& l : cache.layers) {
        for (auto& a : l.attn) {
            out.push_back(a);
        }
    }
    return out;
}

/// List-wise softmax cross-entropy of one normalized list with exact
/// gradients for every tensor. Dropout is applied only when `rng` is given;
/// with R-Drop enabled two independent passes are combined.
inline double hlatr_loss_and_grad(const HlatrModel& model, const RankedList& list, Rng* rng, HlatrModel& grad)
{
    if (!list.positive || *list.positive >= list.size()) {
        throw Error(ErrorKind::invalid_argument, "ranked list '" + list.query_id + "' has no valid positive");
    }
    const auto& cfg = model.config;
    if (cfg.rdrop) {
        detail::ForwardCache c1, c2;
        const auto z1 = detail::forward_list(model, list, rng, &c1);
        const auto z2 = detail::forward_list(model, list, rng, &c2);
        const auto l = rdrop_loss(z1, z2, *list.positive, cfg.rdrop_alpha);
        detail::backward(model, c1, l.grad_z1, grad);
        detail::backward(model, c2, l.grad_z2, grad);
        return l.total;
    }
    detail::ForwardCache cache;
    const auto z = detail::forward_list(model, list, rng, &cache);
    const Eigen::VectorXd lp = log_softmax(z);
    Eigen::VectorXd dz = lp.array().exp();
    dz(static_cast<Eigen::Index>(*list.positive)) -= 1.0;
    detail::backward(model, cache, dz, grad);
    return -lp(static_cast<Eigen::Index>(*list.positive));
}

/// Loss only, for finite-difference checks and reporting.
inline double hlatr_loss(const HlatrModel& model, const RankedList& list)
{
    if (!list.positive) {
        throw Error(ErrorKind::invalid_argument, "ranked list '" + list.query_id + "' has no positive");
    }
    return listwise_loss(forward(model, list), *list.positive);
}

/// Seeded Adam training on the mean list loss of each mini-batch. Lists are
/// normalized here; lists shorter than 2 are dropped with a warning.
inline HlatrModel train_hlatr(const std::vector<RankedList>& lists, const HlatrConfig& cfg, std::vector<double>* epoch_losses = nullptr)
{
    cfg.validate();
    std::vector<RankedList> data;
    for (const auto& l : lists) {
        detail::check_list(l, cfg);
        if (!l.positive || *l.positive >= l.size()) {
            throw Error(ErrorKind::invalid_argument, "training list '" + l.query_id + "' has no valid positive");
        }
        if (l.size() < 2) {
            log_warn("train_hlatr: skipping list '" + l.query_id + "' with fewer than 2 candidates");
            continue;
        }
        data.push_back(normalized_list(l));
    }
    if (data.empty()) {
        throw Error(ErrorKind::invalid_argument, "train_hlatr: no usable training lists");
    }
    auto model = HlatrModel::initialized(cfg);
    Adam adam(cfg.lr);
    Rng rng(derive_seed(cfg.seed, "hlatr-train"));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    HlatrModel grad = model.zeros_like();
    auto params = model.named_params();
    auto grads = grad.named_params();
    std::vector<std::span<double>> pspans;
    std::vector<std::span<const double>> gspans;
    for (std::size_t i = 0; i < params.size(); ++i) {
        pspans.push_back(flat(*params[i].second));
        gspans.push_back(flat(*grads[i].second));
    }
    Rng* drop_rng = cfg.dropout > 0.0 ? &rng : nullptr;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            for (auto& [_, t] : grads) {
                t->setZero();
            }
            double batch_loss = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                batch_loss += hlatr_loss_and_grad(model, data[order[b]], drop_rng, grad);
            }
            if (!std::isfinite(batch_loss)) {
                throw Error(ErrorKind::numeric, "train_hlatr: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                                    std::to_string(batch + 1));
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& [_, t] : grads) {
                *t *= inv;
            }
            adam.step(pspans, gspans);
            total += batch_loss;
        }
        const double mean = total / static_cast<double>(data.size());
        if (epoch_losses) {
            epoch_losses->push_back(mean);
        }
        log_info("hlatr epoch " + std::to_string(epoch + 1) + " mean loss " + format_real(mean, 6));
    }
    return model;
}

/// Re-orders the first max_list_length candidates (taken in the given
/// ranking-stage order) by model score; ties keep ranking-stage order.
/// Candidates past the head keep their order below it. Lists shorter than 2
/// pass through unchanged.
inline CandidateList hlatr_rerank(const HlatrModel& model, const std::string& query_id, const CandidateList& stage2)
{
    const std::size_t head = std::min(stage2.size(), model.config.max_list_length);
    if (head < 2) {
        if (!stage2.empty()) {
            log_warn("hlatr_rerank: list for '" + query_id + "' has fewer than 2 candidates, passed through");
        }
        return stage2;
    }
    RankedList list;
    list.query_id = query_id;
    for (std::size_t i = 0; i < head; ++i) {
        list.ids.push_back(stage2[i].passage_id);
        list.retrieval_ranks.push_back(stage2[i].retrieval_rank);
        list.ranking_scores.push_back(stage2[i].ranking_score.value_or(0.0));
    }
    const auto scores = forward(model, normalized_list(list));
    std::vector<std::size_t> order(head);
    for (std::size_t i = 0; i < head; ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    });
    CandidateList out;
    out.reserve(stage2.size());
    for (std::size_t i : order) {
        out.push_back(stage2[i]);
        out.back().hlatr_score = scores(static_cast<Eigen::Index>(i));
    }
    for (std::size_t i = head; i < stage2.size(); ++i) {
        out.push_back(stage2[i]);
    }
    return out;
}

/// Run scores for a re-ranked list: the model score for the head, then one
/// unit steps below the lowest head score for the pass-through tail.
inline std::vector<double> hlatr_output_scores(const CandidateList& reranked)
{
    std::vector<double> out;
    double floor = 0.0;
    bool any = false;
    for (const auto& c : reranked) {
        if (c.hlatr_score) {
            out.push_back(*c.hlatr_score);
            floor = any ? std::min(floor, *c.hlatr_score) : *c.hlatr_score;
            any = true;
        } else {
            floor -= 1.0;
            out.push_back(any ? floor : c.ranking_score.value_or(c.retrieval_score));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_hlatr(const HlatrModel& model, const std::string& path)
{
    auto out = detail::open_output(path);
    out << "hybridrank-hlatr 1\n";
    out << "config " << to_json(model.config).dump() << '\n';
    for (const auto& [name, t] : model.named_params()) {
        detail::write_matrix(out, name.c_str(), *t);
    }
    if (!out) {
        throw Error(ErrorKind::io, "write to '" + path + "' failed");
    }
}

inline HlatrModel load_hlatr(const std::string& path)
{
    auto in = detail::open_input(path);
    detail::expect_header(in, path, "hybridrank-hlatr", 1);
    std::size_t line_no = 2;
    std::string line;
    if (!std::getline(in, line) || line.rfind("config ", 0) != 0) {
        throw parse_error(path, line_no, "expected 'config <json>'");
    }
    HlatrConfig cfg;
    try {
        cfg = hlatr_config_from_json(nlohmann::json::parse(line.substr(7)));
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path, line_no, std::string("bad config: ") + e.what());
    }
    auto model = HlatrModel::zeros(cfg);
    for (auto& [name, t] : model.named_params()) {
        detail::read_matrix(in, path, line_no, name, *t, t->rows(), t->cols());
    }
    return model;
}

/// One JSON object per line: query_id, positive id (optional) and the
/// candidates with their retrieval rank and ranking score.
inline void save_ranked_lists(const std::vector<RankedList>& lists, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& l : lists) {
        nlohmann::ordered_json rec;
        rec["query_id"] = l.query_id;
        if (l.positive) {
            rec["positive"] = l.ids.at(*l.positive);
        }
        rec["candidates"] = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < l.size(); ++i) {
            rec["candidates"].push_back({{"id", l.ids[i]}, {"retrieval_rank", l.retrieval_ranks[i]}, {"ranking_score", l.ranking_scores[i]}});
        }
        out << rec.dump() << '\n';
    }
}

inline std::vector<RankedList> load_ranked_lists(const std::string& path)
{
    auto in = detail::open_input(path);
    std::vector<RankedList> lists;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            const auto rec = nlohmann::json::parse(line);
            RankedList l;
            l.query_id = rec.at("query_id").get<std::string>();
            for (const auto& c : rec.at("candidates")) {
                l.ids.push_back(c.at("id").get<std::string>());
                l.retrieval_ranks.push_back(c.at("retrieval_rank").get<int>());
                l.ranking_scores.push_back(c.at("ranking_score").get<double>());
            }
            if (rec.contains("positive")) {
                const auto pos = rec["positive"].get<std::string>();
                auto it = std::find(l.ids.begin(), l.ids.end(), pos);
                if (it == l.ids.end()) {
                    throw parse_error(path, line_no, "positive '" + pos + "' is not a candidate");
                }
                l.positive = static_cast<std::size_t>(it - l.ids.begin());
            }
            lists.push_back(std::move(l));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(path, line_no, std::string("bad ranked list: ") + e.what());
        }
    }
    return lists;
}

/// Training lists from ranking-stage output: the head of each query's list,
/// positive = highest-graded candidate at or above the threshold (earliest on
/// ties). Queries without one are skipped.
inline std::vector<RankedList> make_training_lists(const std::map<std::string, CandidateList>& stage2, const Qrels& qrels,
                                                   std::size_t max_len, int rel_threshold = 2)
{
    std::vector<RankedList> out;
    for (const auto& [q, list] : stage2) {
        RankedList l;
        l.query_id = q;
        int best = -1;
        for (std::size_t i = 0; i < std::min(max_len, list.size()); ++i) {
            l.ids.push_back(list[i].passage_id);
            l.retrieval_ranks.push_back(list[i].retrieval_rank);
            l.ranking_scores.push_back(list[i].ranking_score.value_or(0.0));
            const int g = qrels.grade(q, list[i].passage_id);
            if (g >= rel_threshold && g > best) {
                best = g;
                l.positive = i;
            }
        }
        if (l.positive && l.size() >= 2) {
            out.push_back(std::move(l));
        }
    }
    return out;
}

}  // namespace hybridrank
