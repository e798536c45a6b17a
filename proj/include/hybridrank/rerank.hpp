#pragma once

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "corpus.hpp"
#include "dense.hpp"
#include "eval.hpp"
#include "fusion.hpp"
#include "optim.hpp"
#include "sparse.hpp"

namespace hybridrank {

// ---------------------------------------------------------------------------
// Features

inline constexpr std::size_t kFeatureCount = 7;

/// Fixed order: bm25, impact, dense cosine, query term overlap |q&p|/|q|,
/// 1/retrieval rank, log(1 + query length), log(1 + passage length).
using FeatureVector = std::array<double, kFeatureCount>;

inline constexpr std::array<const char*, kFeatureCount> kFeatureNames = {
    "bm25", "impact", "dense_cosine", "term_overlap", "reciprocal_rank", "log_query_length", "log_passage_length"};

/// Backends the features are computed from. Missing backends yield 0 for
/// their feature.
struct FeatureSources {
    const Corpus* corpus = nullptr;
    const InvertedIndex* sparse = nullptr;
    Bm25Params bm25;
    const ImpactIndex* impact = nullptr;
    const VectorStore* dense = nullptr;
    HashEmbedder embedder;
    /// Learned query weights for the impact feature; unit weights otherwise.
    const std::unordered_map<std::string, TermWeights>* query_weights = nullptr;
    /// External query vectors for the dense feature; hash embedding otherwise.
    const VectorStore* query_vectors = nullptr;
};

class FeatureExtractor {
  public:
    FeatureExtractor(const FeatureSources& sources, const Query& query) : m_src(sources)
    {
        m_query_tokens = tokenize(query.text);
        m_unique_query = detail::unique_sorted(m_query_tokens);
        if (sources.impact) {
            m_query_weights = unit_query_weights(query.text);
            if (sources.query_weights) {
                auto it = sources.query_weights->find(query.query_id);
                if (it != sources.query_weights->end()) {
                    m_query_weights = it->second;
                }
            }
        }
        if (sources.dense) {
            if (sources.query_vectors && sources.query_vectors->ordinal_of(query.query_id)) {
                auto v = sources.query_vectors->vector(*sources.query_vectors->ordinal_of(query.query_id));
                m_query_vector.assign(v.begin(), v.end());
            } else if (!m_query_tokens.empty()) {
                m_query_vector = sources.embedder(query.text);
            }
        }
    }

    const TermWeights& query_weights() const { return m_query_weights; }
    const std::vector<double>& query_vector() const { return m_query_vector; }

    FeatureVector extract(const std::string& passage_id, int retrieval_rank) const
    {
        FeatureVector f{};
        if (m_src.sparse) {
            if (auto o = m_src.sparse->ordinal_of(passage_id)) {
                f[0] = bm25_score(*m_src.sparse, m_query_tokens, *o, m_src.bm25);
            }
        }
        if (m_src.impact) {
            if (auto o = m_src.impact->ordinal_of(passage_id)) {
                f[1] = impact_score(*m_src.impact, m_query_weights, *o);
            }
        }
        if (m_src.dense && !m_query_vector.empty()) {
            if (auto o = m_src.dense->ordinal_of(passage_id)) {
                f[2] = dot(m_src.dense->vector(*o), m_query_vector);
            }
        }
        std::size_t passage_len = 0;
        if (m_src.corpus) {
            if (auto o = m_src.corpus->find(passage_id)) {
                const auto& toks = m_src.corpus->tokens(*o);
                passage_len = toks.size();
                if (!m_unique_query.empty()) {
                    std::set<std::string> ptoks(toks.begin(), toks.end());
                    std::size_t shared = 0;
                    for (const auto& t : m_unique_query) {
                        shared += ptoks.count(t);
                    }
                    f[3] = static_cast<double>(shared) / static_cast<double>(m_unique_query.size());
                }
            }
        }
        f[4] = retrieval_rank >= 1 ? 1.0 / retrieval_rank : 0.0;
        f[5] = std::log1p(static_cast<double>(m_query_tokens.size()));
        f[6] = std::log1p(static_cast<double>(passage_len));
        return f;
    }

  private:
    const FeatureSources& m_src;
    std::vector<std::string> m_query_tokens;
    std::vector<std::string> m_unique_query;
    TermWeights m_query_weights;
    std::vector<double> m_query_vector;
};

/// Feature rows of one query's candidates, in candidate order.
struct QueryFeatures {
    std::string query_id;
    CandidateList candidates;
    std::vector<FeatureVector> features;
};

inline void save_features(const std::vector<QueryFeatures>& rows, const std::string& path)
{
    auto out = detail::open_output(path);
    out << "#query_id\tpassage_id\trank";
    for (const auto* n : kFeatureNames) {
        out << '\t' << n;
    }
    out << '\n';
    for (const auto& q : rows) {
        for (std::size_t i = 0; i < q.candidates.size(); ++i) {
            out << q.query_id << '\t' << q.candidates[i].passage_id << '\t' << q.candidates[i].retrieval_rank;
            for (double v : q.features[i]) {
                out << '\t' << format_real(v);
            }
            out << '\n';
        }
    }
}

inline std::vector<QueryFeatures> load_features(const std::string& path)
{
    auto in = detail::open_input(path);
    std::vector<QueryFeatures> rows;
    std::map<std::string, std::size_t> where;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        detail::strip_cr(line);
        if (trim(line).empty() || line[0] == '#') {
            continue;
        }
        const auto f = split_whitespace(line);
        if (f.size() != 3 + kFeatureCount) {
            throw parse_error(path, line_no, "expected query_id, passage_id, rank and " + std::to_string(kFeatureCount) + " features");
        }
        const auto rank = parse_int(f[2]);
        if (!rank || *rank < 1) {
            throw parse_error(path, line_no, "bad rank");
        }
        FeatureVector fv{};
        for (std::size_t k = 0; k < kFeatureCount; ++k) {
            const auto v = parse_real(f[3 + k]);
            if (!v || !std::isfinite(*v)) {
                throw parse_error(path, line_no, "bad feature value");
            }
            fv[k] = *v;
        }
        const std::string q(f[0]);
        auto [it, fresh] = where.emplace(q, rows.size());
        if (fresh) {
            rows.push_back(QueryFeatures{q, {}, {}});
        }
        auto& row = rows[it->second];
        row.candidates.push_back(Candidate{std::string(f[1]), 0.0, static_cast<int>(*rank), "features", std::nullopt, std::nullopt});
        row.features.push_back(fv);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Negative sampling

struct TrainingExample {
    std::string query_id;
    std::string positive;
    std::vector<std::string> negatives;
    /// Positive first, then negatives in order.
    std::vector<FeatureVector> features;
};

struct SampleResult {
    std::vector<TrainingExample> examples;
    std::size_t skipped_queries = 0;
};

/// Positive = highest-ranked candidate with grade >= rel_threshold. Negatives
/// are drawn uniformly without replacement from the remaining candidates below
/// the threshold (unjudged included), seeded per query.
inline SampleResult sample_negatives(const std::map<std::string, CandidateList>& runs, const Qrels& qrels, std::size_t n_neg,
                                     std::uint64_t seed, int rel_threshold = 2)
{
    if (n_neg < 1) {
        throw Error(ErrorKind::invalid_argument, "sample_negatives: n_neg must be >= 1");
    }
    SampleResult out;
    for (const auto& [qid, list] : runs) {
        std::vector<const Candidate*> ordered;
        for (const auto& c : list) {
            ordered.push_back(&c);
        }
        std::stable_sort(ordered.begin(), ordered.end(), [](const Candidate* a, const Candidate* b) { return a->retrieval_rank < b->retrieval_rank; });
        const Candidate* positive = nullptr;
        std::vector<std::string> pool;
        for (const auto* c : ordered) {
            if (qrels.grade(qid, c->passage_id) >= rel_threshold) {
                if (!positive) {
                    positive = c;
                }
            } else {
                pool.push_back(c->passage_id);
            }
        }
        if (!positive || pool.empty()) {
            ++out.skipped_queries;
            continue;
        }
        Rng rng(derive_seed(seed, qid));
        const std::size_t take = std::min(n_neg, pool.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        }
        pool.resize(take);
        out.examples.push_back(TrainingExample{qid, positive->passage_id, std::move(pool), {}});
    }
    if (out.skipped_queries > 0) {
        log_info("sample_negatives: skipped " + std::to_string(out.skipped_queries) + " queries without a usable positive/negative");
    }
    return out;
}

/// Fills TrainingExample::features from per-query feature rows.
inline void attach_features(std::vector<TrainingExample>& examples, const std::vector<QueryFeatures>& rows)
{
    std::map<std::string, const QueryFeatures*> by_query;
    for (const auto& r : rows) {
        by_query[r.query_id] = &r;
    }
    for (auto& ex : examples) {
        auto it = by_query.find(ex.query_id);
        if (it == by_query.end()) {
            throw Error(ErrorKind::unknown_id, "no features for query '" + ex.query_id + "'");
        }
        std::unordered_map<std::string, const FeatureVector*> fv;
        for (std::size_t i = 0; i < it->second->candidates.size(); ++i) {
            fv[it->second->candidates[i].passage_id] = &it->second->features[i];
        }
        auto get = [&](const std::string& pid) {
            auto f = fv.find(pid);
            if (f == fv.end()) {
                throw Error(ErrorKind::unknown_id, "no features for ('" + ex.query_id + "', '" + pid + "')");
            }
            return *f->second;
        };
        ex.features.clear();
        ex.features.push_back(get(ex.positive));
        for (const auto& n : ex.negatives) {
            ex.features.push_back(get(n));
        }
    }
}

// ---------------------------------------------------------------------------
// Interaction scorer: logit = w2 . relu(W1 f + b1) + b2

struct InteractionScorer {
    Eigen::MatrixXd w1;  // H x F
    Eigen::MatrixXd b1;  // H x 1
    Eigen::MatrixXd w2;  // 1 x H
    Eigen::MatrixXd b2;  // 1 x 1
    double dropout = 0.1;

    std::size_t hidden() const { return static_cast<std::size_t>(w1.rows()); }

    static InteractionScorer zeros(std::size_t hidden, double dropout)
    {
        if (hidden < 1) {
            throw Error(ErrorKind::invalid_argument, "scorer: hidden width must be >= 1");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw Error(ErrorKind::invalid_argument, "scorer: dropout must lie in [0, 1)");
        }
        InteractionScorer s;
        s.w1 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(hidden), kFeatureCount);
        s.b1 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(hidden), 1);
        s.w2 = Eigen::MatrixXd::Zero(1, static_cast<Eigen::Index>(hidden));
        s.b2 = Eigen::MatrixXd::Zero(1, 1);
        s.dropout = dropout;
        return s;
    }

    static InteractionScorer initialized(std::size_t hidden, double dropout, std::uint64_t seed)
    {
        auto s = zeros(hidden, dropout);
        Rng rng(derive_seed(seed, "interaction-scorer-init"));
        glorot_uniform(s.w1, kFeatureCount, hidden, rng);
        glorot_uniform(s.w2, hidden, 1, rng);
        return s;
    }

    std::vector<Eigen::MatrixXd*> params() { return {&w1, &b1, &w2, &b2}; }
    std::vector<const Eigen::MatrixXd*> params() const { return {&w1, &b1, &w2, &b2}; }

    bool operator==(const InteractionScorer& o) const
    {
        return dropout == o.dropout && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2;
    }
};

/// Inverted-dropout mask: each unit is 0 with probability `rate`, otherwise
/// 1/(1 - rate). An empty mask means no dropout.
inline Eigen::VectorXd dropout_mask(std::size_t n, double rate, Rng& rng)
{
    Eigen::VectorXd m(static_cast<Eigen::Index>(n));
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m(i) = rng.uniform() < rate ? 0.0 : keep;
    }
    return m;
}

inline Eigen::VectorXd to_eigen(const FeatureVector& f) { return Eigen::Map<const Eigen::VectorXd>(f.data(), kFeatureCount); }

inline double score_with_mask(const InteractionScorer& s, const FeatureVector& features, const Eigen::VectorXd& mask)
{
    Eigen::VectorXd h = (s.w1 * to_eigen(features) + s.b1).cwiseMax(0.0);
    if (mask.size() > 0) {
        h = h.cwiseProduct(mask);
    }
    return (s.w2 * h)(0, 0) + s.b2(0, 0);
}

inline double score(const InteractionScorer& s, const FeatureVector& features, bool dropout_active, Rng& rng)
{
    if (dropout_active && s.dropout > 0.0) {
        return score_with_mask(s, features, dropout_mask(s.hidden(), s.dropout, rng));
    }
    return score_with_mask(s, features, Eigen::VectorXd());
}

inline double score(const InteractionScorer& s, const FeatureVector& features)
{
    return score_with_mask(s, features, Eigen::VectorXd());
}

/// Dropout masks of one forward pass, one per candidate (empty = none).
using PassMasks = std::vector<Eigen::VectorXd>;

struct ScorerGradients {
    Eigen::MatrixXd w1;
    Eigen::MatrixXd b1;
    Eigen::MatrixXd w2;
    Eigen::MatrixXd b2;

    std::vector<const Eigen::MatrixXd*> params() const { return {&w1, &b1, &w2, &b2}; }
};

namespace detail {

struct ScorerPass {
    Eigen::VectorXd logits;
    std::vector<Eigen::VectorXd> pre;
    std::vector<Eigen::VectorXd> act;  // post relu and mask
};

inline ScorerPass scorer_forward(const InteractionScorer& s, const std::vector<FeatureVector>& feats, const PassMasks& masks)
{
    ScorerPass p;
    const auto n = static_cast<Eigen::Index>(feats.size());
    p.logits.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd pre = s.w1 * to_eigen(feats[static_cast<std::size_t>(i)]) + s.b1;
        Eigen::VectorXd a = pre.cwiseMax(0.0);
        if (!masks.empty() && masks[static_cast<std::size_t>(i)].size() > 0) {
            a = a.cwiseProduct(masks[static_cast<std::size_t>(i)]);
        }
        p.logits(i) = (s.w2 * a)(0, 0) + s.b2(0, 0);
        p.pre.push_back(std::move(pre));
        p.act.push_back(std::move(a));
    }
    return p;
}

inline void scorer_backward(const InteractionScorer& s, const std::vector<FeatureVector>& feats, const PassMasks& masks,
                            const ScorerPass& p, const Eigen::VectorXd& grad_logits, ScorerGradients& g)
{
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const double dz = grad_logits(static_cast<Eigen::Index>(i));
        g.w2 += dz * p.act[i].transpose();
        g.b2(0, 0) += dz;
        Eigen::VectorXd dh = dz * s.w2.transpose();
        if (!masks.empty() && masks[i].size() > 0) {
            dh = dh.cwiseProduct(masks[i]);
        }
        for (Eigen::Index u = 0; u < dh.size(); ++u) {
            if (p.pre[i](u) <= 0.0) {
                dh(u) = 0.0;
            }
        }
        g.w1 += dh * to_eigen(feats[i]).transpose();
        g.b1 += dh;
    }
}

}  // namespace detail

/// R-Drop list loss of one example (positive at index 0) under two fixed sets
/// of dropout masks, with exact gradients when `grad` is given.
inline RDropLoss scorer_rdrop_loss(const InteractionScorer& s, const std::vector<FeatureVector>& feats, const PassMasks& masks1,
                                   const PassMasks& masks2, double alpha, ScorerGradients* grad = nullptr)
{
    if (feats.size() < 2) {
        throw Error(ErrorKind::invalid_argument, "scorer loss needs a positive and at least one negative");
    }
    const auto p1 = detail::scorer_forward(s, feats, masks1);
    const auto p2 = detail::scorer_forward(s, feats, masks2);
    auto loss = rdrop_loss(p1.logits, p2.logits, 0, alpha);
    if (grad) {
        grad->w1 = Eigen::MatrixXd::Zero(s.w1.rows(), s.w1.cols());
        grad->b1 = Eigen::MatrixXd::Zero(s.b1.rows(), 1);
        grad->w2 = Eigen::MatrixXd::Zero(1, s.w2.cols());
        grad->b2 = Eigen::MatrixXd::Zero(1, 1);
        detail::scorer_backward(s, feats, masks1, p1, loss.grad_z1, *grad);
        detail::scorer_backward(s, feats, masks2, p2, loss.grad_z2, *grad);
    }
    return loss;
}

struct ScorerTrainConfig {
    std::size_t hidden = 16;
    double dropout = 0.1;
    double lr = 1e-3;
    std::size_t epochs = 20;
    double rdrop_alpha = 1.0;
    std::uint64_t seed = 42;
};

/// Mean plain cross-entropy over examples, no dropout.
inline double mean_cross_entropy(const InteractionScorer& s, const std::vector<TrainingExample>& examples)
{
    double total = 0.0;
    for (const auto& ex : examples) {
        Eigen::VectorXd z(static_cast<Eigen::Index>(ex.features.size()));
        for (std::size_t i = 0; i < ex.features.size(); ++i) {
            z(static_cast<Eigen::Index>(i)) = score(s, ex.features[i]);
        }
        total += listwise_loss(z, 0);
    }
    return examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
}

/// One Adam step per example, examples visited in a seeded shuffled order
/// each epoch. `epoch_losses`, when given, receives the mean loss per epoch.
inline InteractionScorer train_interaction_scorer(const std::vector<TrainingExample>& examples, const ScorerTrainConfig& cfg,
                                                  std::vector<double>* epoch_losses = nullptr)
{
    if (examples.empty()) {
        throw Error(ErrorKind::invalid_argument, "train_interaction_scorer: no examples");
    }
    if (!(cfg.rdrop_alpha >= 0.0)) {
        throw Error(ErrorKind::invalid_argument, "train_interaction_scorer: rdrop_alpha must be >= 0");
    }
    for (const auto& ex : examples) {
        if (ex.features.size() != ex.negatives.size() + 1 || ex.negatives.empty()) {
            throw Error(ErrorKind::invalid_argument, "training example for '" + ex.query_id + "' has no features or no negatives");
        }
    }
    auto scorer = InteractionScorer::initialized(cfg.hidden, cfg.dropout, cfg.seed);
    Adam adam(cfg.lr);
    Rng rng(derive_seed(cfg.seed, "interaction-scorer-train"));
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    ScorerGradients grad;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double sum = 0.0;
        for (std::size_t idx : order) {
            const auto& ex = examples[idx];
            PassMasks m1, m2;
            if (cfg.dropout > 0.0) {
                for (std::size_t i = 0; i < ex.features.size(); ++i) {
                    m1.push_back(dropout_mask(cfg.hidden, cfg.dropout, rng));
                }
                for (std::size_t i = 0; i < ex.features.size(); ++i) {
                    m2.push_back(dropout_mask(cfg.hidden, cfg.dropout, rng));
                }
            }
            const auto loss = scorer_rdrop_loss(scorer, ex.features, m1, m2, cfg.rdrop_alpha, &grad);
            if (!std::isfinite(loss.total)) {
                throw Error(ErrorKind::numeric, "train_interaction_scorer: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                                    ", query '" + ex.query_id + "'");
            }
            sum += loss.total;
            std::vector<std::span<double>> ps;
            for (auto* p : scorer.params()) {
                ps.push_back(flat(*p));
            }
            std::vector<std::span<const double>> gs;
            for (const auto* g : grad.params()) {
                gs.push_back(flat(*g));
            }
            adam.step(ps, gs);
        }
        const double mean = sum / static_cast<double>(examples.size());
        if (epoch_losses) {
            epoch_losses->push_back(mean);
        }
        log_info("scorer epoch " + std::to_string(epoch + 1) + " mean loss " + format_real(mean, 6));
    }
    return scorer;
}

namespace detail {

inline void write_matrix(std::ostream& out, const char* name, const Eigen::MatrixXd& m)
{
    out << name << ' ' << m.rows() << ' ' << m.cols();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        out << ' ' << format_real(m.data()[i]);
    }
    out << '\n';
}

/// Reads `name rows cols v...` (column-major values) into a matrix of the
/// expected shape.
inline void read_matrix(std::istream& in, const std::string& path, std::size_t& line_no, const std::string& name, Eigen::MatrixXd& m,
                        Eigen::Index rows, Eigen::Index cols)
{
    std::string line;
    ++line_no;
    if (!std::getline(in, line)) {
        throw parse_error(path, line_no, "unexpected end of file, expected tensor '" + name + "'");
    }
    const auto f = split_whitespace(line);
    if (f.size() < 3 || f[0] != name) {
        throw parse_error(path, line_no, "expected tensor '" + name + "'");
    }
    if (parse_int(f[1]) != rows || parse_int(f[2]) != cols) {
        throw parse_error(path, line_no, "tensor '" + name + "' has the wrong shape");
    }
    if (f.size() != static_cast<std::size_t>(3 + rows * cols)) {
        throw parse_error(path, line_no, "tensor '" + name + "' has the wrong number of values");
    }
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows * cols; ++i) {
        const auto v = parse_real(f[static_cast<std::size_t>(3 + i)]);
        if (!v || !std::isfinite(*v)) {
            throw parse_error(path, line_no, "bad value in tensor '" + name + "'");
        }
        m.data()[i] = *v;
    }
}

}  // namespace detail

/// Text checkpoint: header, `hidden`, `dropout`, then w1 b1 w2 b2, each as
/// `name rows cols` followed by column-major values at full precision.
inline void save_scorer(const InteractionScorer& s, const std::string& path)
{
    auto out = detail::open_output(path);
    out << "hybridrank-scorer 1\n";
    out << "features " << kFeatureCount << '\n';
    out << "hidden " << s.hidden() << '\n';
    out << "dropout " << format_real(s.dropout) << '\n';
    detail::write_matrix(out, "w1", s.w1);
    detail::write_matrix(out, "b1", s.b1);
    detail::write_matrix(out, "w2", s.w2);
    detail::write_matrix(out, "b2", s.b2);
}

inline InteractionScorer load_scorer(const std::string& path)
{
    auto in = detail::open_input(path);
    detail::expect_header(in, path, "hybridrank-scorer", 1);
    std::size_t line_no = 1;
    if (detail::read_count_line(in, path, line_no, "features") != kFeatureCount) {
        throw parse_error(path, line_no, "feature count mismatch");
    }
    const auto hidden = static_cast<Eigen::Index>(detail::read_count_line(in, path, line_no, "hidden"));
    std::string line;
    ++line_no;
    std::getline(in, line);
    const auto f = split_whitespace(line);
    const auto dropout = f.size() == 2 && f[0] == "dropout" ? parse_real(f[1]) : std::nullopt;
    if (!dropout) {
        throw parse_error(path, line_no, "expected 'dropout <real>'");
    }
    InteractionScorer s = InteractionScorer::zeros(static_cast<std::size_t>(hidden), *dropout);
    detail::read_matrix(in, path, line_no, "w1", s.w1, hidden, kFeatureCount);
    detail::read_matrix(in, path, line_no, "b1", s.b1, hidden, 1);
    detail::read_matrix(in, path, line_no, "w2", s.w2, 1, hidden);
    detail::read_matrix(in, path, line_no, "b2", s.b2, 1, 1);
    return s;
}

// ---------------------------------------------------------------------------
// Score tables: per-query passage scores from any ranking model.

using ScoreTable = std::map<std::string, std::map<std::string, double>>;

/// Per-query minmax over each source's covered passages, then sum of weighted
/// scores with absent passages contributing 0. Zero-weight sources are ignored.
inline ScoreTable ensemble_scores(const std::vector<ScoreTable>& sources, const std::vector<double>& weights)
{
    validate_weights(weights, sources.size(), "ensemble_scores");
    std::map<std::string, std::map<std::string, std::vector<double>>> parts;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (weights[i] == 0.0) {
            continue;
        }
        for (const auto& [q, scores] : sources[i]) {
            if (scores.empty()) {
                continue;
            }
            std::vector<double> v;
            for (const auto& [_, s] : scores) {
                v.push_back(s);
            }
            const auto n = normalize_values(v, Normalization::minmax);
            std::size_t k = 0;
            for (const auto& [pid, _] : scores) {
                parts[q][pid].push_back(weights[i] * n[k++]);
            }
        }
    }
    ScoreTable out;
    for (auto& [q, per] : parts) {
        for (auto& [pid, p] : per) {
            out[q][pid] = detail::canonical_sum(p);
        }
    }
    return out;
}

/// A query's scores as a ranked list (score desc, id asc), scores stored as
/// both retrieval_score and ranking_score.
inline CandidateList ranked_from_scores(const std::map<std::string, double>& scores, const std::string& tag)
{
    CandidateList out;
    for (const auto& [pid, s] : scores) {
        out.push_back(Candidate{pid, s, 1, tag, s, std::nullopt});
    }
    finalize_ranking(out, out.size());
    return out;
}

struct ScoreFile {
    ScoreTable scores;
    std::size_t duplicates = 0;
};

/// TSV `query_id<TAB>passage_id<TAB>score` or a six-column TREC run (ranks
/// ignored). A repeated pair keeps the last score and is counted.
inline ScoreFile load_score_file(const std::string& path)
{
    auto in = detail::open_input(path);
    ScoreFile out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto f = split_whitespace(line);
        if (f.empty()) {
            continue;
        }
        std::string_view q, d, s;
        if (f.size() == 3) {
            q = f[0], d = f[1], s = f[2];
        } else if (f.size() == 6) {
            q = f[0], d = f[2], s = f[4];
        } else {
            throw parse_error(path, line_no, "expected 'query_id passage_id score' or a TREC run line");
        }
        const auto v = parse_real(s);
        if (!v || !std::isfinite(*v)) {
            throw parse_error(path, line_no, "score is not a finite real");
        }
        auto [it, fresh] = out.scores[std::string(q)].insert_or_assign(std::string(d), *v);
        if (!fresh) {
            ++out.duplicates;
        }
    }
    if (out.duplicates > 0) {
        log_warn(path + ": " + std::to_string(out.duplicates) + " duplicate (query, passage) pairs, last score kept");
    }
    return out;
}

inline void save_score_file(const ScoreTable& table, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& [q, scores] : table) {
        for (const auto& [d, s] : scores) {
            out << q << '\t' << d << '\t' << format_real(s) << '\n';
        }
    }
}

/// Scores every row of every query with the trained scorer.
inline ScoreTable score_features(const InteractionScorer& s, const std::vector<QueryFeatures>& rows)
{
    ScoreTable out;
    for (const auto& r : rows) {
        auto& dst = out[r.query_id];
        for (std::size_t i = 0; i < r.candidates.size(); ++i) {
            dst[r.candidates[i].passage_id] = score(s, r.features[i]);
        }
    }
    return out;
}

}  // namespace hybridrank
