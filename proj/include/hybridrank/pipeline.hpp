#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "dense.hpp"
#include "eval.hpp"
#include "fusion.hpp"
#include "hlatr.hpp"
#include "rerank.hpp"
#include "sparse.hpp"

namespace hybridrank {

// ---------------------------------------------------------------------------
// MaxP aggregation

/// Document score = max over its passages; documents ranked by score desc,
/// then doc id asc. The tag of each query's first entry is kept.
inline Run maxp_aggregate(const Run& passage_run)
{
    std::map<std::string, std::map<std::string, double>> best;
    std::map<std::string, std::string> tags;
    std::vector<std::string> query_order;
    for (const auto& e : passage_run) {
        if (!tags.count(e.query_id)) {
            tags[e.query_id] = e.tag;
            query_order.push_back(e.query_id);
        }
        const auto doc = parent_doc_id(e.doc_id);
        auto [it, fresh] = best[e.query_id].emplace(doc, e.score);
        if (!fresh && e.score > it->second) {
            it->second = e.score;
        }
    }
    Run out;
    for (const auto& q : query_order) {
        std::vector<std::pair<std::string, double>> docs(best[q].begin(), best[q].end());
        std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) { return score_then_id(a.second, a.first, b.second, b.first); });
        for (std::size_t i = 0; i < docs.size(); ++i) {
            out.push_back(RunEntry{q, docs[i].first, static_cast<int>(i + 1), docs[i].second, tags[q]});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct ScoreFileSpec {
    std::string path;
    double weight = 1.0;
};

struct PipelineConfig {
    std::uint64_t seed = 42;
    unsigned threads = 1;
    std::string output_dir = "out";

    // data
    std::string corpus;
    CorpusFormat corpus_format = CorpusFormat::automatic;
    std::string queries;
    std::string qrels;
    std::string train_queries;
    std::string train_qrels;
    bool split = false;
    SplitOptions split_options;

    // retrieval
    std::size_t retrieval_k = 100;
    bool bm25_enabled = true;
    Bm25Params bm25;
    std::string expansions;
    bool impact_enabled = true;
    std::string term_weights;
    std::string query_term_weights;
    bool dense_enabled = true;
    HashEmbedder embedder;
    std::string vectors;
    std::string query_vectors;
    /// Extra first-stage runs by name, usable as fusion sources.
    std::map<std::string, std::string> external_runs;

    // fusion
    bool fusion_enabled = true;
    std::size_t fusion_k = 100;
    std::vector<FusionSource> fusion_sources{{"bm25", 0.4, Normalization::minmax},
                                             {"impact", 0.0, Normalization::minmax},
                                             {"dense", 0.6, Normalization::minmax}};

    // ranking
    bool ranking_enabled = true;
    bool scorer_train = true;
    std::string scorer_model;
    ScorerTrainConfig scorer;
    std::size_t n_neg = 7;
    int rel_threshold = 2;
    double scorer_weight = 1.0;
    std::vector<ScoreFileSpec> score_files;
    /// Standard deviation of seeded Gaussian noise added to ranking scores.
    double score_noise = 0.0;

    // hlatr
    bool hlatr_enabled = true;
    bool hlatr_train = true;
    bool hlatr_zero_init = false;
    std::string hlatr_model;
    HlatrConfig hlatr;

    EvalOptions eval;
};

namespace detail {

inline std::string resolve_path(const std::string& base, const std::string& p)
{
    if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) {
        return p;
    }
    return (std::filesystem::path(base) / p).lexically_normal().string();
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& dst)
{
    if (j.contains(key) && !j[key].is_null()) {
        dst = j[key].get<T>();
    }
}

inline void read_path(const nlohmann::json& j, const char* key, const std::string& base, std::string& dst)
{
    if (j.contains(key) && !j[key].is_null()) {
        dst = resolve_path(base, j[key].get<std::string>());
    }
}

}  // namespace detail

/// Parses the pipeline document. Relative paths resolve against `base_dir`;
/// absent keys keep their defaults.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::string& base_dir = "")
{
    PipelineConfig c;
    try {
        detail::read_opt(j, "seed", c.seed);
        detail::read_opt(j, "threads", c.threads);
        detail::read_path(j, "output_dir", base_dir, c.output_dir);
        if (j.contains("data")) {
            const auto& d = j["data"];
            detail::read_path(d, "corpus", base_dir, c.corpus);
            if (d.contains("corpus_format")) {
                c.corpus_format = parse_corpus_format(d["corpus_format"].get<std::string>());
            }
            detail::read_path(d, "queries", base_dir, c.queries);
            detail::read_path(d, "qrels", base_dir, c.qrels);
            detail::read_path(d, "train_queries", base_dir, c.train_queries);
            detail::read_path(d, "train_qrels", base_dir, c.train_qrels);
            if (d.contains("split")) {
                detail::read_opt(d["split"], "enabled", c.split);
                detail::read_opt(d["split"], "window", c.split_options.window);
                detail::read_opt(d["split"], "stride", c.split_options.stride);
            }
        }
        if (j.contains("retrieval")) {
            const auto& r = j["retrieval"];
            detail::read_opt(r, "k", c.retrieval_k);
            if (r.contains("bm25")) {
                const auto& b = r["bm25"];
                detail::read_opt(b, "enabled", c.bm25_enabled);
                detail::read_opt(b, "k1", c.bm25.k1);
                detail::read_opt(b, "b", c.bm25.b);
                detail::read_path(b, "expansions", base_dir, c.expansions);
            }
            if (r.contains("impact")) {
                const auto& b = r["impact"];
                detail::read_opt(b, "enabled", c.impact_enabled);
                detail::read_path(b, "term_weights", base_dir, c.term_weights);
                detail::read_path(b, "query_weights", base_dir, c.query_term_weights);
            }
            if (r.contains("dense")) {
                const auto& b = r["dense"];
                detail::read_opt(b, "enabled", c.dense_enabled);
                detail::read_opt(b, "dim", c.embedder.dim);
                detail::read_opt(b, "seed", c.embedder.seed);
                detail::read_path(b, "vectors", base_dir, c.vectors);
                detail::read_path(b, "query_vectors", base_dir, c.query_vectors);
            }
            if (r.contains("external_runs")) {
                for (const auto& [name, path] : r["external_runs"].items()) {
                    c.external_runs[name] = detail::resolve_path(base_dir, path.get<std::string>());
                }
            }
        }
        if (j.contains("fusion")) {
            const auto& f = j["fusion"];
            detail::read_opt(f, "enabled", c.fusion_enabled);
            detail::read_opt(f, "k", c.fusion_k);
            if (f.contains("sources")) {
                c.fusion_sources.clear();
                for (const auto& s : f["sources"]) {
                    FusionSource src;
                    src.source = s.at("source").get<std::string>();
                    detail::read_opt(s, "weight", src.weight);
                    if (s.contains("normalization")) {
                        src.normalization = parse_normalization(s["normalization"].get<std::string>());
                    }
                    c.fusion_sources.push_back(src);
                }
            }
        }
        if (j.contains("ranking")) {
            const auto& r = j["ranking"];
            detail::read_opt(r, "enabled", c.ranking_enabled);
            detail::read_opt(r, "n_neg", c.n_neg);
            detail::read_opt(r, "rel_threshold", c.rel_threshold);
            detail::read_opt(r, "scorer_weight", c.scorer_weight);
            detail::read_opt(r, "score_noise", c.score_noise);
            if (r.contains("scorer")) {
                const auto& s = r["scorer"];
                detail::read_opt(s, "train", c.scorer_train);
                detail::read_path(s, "model", base_dir, c.scorer_model);
                detail::read_opt(s, "hidden", c.scorer.hidden);
                detail::read_opt(s, "dropout", c.scorer.dropout);
                detail::read_opt(s, "lr", c.scorer.lr);
                detail::read_opt(s, "epochs", c.scorer.epochs);
                detail::read_opt(s, "rdrop_alpha", c.scorer.rdrop_alpha);
            }
            if (r.contains("score_files")) {
                for (const auto& s : r["score_files"]) {
                    ScoreFileSpec spec;
                    spec.path = detail::resolve_path(base_dir, s.at("path").get<std::string>());
                    detail::read_opt(s, "weight", spec.weight);
                    c.score_files.push_back(spec);
                }
            }
        }
        if (j.contains("hlatr")) {
            const auto& h = j["hlatr"];
            detail::read_opt(h, "enabled", c.hlatr_enabled);
            detail::read_opt(h, "train", c.hlatr_train);
            detail::read_path(h, "model", base_dir, c.hlatr_model);
            if (h.contains("init")) {
                const auto init = h["init"].get<std::string>();
                if (init != "random" && init != "zeros") {
                    throw Error(ErrorKind::invalid_argument, "hlatr.init must be 'random' or 'zeros'");
                }
                c.hlatr_zero_init = init == "zeros";
            }
            c.hlatr = hlatr_config_from_json(h, c.hlatr);
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            detail::read_opt(e, "ndcg_k", c.eval.ndcg_k);
            detail::read_opt(e, "recall_k", c.eval.recall_k);
            detail::read_opt(e, "mrr_k", c.eval.mrr_k);
            detail::read_opt(e, "rel_threshold", c.eval.rel_threshold);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, std::string("pipeline config: ") + e.what());
    }
    c.scorer.seed = c.seed;
    if (!j.contains("hlatr") || !j["hlatr"].contains("seed")) {
        c.hlatr.seed = c.seed;
    }
    return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path)
{
    auto in = detail::open_input(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path + ": " + e.what());
    }
    return pipeline_config_from_json(j, std::filesystem::path(path).parent_path().string());
}

/// Every setting with its effective value, in the shipped config layout.
inline nlohmann::ordered_json pipeline_config_to_json(const PipelineConfig& c)
{
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["output_dir"] = c.output_dir;
    j["data"] = {{"corpus", c.corpus}, {"corpus_format", "auto"}, {"queries", c.queries}, {"qrels", c.qrels},
                 {"train_queries", nullptr}, {"train_qrels", nullptr},
                 {"split", {{"enabled", c.split}, {"window", c.split_options.window}, {"stride", c.split_options.stride}}}};
    nlohmann::ordered_json sources = nlohmann::ordered_json::array();
    for (const auto& s : c.fusion_sources) {
        sources.push_back({{"source", s.source}, {"weight", s.weight}, {"normalization", to_string(s.normalization)}});
    }
    j["retrieval"] = {{"k", c.retrieval_k},
                      {"bm25", {{"enabled", c.bm25_enabled}, {"k1", c.bm25.k1}, {"b", c.bm25.b}, {"expansions", nullptr}}},
                      {"impact", {{"enabled", c.impact_enabled}, {"term_weights", nullptr}, {"query_weights", nullptr}}},
                      {"dense", {{"enabled", c.dense_enabled}, {"dim", c.embedder.dim}, {"seed", c.embedder.seed}, {"vectors", nullptr}, {"query_vectors", nullptr}}},
                      {"external_runs", nlohmann::ordered_json::object()}};
    j["fusion"] = {{"enabled", c.fusion_enabled}, {"k", c.fusion_k}, {"sources", sources}};
    j["ranking"] = {{"enabled", c.ranking_enabled},
                    {"n_neg", c.n_neg},
                    {"rel_threshold", c.rel_threshold},
                    {"scorer_weight", c.scorer_weight},
                    {"score_noise", c.score_noise},
                    {"scorer", {{"train", c.scorer_train}, {"model", nullptr}, {"hidden", c.scorer.hidden}, {"dropout", c.scorer.dropout},
                                {"lr", c.scorer.lr}, {"epochs", c.scorer.epochs}, {"rdrop_alpha", c.scorer.rdrop_alpha}}},
                    {"score_files", nlohmann::ordered_json::array()}};
    nlohmann::ordered_json h = {{"enabled", c.hlatr_enabled}, {"train", c.hlatr_train}, {"model", nullptr},
                                {"init", c.hlatr_zero_init ? "zeros" : "random"}};
    const auto model_fields = to_json(c.hlatr);
    for (const auto& [k, v] : model_fields.items()) {
        h[k] = v;
    }
    j["hlatr"] = h;
    j["eval"] = {{"ndcg_k", c.eval.ndcg_k}, {"recall_k", c.eval.recall_k}, {"mrr_k", c.eval.mrr_k}, {"rel_threshold", c.eval.rel_threshold}};
    return j;
}

// ---------------------------------------------------------------------------
// Stages

using QueryRuns = std::map<std::string, CandidateList>;

/// Loaded inputs and built backends shared by the stages.
struct PipelineContext {
    PipelineConfig config;
    Corpus corpus;
    std::vector<Query> queries;
    std::optional<Qrels> qrels;
    std::vector<Query> train_queries;
    std::optional<Qrels> train_qrels;
    std::optional<InvertedIndex> sparse;
    std::optional<ImpactIndex> impact;
    std::optional<VectorStore> dense;
    std::unordered_map<std::string, TermWeights> query_weights;
    std::optional<VectorStore> query_vectors;

    FeatureSources feature_sources() const
    {
        FeatureSources s;
        s.corpus = &corpus;
        s.sparse = sparse ? &*sparse : nullptr;
        s.bm25 = config.bm25;
        s.impact = impact ? &*impact : nullptr;
        s.dense = dense ? &*dense : nullptr;
        s.embedder = config.embedder;
        s.query_weights = query_weights.empty() ? nullptr : &query_weights;
        s.query_vectors = query_vectors ? &*query_vectors : nullptr;
        return s;
    }
};

inline Error stage_error(const std::string& stage, const std::string& what)
{
    return Error(ErrorKind::missing_artifact, "stage '" + stage + "': " + what);
}

/// Loads data and builds every enabled retrieval backend.
inline PipelineContext prepare_context(const PipelineConfig& cfg)
{
    PipelineContext ctx;
    ctx.config = cfg;
    if (cfg.corpus.empty()) {
        throw stage_error("retrieval", "no corpus configured");
    }
    if (cfg.queries.empty()) {
        throw stage_error("retrieval", "no queries configured");
    }
    const auto docs = load_corpus(cfg.corpus, cfg.corpus_format);
    ctx.corpus = cfg.split ? Corpus::from_split(docs, cfg.split_options) : Corpus::from_native(docs);
    ctx.queries = load_queries(cfg.queries);
    if (!cfg.qrels.empty()) {
        ctx.qrels = load_qrels(cfg.qrels);
    }
    ctx.train_queries = cfg.train_queries.empty() ? ctx.queries : load_queries(cfg.train_queries);
    if (!cfg.train_qrels.empty()) {
        ctx.train_qrels = load_qrels(cfg.train_qrels);
    } else {
        ctx.train_qrels = ctx.qrels;
    }
    if (cfg.split && ctx.train_qrels) {
        // Training labels are per passage: each inherits its document's grade.
        std::unordered_map<std::string, std::vector<std::string>> children;
        for (const auto& p : ctx.corpus.passages()) {
            children[p.parent_doc_id].push_back(p.passage_id);
        }
        Qrels passage_qrels;
        for (const auto& q : ctx.train_qrels->query_ids()) {
            for (const auto& [doc, grade] : ctx.train_qrels->judgments(q)) {
                auto it = children.find(doc);
                if (it == children.end()) {
                    continue;
                }
                for (const auto& pid : it->second) {
                    passage_qrels.add(q, pid, grade);
                }
            }
        }
        ctx.train_qrels = std::move(passage_qrels);
    }
    if (cfg.bm25_enabled) {
        const auto exp = cfg.expansions.empty() ? Expansions{} : load_expansions(cfg.expansions);
        ctx.sparse = build_inverted_index(ctx.corpus, exp, cfg.threads);
    }
    if (cfg.impact_enabled) {
        ctx.impact = build_impact_index(cfg.term_weights.empty() ? default_term_weights(ctx.corpus)
                                                                 : align_weights(ctx.corpus, load_term_weights(cfg.term_weights)));
        if (!cfg.query_term_weights.empty()) {
            for (auto& [id, w] : load_term_weights(cfg.query_term_weights)) {
                ctx.query_weights[id] = std::move(w);
            }
        }
    }
    if (cfg.dense_enabled) {
        if (cfg.vectors.empty()) {
            ctx.dense = build_vector_store(ctx.corpus, cfg.embedder, cfg.threads);
        } else {
            ctx.dense = load_vectors(cfg.vectors, ctx.corpus);
            if (cfg.query_vectors.empty()) {
                throw stage_error("dense", "external passage vectors need query_vectors");
            }
        }
        if (!cfg.query_vectors.empty()) {
            ctx.query_vectors = load_vectors(cfg.query_vectors);
            if (ctx.query_vectors->dim() != ctx.dense->dim()) {
                throw Error(ErrorKind::dimension_mismatch, "stage 'dense': query vectors and passage vectors differ in dimension");
            }
        }
    }
    return ctx;
}

/// One retriever over a query set. Queries are processed in parallel, each
/// into its own slot.
inline QueryRuns retrieve_all(const PipelineContext& ctx, const std::vector<Query>& queries, const std::string& method, std::size_t k)
{
    std::vector<CandidateList> lists(queries.size());
    parallel_for(queries.size(), ctx.config.threads, [&](std::size_t i) {
        const auto& q = queries[i];
        if (method == "bm25") {
            lists[i] = retrieve_bm25(*ctx.sparse, q, k, ctx.config.bm25);
        } else if (method == "impact") {
            auto it = ctx.query_weights.find(q.query_id);
            lists[i] = retrieve_impact(*ctx.impact, it != ctx.query_weights.end() ? it->second : unit_query_weights(q.text), k);
        } else if (method == "dense") {
            std::vector<double> qv;
            if (ctx.query_vectors && ctx.query_vectors->ordinal_of(q.query_id)) {
                auto v = ctx.query_vectors->vector(*ctx.query_vectors->ordinal_of(q.query_id));
                qv.assign(v.begin(), v.end());
            } else if (ctx.query_vectors) {
                throw stage_error("dense", "no vector for query '" + q.query_id + "'");
            } else if (!tokenize(q.text).empty()) {
                qv = ctx.config.embedder(q.text);
            }
            if (!qv.empty()) {
                lists[i] = retrieve_dense(*ctx.dense, qv, k);
            }
        } else {
            throw Error(ErrorKind::invalid_argument, "unknown retriever '" + method + "'");
        }
    });
    QueryRuns out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        out[queries[i].query_id] = std::move(lists[i]);
    }
    return out;
}

inline Run to_run(const std::vector<Query>& queries, const QueryRuns& runs, const std::string& tag)
{
    Run run;
    for (const auto& q : queries) {
        auto it = runs.find(q.query_id);
        if (it != runs.end()) {
            append_run(run, q.query_id, it->second, tag);
        }
    }
    return run;
}

inline QueryRuns from_run(const Run& run, const std::string& tag)
{
    QueryRuns out;
    for (const auto& [q, docs] : ranked_docs(run)) {
        (void)docs;
        out[q];
    }
    std::map<std::string, std::vector<const RunEntry*>> grouped;
    for (const auto& e : run) {
        grouped[e.query_id].push_back(&e);
    }
    for (auto& [q, entries] : grouped) {
        std::stable_sort(entries.begin(), entries.end(), [](const RunEntry* a, const RunEntry* b) { return a->rank < b->rank; });
        auto& list = out[q];
        for (std::size_t i = 0; i < entries.size(); ++i) {
            list.push_back(Candidate{entries[i]->doc_id, entries[i]->score, static_cast<int>(i + 1), tag, std::nullopt, std::nullopt});
        }
    }
    return out;
}

/// First-stage runs for every enabled retriever and external run, keyed by
/// source name.
inline std::map<std::string, QueryRuns> retrieval_stage(const PipelineContext& ctx, const std::vector<Query>& queries)
{
    std::map<std::string, QueryRuns> out;
    const auto& cfg = ctx.config;
    if (cfg.bm25_enabled) {
        out["bm25"] = retrieve_all(ctx, queries, "bm25", cfg.retrieval_k);
    }
    if (cfg.impact_enabled) {
        out["impact"] = retrieve_all(ctx, queries, "impact", cfg.retrieval_k);
    }
    if (cfg.dense_enabled) {
        out["dense"] = retrieve_all(ctx, queries, "dense", cfg.retrieval_k);
    }
    for (const auto& [name, path] : cfg.external_runs) {
        out[name] = from_run(read_run(path), name);
    }
    return out;
}

/// Stage-1 output: the weighted fusion of the configured sources, or the
/// first available source when fusion is disabled.
/// Source passed straight through when fusion is off.
inline std::string passthrough_source(const std::map<std::string, QueryRuns>& sources)
{
    for (const char* name : {"bm25", "impact", "dense"}) {
        if (sources.count(name)) {
            return name;
        }
    }
    if (!sources.empty()) {
        return sources.begin()->first;
    }
    throw stage_error("retrieval", "no retriever enabled");
}

inline QueryRuns fusion_stage(const PipelineContext& ctx, const std::vector<Query>& queries, const std::map<std::string, QueryRuns>& sources)
{
    const auto& cfg = ctx.config;
    if (!cfg.fusion_enabled) {
        return sources.at(passthrough_source(sources));
    }
    std::vector<FusionSource> used;
    for (const auto& s : cfg.fusion_sources) {
        if (!sources.count(s.source)) {
            if (s.weight == 0.0) {
                continue;
            }
            throw stage_error("fusion", "source '" + s.source + "' is not enabled or configured");
        }
        used.push_back(s);
    }
    if (used.empty()) {
        throw stage_error("fusion", "no sources");
    }
    std::vector<CandidateList> fused(queries.size());
    parallel_for(queries.size(), cfg.threads, [&](std::size_t i) {
        std::vector<CandidateList> lists;
        for (const auto& s : used) {
            auto it = sources.at(s.source).find(queries[i].query_id);
            lists.push_back(it == sources.at(s.source).end() ? CandidateList{} : it->second);
        }
        fused[i] = normalize_and_fuse(lists, used, cfg.fusion_k);
    });
    QueryRuns out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        out[queries[i].query_id] = std::move(fused[i]);
    }
    return out;
}

/// Feature rows for every query's stage-1 candidates, in parallel.
inline std::vector<QueryFeatures> compute_features(const PipelineContext& ctx, const std::vector<Query>& queries, const QueryRuns& stage1)
{
    const auto sources = ctx.feature_sources();
    std::vector<QueryFeatures> rows(queries.size());
    parallel_for(queries.size(), ctx.config.threads, [&](std::size_t i) {
        const auto& q = queries[i];
        rows[i].query_id = q.query_id;
        auto it = stage1.find(q.query_id);
        if (it == stage1.end()) {
            return;
        }
        FeatureExtractor fx(sources, q);
        rows[i].candidates = it->second;
        for (const auto& c : it->second) {
            rows[i].features.push_back(fx.extract(c.passage_id, c.retrieval_rank));
        }
    });
    return rows;
}

inline InteractionScorer train_scorer_from_runs(const PipelineContext& ctx, const QueryRuns& train_stage1,
                                                const std::vector<QueryFeatures>& train_features)
{
    if (!ctx.train_qrels) {
        throw stage_error("ranking", "training the scorer needs qrels");
    }
    auto sampled = sample_negatives(train_stage1, *ctx.train_qrels, ctx.config.n_neg, ctx.config.seed, ctx.config.rel_threshold);
    if (sampled.examples.empty()) {
        throw stage_error("ranking", "no training examples (no query has a relevant and a non-relevant candidate)");
    }
    attach_features(sampled.examples, train_features);
    return train_interaction_scorer(sampled.examples, ctx.config.scorer);
}

/// Adds seeded N(0, sigma^2) noise keyed by (query, passage).
inline void add_score_noise(ScoreTable& table, double sigma, std::uint64_t seed)
{
    if (sigma <= 0.0) {
        return;
    }
    for (auto& [q, scores] : table) {
        for (auto& [p, s] : scores) {
            Rng rng(derive_seed(seed, q + "\x1f" + p + "\x1fnoise"));
            s += sigma * rng.normal();
        }
    }
}

/// Stage-2 lists: candidates of stage 1, rescored by the ensemble of the
/// scorer and any score files, sorted by ranking score (desc, id asc).
/// Retrieval ranks from stage 1 are kept on every candidate.
inline QueryRuns ranking_stage(const PipelineContext& ctx, const std::vector<Query>& queries, const QueryRuns& stage1,
                               const std::optional<InteractionScorer>& scorer, const std::vector<QueryFeatures>& features)
{
    const auto& cfg = ctx.config;
    std::vector<ScoreTable> sources;
    std::vector<double> weights;
    if (scorer) {
        sources.push_back(score_features(*scorer, features));
        weights.push_back(cfg.scorer_weight);
    }
    for (const auto& f : cfg.score_files) {
        sources.push_back(load_score_file(f.path).scores);
        weights.push_back(f.weight);
    }
    if (sources.empty()) {
        throw stage_error("ranking", "no scorer model, training data or score files");
    }
    // Only stage-1 candidates are ranked; external scores for other passages are dropped.
    for (auto& src : sources) {
        for (auto it = src.begin(); it != src.end();) {
            auto s1 = stage1.find(it->first);
            if (s1 == stage1.end()) {
                it = src.erase(it);
                continue;
            }
            std::set<std::string> keep;
            for (const auto& c : s1->second) {
                keep.insert(c.passage_id);
            }
            std::erase_if(it->second, [&](const auto& kv) { return !keep.count(kv.first); });
            ++it;
        }
    }
    auto combined = sources.size() == 1 && weights[0] > 0.0 ? sources[0] : ensemble_scores(sources, weights);
    add_score_noise(combined, cfg.score_noise, cfg.seed);
    QueryRuns out;
    for (const auto& q : queries) {
        auto it = stage1.find(q.query_id);
        if (it == stage1.end()) {
            continue;
        }
        const auto& scores = combined[q.query_id];
        CandidateList list = it->second;
        for (auto& c : list) {
            auto s = scores.find(c.passage_id);
            c.ranking_score = s == scores.end() ? 0.0 : s->second;
        }
        std::sort(list.begin(), list.end(), [](const Candidate& a, const Candidate& b) {
            return score_then_id(*a.ranking_score, a.passage_id, *b.ranking_score, b.passage_id);
        });
        out[q.query_id] = std::move(list);
    }
    return out;
}

inline Run ranking_run(const std::vector<Query>& queries, const QueryRuns& stage2, const std::string& tag)
{
    Run run;
    for (const auto& q : queries) {
        auto it = stage2.find(q.query_id);
        if (it == stage2.end()) {
            continue;
        }
        for (std::size_t i = 0; i < it->second.size(); ++i) {
            const auto& c = it->second[i];
            run.push_back(RunEntry{q.query_id, c.passage_id, static_cast<int>(i + 1), c.ranking_score.value_or(c.retrieval_score), tag});
        }
    }
    return run;
}

inline QueryRuns hlatr_stage(const PipelineContext& ctx, const std::vector<Query>& queries, const QueryRuns& stage2, const HlatrModel& model)
{
    std::vector<CandidateList> out(queries.size());
    parallel_for(queries.size(), ctx.config.threads, [&](std::size_t i) {
        auto it = stage2.find(queries[i].query_id);
        if (it != stage2.end()) {
            out[i] = hlatr_rerank(model, queries[i].query_id, it->second);
        }
    });
    QueryRuns res;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (stage2.count(queries[i].query_id)) {
            res[queries[i].query_id] = std::move(out[i]);
        }
    }
    return res;
}

inline Run hlatr_run(const std::vector<Query>& queries, const QueryRuns& reranked, const std::string& tag)
{
    Run run;
    for (const auto& q : queries) {
        auto it = reranked.find(q.query_id);
        if (it == reranked.end()) {
            continue;
        }
        const auto scores = hlatr_output_scores(it->second);
        for (std::size_t i = 0; i < it->second.size(); ++i) {
            run.push_back(RunEntry{q.query_id, it->second[i].passage_id, static_cast<int>(i + 1), scores[i], tag});
        }
    }
    return run;
}

struct PipelineResult {
    /// Stage runs in execution order (stage name, run).
    std::vector<std::pair<std::string, Run>> stages;
    Run final_run;
    /// Document-level final run when documents were split into passages.
    std::optional<Run> final_doc_run;
    nlohmann::ordered_json metrics;
};

inline nlohmann::ordered_json metrics_json(const Run& run, const Qrels& qrels, const EvalOptions& opts)
{
    nlohmann::ordered_json j;
    for (const auto& m : evaluate(run, qrels, opts)) {
        j[m.name] = m.mean;
    }
    return j;
}

/// Runs every enabled stage in order, writes `<stage>.run` per stage plus
/// `final.run` (and `final.doc.run` for split documents), and `metrics.json`
/// when qrels are configured.
inline PipelineResult run_pipeline(const PipelineConfig& cfg)
{
    auto ctx = prepare_context(cfg);
    PipelineResult res;
    const auto& queries = ctx.queries;
    const bool separate_train = !cfg.train_queries.empty();

    const auto sources = retrieval_stage(ctx, queries);
    for (const auto& [name, runs] : sources) {
        res.stages.emplace_back(name, to_run(queries, runs, name));
    }
    const auto stage1 = fusion_stage(ctx, queries, sources);
    std::string last = cfg.fusion_enabled ? "fused" : passthrough_source(sources);
    if (cfg.fusion_enabled) {
        res.stages.emplace_back("fused", to_run(queries, stage1, "fused"));
    }

    // Stage-1 lists and features of the training queries, computed lazily.
    std::optional<QueryRuns> train1;
    std::vector<QueryFeatures> train_features;
    auto training_stage1 = [&] {
        if (!train1) {
            train1 = fusion_stage(ctx, ctx.train_queries, retrieval_stage(ctx, ctx.train_queries));
            train_features = compute_features(ctx, ctx.train_queries, *train1);
        }
    };

    std::optional<QueryRuns> stage2;
    std::optional<InteractionScorer> scorer;
    if (cfg.ranking_enabled) {
        const auto features = compute_features(ctx, queries, stage1);
        if (!cfg.scorer_model.empty()) {
            scorer = load_scorer(cfg.scorer_model);
        } else if (cfg.scorer_train) {
            if (separate_train) {
                training_stage1();
                scorer = train_scorer_from_runs(ctx, *train1, train_features);
            } else {
                scorer = train_scorer_from_runs(ctx, stage1, features);
            }
        }
        stage2 = ranking_stage(ctx, queries, stage1, scorer, features);
        res.stages.emplace_back("ranking", ranking_run(queries, *stage2, "ranking"));
        last = "ranking";
        if (scorer && cfg.scorer_model.empty()) {
            std::filesystem::create_directories(cfg.output_dir);
            save_scorer(*scorer, cfg.output_dir + "/scorer.txt");
        }
    }

    if (cfg.hlatr_enabled) {
        if (!stage2) {
            throw stage_error("hlatr", "needs the ranking stage to be enabled");
        }
        HlatrModel model;
        if (!cfg.hlatr_model.empty()) {
            model = load_hlatr(cfg.hlatr_model);
        } else if (cfg.hlatr_zero_init) {
            model = HlatrModel::zeros(cfg.hlatr);
        } else if (cfg.hlatr_train) {
            if (!ctx.train_qrels) {
                throw stage_error("hlatr", "training needs qrels");
            }
            std::vector<RankedList> lists;
            if (separate_train) {
                training_stage1();
                lists = make_training_lists(ranking_stage(ctx, ctx.train_queries, *train1, scorer, train_features), *ctx.train_qrels,
                                            cfg.hlatr.max_list_length, cfg.rel_threshold);
            } else {
                lists = make_training_lists(*stage2, *ctx.train_qrels, cfg.hlatr.max_list_length, cfg.rel_threshold);
            }
            if (lists.empty()) {
                throw stage_error("hlatr", "no training lists with a relevant candidate");
            }
            model = train_hlatr(lists, cfg.hlatr);
            std::filesystem::create_directories(cfg.output_dir);
            save_hlatr(model, cfg.output_dir + "/hlatr.model");
        } else {
            throw stage_error("hlatr", "no model path and training disabled");
        }
        res.stages.emplace_back("hlatr", hlatr_run(queries, hlatr_stage(ctx, queries, *stage2, model), "hlatr"));
        last = "hlatr";
    }

    for (const auto& [name, run] : res.stages) {
        if (name == last) {
            res.final_run = run;
        }
    }
    std::filesystem::create_directories(cfg.output_dir);
    for (const auto& [name, run] : res.stages) {
        write_run(run, cfg.output_dir + "/" + name + ".run");
    }
    write_run(res.final_run, cfg.output_dir + "/final.run");
    if (cfg.split) {
        res.final_doc_run = maxp_aggregate(res.final_run);
        write_run(*res.final_doc_run, cfg.output_dir + "/final.doc.run");
    }
    if (ctx.qrels) {
        for (const auto& [name, run] : res.stages) {
            res.metrics[name] = metrics_json(cfg.split ? maxp_aggregate(run) : run, *ctx.qrels, cfg.eval);
        }
        res.metrics["final"] = metrics_json(cfg.split ? *res.final_doc_run : res.final_run, *ctx.qrels, cfg.eval);
        std::ofstream(cfg.output_dir + "/metrics.json") << res.metrics.dump(2) << '\n';
    }
    return res;
}

// ---------------------------------------------------------------------------
// Candidate-set size sweep

struct SweepRow {
    std::size_t size;
    double ranking_ndcg;
    std::optional<double> hlatr_ndcg;
};

/// Ranks (and, when HLATR is enabled, re-ranks) only the top `size` fused
/// candidates per query and reports NDCG@k of each. The scorer and HLATR
/// model are trained once on the largest candidate set.
inline std::vector<SweepRow> sweep_candidate_size(PipelineConfig cfg, const std::vector<std::size_t>& sizes)
{
    if (sizes.empty()) {
        throw Error(ErrorKind::invalid_argument, "sweep: no sizes");
    }
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1 || (i > 0 && sizes[i] < sizes[i - 1])) {
            throw Error(ErrorKind::invalid_argument, "sweep: sizes must be ascending and >= 1");
        }
    }
    cfg.fusion_k = std::max(cfg.fusion_k, sizes.back());
    cfg.retrieval_k = std::max(cfg.retrieval_k, sizes.back());
    auto ctx = prepare_context(cfg);
    if (!ctx.qrels) {
        throw stage_error("sweep", "needs qrels");
    }
    const auto& queries = ctx.queries;
    const auto stage1 = fusion_stage(ctx, queries, retrieval_stage(ctx, queries));
    const auto features = compute_features(ctx, queries, stage1);
    std::optional<InteractionScorer> scorer;
    if (!cfg.scorer_model.empty()) {
        scorer = load_scorer(cfg.scorer_model);
    } else if (cfg.scorer_train) {
        scorer = train_scorer_from_runs(ctx, stage1, features);
    }
    std::optional<HlatrModel> model;
    if (cfg.hlatr_enabled) {
        if (!cfg.hlatr_model.empty()) {
            model = load_hlatr(cfg.hlatr_model);
        } else if (cfg.hlatr_zero_init) {
            model = HlatrModel::zeros(cfg.hlatr);
        } else {
            const auto full2 = ranking_stage(ctx, queries, stage1, scorer, features);
            model = train_hlatr(make_training_lists(full2, *ctx.qrels, cfg.hlatr.max_list_length, cfg.rel_threshold), cfg.hlatr);
        }
    }
    std::vector<SweepRow> rows;
    for (std::size_t size : sizes) {
        QueryRuns truncated;
        std::vector<QueryFeatures> feats;
        for (const auto& [q, list] : stage1) {
            truncated[q] = CandidateList(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(std::min(size, list.size())));
        }
        for (const auto& f : features) {
            QueryFeatures t = f;
            const std::size_t n = std::min(size, t.candidates.size());
            t.candidates.resize(n);
            t.features.resize(n);
            feats.push_back(std::move(t));
        }
        const auto stage2 = ranking_stage(ctx, queries, truncated, scorer, feats);
        SweepRow row{size, ndcg_at_k(ranking_run(queries, stage2, "ranking"), *ctx.qrels, cfg.eval.ndcg_k).mean, std::nullopt};
        if (model) {
            row.hlatr_ndcg = ndcg_at_k(hlatr_run(queries, hlatr_stage(ctx, queries, stage2, *model), "hlatr"), *ctx.qrels, cfg.eval.ndcg_k).mean;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace hybridrank
