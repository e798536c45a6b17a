// hybridrank command-line driver.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hybridrank/hybridrank.hpp"

namespace hr = hybridrank;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::string output_dir;
    bool quiet = false;
    bool verbose = false;
};

hr::PipelineConfig effective_config(const Globals& g)
{
    hr::PipelineConfig c = g.config.empty() ? hr::PipelineConfig{} : hr::load_pipeline_config(g.config);
    if (g.seed) {
        c.seed = *g.seed;
        c.scorer.seed = *g.seed;
        c.hlatr.seed = *g.seed;
    }
    if (g.threads) {
        c.threads = *g.threads;
    }
    if (!g.output_dir.empty()) {
        c.output_dir = g.output_dir;
    }
    return c;
}

/// `explicit_path` when given, otherwise `name` inside the output directory.
std::string out_path(const hr::PipelineConfig& c, const std::string& explicit_path, const std::string& name)
{
    if (!explicit_path.empty()) {
        if (auto parent = std::filesystem::path(explicit_path).parent_path(); !parent.empty()) {
            std::filesystem::create_directories(parent);
        }
        return explicit_path;
    }
    std::filesystem::create_directories(c.output_dir);
    return c.output_dir + "/" + name;
}

hr::Corpus load_corpus_for(const std::string& path, const std::string& format, bool split, const hr::SplitOptions& opts)
{
    const auto docs = hr::load_corpus(path, hr::parse_corpus_format(format));
    return split ? hr::Corpus::from_split(docs, opts) : hr::Corpus::from_native(docs);
}

std::unordered_map<std::string, hr::TermWeights> query_weight_map(const std::string& path)
{
    std::unordered_map<std::string, hr::TermWeights> out;
    if (!path.empty()) {
        for (auto& [id, w] : hr::load_term_weights(path)) {
            out[id] = std::move(w);
        }
    }
    return out;
}

/// Candidates of a ranking run, with retrieval ranks looked up in the
/// retrieval run and ranking scores from the score column.
hr::QueryRuns stage2_from_runs(const hr::Run& ranking, const hr::Run& retrieval)
{
    std::map<std::string, std::map<std::string, int>> rank_of;
    for (const auto& [q, docs] : hr::ranked_docs(retrieval)) {
        for (std::size_t i = 0; i < docs.size(); ++i) {
            rank_of[q].emplace(docs[i], static_cast<int>(i + 1));
        }
    }
    std::map<std::string, std::vector<const hr::RunEntry*>> grouped;
    for (const auto& e : ranking) {
        grouped[e.query_id].push_back(&e);
    }
    hr::QueryRuns out;
    for (auto& [q, entries] : grouped) {
        std::stable_sort(entries.begin(), entries.end(), [](const hr::RunEntry* a, const hr::RunEntry* b) { return a->rank < b->rank; });
        auto& list = out[q];
        for (const auto* e : entries) {
            auto qi = rank_of.find(q);
            if (qi == rank_of.end() || !qi->second.count(e->doc_id)) {
                throw hr::Error(hr::ErrorKind::unknown_id, "'" + e->doc_id + "' for query '" + q + "' is not in the retrieval run");
            }
            list.push_back(hr::Candidate{e->doc_id, 0.0, qi->second.at(e->doc_id), "ranking", e->score, std::nullopt});
        }
    }
    return out;
}

void print_json_error(const std::string& kind, const std::string& message)
{
    nlohmann::json j{{"error", message}, {"kind", kind}};
    std::cerr << j.dump() << std::endl;
}

std::vector<std::size_t> parse_sizes(const std::string& s)
{
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        const auto v = hr::parse_int(hr::trim(part));
        if (!v || *v < 1) {
            throw hr::Error(hr::ErrorKind::invalid_argument, "bad size '" + part + "' in --sizes");
        }
        out.push_back(static_cast<std::size_t>(*v));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"hybridrank: hybrid retrieval and multi-stage ranking"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config, "Pipeline config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--output-dir", g.output_dir, "Output directory");
    app.add_flag("--quiet", g.quiet, "Only print errors");
    app.add_flag("--verbose", g.verbose, "Print progress");

    // Shared corpus options.
    struct CorpusOpts {
        std::string path;
        std::string format = "auto";
        bool split = false;
        hr::SplitOptions split_opts;
    };
    auto add_corpus = [](CLI::App* sub, CorpusOpts& o, bool required) {
        auto* opt = sub->add_option("--corpus", o.path, "Corpus (JSONL or TSV)");
        if (required) {
            opt->required();
        }
        sub->add_option("--format", o.format, "auto, jsonl or tsv");
        sub->add_flag("--split", o.split, "Split documents into passages");
        sub->add_option("--window", o.split_opts.window, "Passage window (tokens)");
        sub->add_option("--stride", o.split_opts.stride, "Passage stride (tokens)");
    };

    // index-sparse
    CorpusOpts is_corpus;
    std::string is_exp, is_out;
    auto* index_sparse = app.add_subcommand("index-sparse", "Build a BM25 inverted index");
    add_corpus(index_sparse, is_corpus, true);
    index_sparse->add_option("--expansions", is_exp, "Expansion text per passage (TSV id<TAB>text)");
    index_sparse->add_option("--out", is_out, "Index path");

    // index-impact
    CorpusOpts ii_corpus;
    std::string ii_weights, ii_out;
    auto* index_impact = app.add_subcommand("index-impact", "Build an impact index");
    add_corpus(index_impact, ii_corpus, true);
    index_impact->add_option("--weights", ii_weights, "Per-passage term weights (JSONL); analytic weights otherwise");
    index_impact->add_option("--out", ii_out, "Index path");

    // index-dense
    CorpusOpts id_corpus;
    std::string id_vectors, id_out;
    auto* index_dense = app.add_subcommand("index-dense", "Build a dense vector store");
    add_corpus(index_dense, id_corpus, true);
    index_dense->add_option("--vectors", id_vectors, "Import precomputed vectors instead of hash-embedding");
    index_dense->add_option("--out", id_out, "Vector store path");

    // retrieve
    std::string rt_method, rt_index, rt_queries, rt_qw, rt_qv, rt_out;
    std::optional<std::size_t> rt_k;
    auto* retrieve = app.add_subcommand("retrieve", "Top-k retrieval from one index");
    retrieve->add_option("--method", rt_method, "bm25, impact or dense")->required()->check(CLI::IsMember({"bm25", "impact", "dense"}));
    retrieve->add_option("--index", rt_index, "Index or vector store")->required();
    retrieve->add_option("--queries", rt_queries, "Queries (TSV)")->required();
    retrieve->add_option("-k,--k", rt_k, "Depth");
    retrieve->add_option("--query-weights", rt_qw, "Query term weights (JSONL), impact only");
    retrieve->add_option("--query-vectors", rt_qv, "Query vectors, dense only");
    retrieve->add_option("--out", rt_out, "Run path");

    // fuse
    std::vector<std::string> fu_runs;
    std::vector<double> fu_weights;
    std::vector<std::string> fu_norms;
    std::optional<std::size_t> fu_k;
    std::string fu_out;
    auto* fuse = app.add_subcommand("fuse", "Weighted fusion of normalized runs");
    fuse->add_option("--run", fu_runs, "Input run (repeatable)")->required();
    fuse->add_option("--weight", fu_weights, "Weight per run (repeatable; default uniform)");
    fuse->add_option("--normalization", fu_norms, "minmax, zscore or none; one for all or one per run");
    fuse->add_option("-k,--k", fu_k, "Depth");
    fuse->add_option("--out", fu_out, "Run path");

    // features
    CorpusOpts fe_corpus;
    std::string fe_run, fe_queries, fe_sparse, fe_impact, fe_dense, fe_qw, fe_qv, fe_out;
    auto* features = app.add_subcommand("features", "Per-candidate features for the ranking stage");
    add_corpus(features, fe_corpus, false);
    features->add_option("--run", fe_run, "Stage-1 run")->required();
    features->add_option("--queries", fe_queries, "Queries (TSV)")->required();
    features->add_option("--sparse-index", fe_sparse, "BM25 index");
    features->add_option("--impact-index", fe_impact, "Impact index");
    features->add_option("--vectors", fe_dense, "Vector store");
    features->add_option("--query-weights", fe_qw, "Query term weights (JSONL)");
    features->add_option("--query-vectors", fe_qv, "Query vectors");
    features->add_option("--out", fe_out, "Feature file path");

    // train-scorer
    std::string ts_features, ts_qrels, ts_out;
    auto* train_scorer = app.add_subcommand("train-scorer", "Train the interaction scorer with R-Drop");
    train_scorer->add_option("--features", ts_features, "Feature file")->required();
    train_scorer->add_option("--qrels", ts_qrels, "Qrels")->required();
    train_scorer->add_option("--out", ts_out, "Model path");

    // rescore
    std::string rs_features, rs_model, rs_out;
    std::vector<std::string> rs_scores;
    std::vector<double> rs_score_weights;
    auto* rescore = app.add_subcommand("rescore", "Ranking-stage scores from a scorer and/or score files");
    rescore->add_option("--features", rs_features, "Feature file (defines the candidates)")->required();
    rescore->add_option("--model", rs_model, "Scorer model");
    rescore->add_option("--scores", rs_scores, "External score file (repeatable)");
    rescore->add_option("--score-weight", rs_score_weights, "Weight per score file");
    rescore->add_option("--out", rs_out, "Run path");

    // train-hlatr
    std::string th_ranking, th_retrieval, th_qrels, th_out, th_lists;
    auto* train_hlatr = app.add_subcommand("train-hlatr", "Train the list-aware re-ranker");
    train_hlatr->add_option("--ranking", th_ranking, "Ranking-stage run")->required();
    train_hlatr->add_option("--retrieval", th_retrieval, "Retrieval-stage run")->required();
    train_hlatr->add_option("--qrels", th_qrels, "Qrels")->required();
    train_hlatr->add_option("--save-lists", th_lists, "Also write the training lists (JSONL)");
    train_hlatr->add_option("--out", th_out, "Model path");

    // hlatr-rerank
    std::string hr_model, hr_ranking, hr_retrieval, hr_out;
    bool hr_zero = false;
    auto* hlatr_rerank = app.add_subcommand("hlatr-rerank", "Re-rank ranking-stage lists");
    hlatr_rerank->add_option("--model", hr_model, "Model path");
    hlatr_rerank->add_flag("--zero-model", hr_zero, "Use an all-zero model of the configured shape");
    hlatr_rerank->add_option("--ranking", hr_ranking, "Ranking-stage run")->required();
    hlatr_rerank->add_option("--retrieval", hr_retrieval, "Retrieval-stage run")->required();
    hlatr_rerank->add_option("--out", hr_out, "Run path");

    // aggregate-maxp
    std::string mp_run, mp_out;
    auto* maxp = app.add_subcommand("aggregate-maxp", "Passage run to document run (max score)");
    maxp->add_option("--run", mp_run, "Passage run")->required();
    maxp->add_option("--out", mp_out, "Run path");

    // eval
    std::string ev_run, ev_qrels;
    bool ev_per_query = false;
    std::optional<std::size_t> ev_ndcg_k, ev_recall_k, ev_mrr_k;
    std::optional<int> ev_thr;
    auto* eval = app.add_subcommand("eval", "NDCG@k, AP, R@k, MRR@k");
    eval->add_option("--run", ev_run, "Run")->required();
    eval->add_option("--qrels", ev_qrels, "Qrels")->required();
    eval->add_flag("--per-query", ev_per_query, "Per-query TSV instead of JSON means");
    eval->add_option("--ndcg-k", ev_ndcg_k, "NDCG cutoff");
    eval->add_option("--recall-k", ev_recall_k, "Recall cutoff");
    eval->add_option("--mrr-k", ev_mrr_k, "MRR cutoff");
    eval->add_option("--rel-threshold", ev_thr, "Binary relevance threshold");

    // pipeline
    auto* pipeline = app.add_subcommand("pipeline", "Run every enabled stage from --config");

    // synth
    hr::SyntheticConfig sy;
    std::string sy_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus, queries and qrels");
    synth->add_option("--n-docs", sy.n_docs, "Passages");
    synth->add_option("--n-queries", sy.n_queries, "Queries");
    synth->add_option("--vocab", sy.vocab, "Filler vocabulary size");
    synth->add_option("--lexical-fraction", sy.lexical_fraction, "Share of relevant passages matching query terms");
    synth->add_option("--relevant-per-query", sy.relevant_per_query, "Relevant passages per query");
    synth->add_option("--doc-length", sy.doc_length, "Filler tokens per passage");
    synth->add_option("--query-length", sy.query_length, "Terms per query");
    synth->add_option("--out", sy_out, "Output directory");

    // sweep
    std::string sw_sizes = "10,50,100";
    std::string sw_out;
    auto* sweep = app.add_subcommand("sweep", "NDCG@10 by ranking candidate-set size");
    sweep->add_option("--sizes", sw_sizes, "Comma-separated ascending sizes");
    sweep->add_option("--out", sw_out, "Table path (TSV)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_json_error("usage", e.what());
        return 2;
    }

    hr::set_log_level(g.quiet ? hr::LogLevel::quiet : g.verbose ? hr::LogLevel::info : hr::LogLevel::warn);

    try {
        auto cfg = effective_config(g);

        if (index_sparse->parsed()) {
            const auto corpus = load_corpus_for(is_corpus.path, is_corpus.format, is_corpus.split, is_corpus.split_opts);
            const auto idx = hr::build_inverted_index(corpus, is_exp.empty() ? hr::Expansions{} : hr::load_expansions(is_exp), cfg.threads);
            idx.save(out_path(cfg, is_out, "sparse.idx"));
        } else if (index_impact->parsed()) {
            const auto corpus = load_corpus_for(ii_corpus.path, ii_corpus.format, ii_corpus.split, ii_corpus.split_opts);
            const auto table = ii_weights.empty() ? hr::default_term_weights(corpus) : hr::align_weights(corpus, hr::load_term_weights(ii_weights));
            hr::build_impact_index(table).save(out_path(cfg, ii_out, "impact.idx"));
        } else if (index_dense->parsed()) {
            const auto corpus = load_corpus_for(id_corpus.path, id_corpus.format, id_corpus.split, id_corpus.split_opts);
            const auto store = id_vectors.empty() ? hr::build_vector_store(corpus, cfg.embedder, cfg.threads) : hr::load_vectors(id_vectors, corpus);
            store.save(out_path(cfg, id_out, "dense.vec"));
        } else if (retrieve->parsed()) {
            const auto queries = hr::load_queries(rt_queries);
            const std::size_t k = rt_k.value_or(cfg.retrieval_k);
            hr::PipelineContext ctx;
            ctx.config = cfg;
            if (rt_method == "bm25") {
                ctx.sparse = hr::InvertedIndex::load(rt_index);
            } else if (rt_method == "impact") {
                ctx.impact = hr::ImpactIndex::load(rt_index);
                ctx.query_weights = query_weight_map(rt_qw);
            } else {
                ctx.dense = hr::load_vectors(rt_index);
                if (!rt_qv.empty()) {
                    ctx.query_vectors = hr::load_vectors(rt_qv);
                } else {
                    ctx.config.embedder.dim = ctx.dense->dim();
                }
            }
            const auto runs = hr::retrieve_all(ctx, queries, rt_method, k);
            hr::write_run(hr::to_run(queries, runs, rt_method), out_path(cfg, rt_out, rt_method + ".run"));
        } else if (fuse->parsed()) {
            const std::size_t n = fu_runs.size();
            if (!fu_weights.empty() && fu_weights.size() != n) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "need one --weight per --run");
            }
            if (fu_norms.size() > 1 && fu_norms.size() != n) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "need one --normalization, or one per --run");
            }
            std::vector<hr::FusionSource> sources;
            std::vector<hr::QueryRuns> inputs;
            std::set<std::string> qids;
            for (std::size_t i = 0; i < n; ++i) {
                hr::FusionSource s;
                s.source = fu_runs[i];
                s.weight = fu_weights.empty() ? 1.0 / static_cast<double>(n) : fu_weights[i];
                s.normalization = fu_norms.empty() ? hr::Normalization::minmax : hr::parse_normalization(fu_norms.size() == 1 ? fu_norms[0] : fu_norms[i]);
                sources.push_back(s);
                inputs.push_back(hr::from_run(hr::read_run(fu_runs[i]), "run" + std::to_string(i)));
                for (const auto& [q, _] : inputs.back()) {
                    qids.insert(q);
                }
            }
            hr::Run out;
            for (const auto& q : qids) {
                std::vector<hr::CandidateList> lists;
                for (const auto& in : inputs) {
                    auto it = in.find(q);
                    lists.push_back(it == in.end() ? hr::CandidateList{} : it->second);
                }
                hr::append_run(out, q, hr::normalize_and_fuse(lists, sources, fu_k.value_or(cfg.fusion_k)), "fused");
            }
            hr::write_run(out, out_path(cfg, fu_out, "fused.run"));
        } else if (features->parsed()) {
            const auto queries = hr::load_queries(fe_queries);
            hr::PipelineContext ctx;
            ctx.config = cfg;
            if (!fe_corpus.path.empty()) {
                ctx.corpus = load_corpus_for(fe_corpus.path, fe_corpus.format, fe_corpus.split, fe_corpus.split_opts);
            }
            if (!fe_sparse.empty()) {
                ctx.sparse = hr::InvertedIndex::load(fe_sparse);
            }
            if (!fe_impact.empty()) {
                ctx.impact = hr::ImpactIndex::load(fe_impact);
                ctx.query_weights = query_weight_map(fe_qw);
            }
            if (!fe_dense.empty()) {
                ctx.dense = hr::load_vectors(fe_dense);
                if (!fe_qv.empty()) {
                    ctx.query_vectors = hr::load_vectors(fe_qv);
                } else {
                    ctx.config.embedder.dim = ctx.dense->dim();
                }
            }
            const auto stage1 = hr::from_run(hr::read_run(fe_run), "stage1");
            hr::save_features(hr::compute_features(ctx, queries, stage1), out_path(cfg, fe_out, "features.tsv"));
        } else if (train_scorer->parsed()) {
            const auto rows = hr::load_features(ts_features);
            std::map<std::string, hr::CandidateList> runs;
            for (const auto& r : rows) {
                runs[r.query_id] = r.candidates;
            }
            auto sampled = hr::sample_negatives(runs, hr::load_qrels(ts_qrels), cfg.n_neg, cfg.seed, cfg.rel_threshold);
            if (sampled.examples.empty()) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "no training examples (no query has a relevant and a non-relevant candidate)");
            }
            hr::log_info("train-scorer: " + std::to_string(sampled.examples.size()) + " examples, " + std::to_string(sampled.skipped_queries) +
                         " queries skipped");
            hr::attach_features(sampled.examples, rows);
            hr::save_scorer(hr::train_interaction_scorer(sampled.examples, cfg.scorer), out_path(cfg, ts_out, "scorer.txt"));
        } else if (rescore->parsed()) {
            const auto rows = hr::load_features(rs_features);
            if (!rs_score_weights.empty() && rs_score_weights.size() != rs_scores.size()) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "need one --score-weight per --scores");
            }
            hr::PipelineContext ctx;
            ctx.config = cfg;
            ctx.config.score_files.clear();
            for (std::size_t i = 0; i < rs_scores.size(); ++i) {
                ctx.config.score_files.push_back({rs_scores[i], rs_score_weights.empty() ? 1.0 : rs_score_weights[i]});
            }
            std::optional<hr::InteractionScorer> scorer;
            if (!rs_model.empty()) {
                scorer = hr::load_scorer(rs_model);
            }
            hr::QueryRuns stage1;
            std::vector<hr::Query> queries;
            for (const auto& r : rows) {
                stage1[r.query_id] = r.candidates;
                queries.push_back(hr::Query{r.query_id, ""});
            }
            const auto stage2 = hr::ranking_stage(ctx, queries, stage1, scorer, rows);
            hr::write_run(hr::ranking_run(queries, stage2, "ranking"), out_path(cfg, rs_out, "ranking.run"));
        } else if (train_hlatr->parsed()) {
            const auto stage2 = stage2_from_runs(hr::read_run(th_ranking), hr::read_run(th_retrieval));
            const auto lists = hr::make_training_lists(stage2, hr::load_qrels(th_qrels), cfg.hlatr.max_list_length, cfg.rel_threshold);
            if (lists.empty()) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "no training lists with a relevant candidate");
            }
            if (!th_lists.empty()) {
                hr::save_ranked_lists(lists, th_lists);
            }
            hr::save_hlatr(hr::train_hlatr(lists, cfg.hlatr), out_path(cfg, th_out, "hlatr.model"));
        } else if (hlatr_rerank->parsed()) {
            if (hr_model.empty() == !hr_zero) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "give exactly one of --model and --zero-model");
            }
            const auto model = hr_zero ? hr::HlatrModel::zeros(cfg.hlatr) : hr::load_hlatr(hr_model);
            const auto stage2 = stage2_from_runs(hr::read_run(hr_ranking), hr::read_run(hr_retrieval));
            std::vector<hr::Query> queries;
            for (const auto& [q, _] : stage2) {
                queries.push_back(hr::Query{q, ""});
            }
            hr::PipelineContext ctx;
            ctx.config = cfg;
            hr::write_run(hr::hlatr_run(queries, hr::hlatr_stage(ctx, queries, stage2, model), "hlatr"), out_path(cfg, hr_out, "hlatr.run"));
        } else if (maxp->parsed()) {
            hr::write_run(hr::maxp_aggregate(hr::read_run(mp_run)), out_path(cfg, mp_out, "maxp.run"));
        } else if (eval->parsed()) {
            hr::EvalOptions opts = cfg.eval;
            opts.ndcg_k = ev_ndcg_k.value_or(opts.ndcg_k);
            opts.recall_k = ev_recall_k.value_or(opts.recall_k);
            opts.mrr_k = ev_mrr_k.value_or(opts.mrr_k);
            opts.rel_threshold = ev_thr.value_or(opts.rel_threshold);
            const auto results = hr::evaluate(hr::read_run(ev_run), hr::load_qrels(ev_qrels), opts);
            if (ev_per_query) {
                std::cout << hr::format_per_query(results);
            } else {
                nlohmann::ordered_json j;
                for (const auto& m : results) {
                    j[m.name] = m.mean;
                }
                j["queries"] = results.front().per_query.size();
                j["skipped"] = results.front().skipped;
                std::cout << j.dump() << '\n';
            }
        } else if (pipeline->parsed()) {
            if (g.config.empty()) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "pipeline needs --config");
            }
            const auto res = hr::run_pipeline(cfg);
            if (!res.metrics.empty()) {
                std::cout << res.metrics["final"].dump() << '\n';
            }
        } else if (synth->parsed()) {
            sy.seed = cfg.seed;
            sy.embed_dim = cfg.embedder.dim;
            sy.embed_seed = cfg.embedder.seed;
            const std::string dir = sy_out.empty() ? cfg.output_dir : sy_out;
            std::filesystem::create_directories(dir);
            hr::save_synthetic(hr::generate_synthetic(sy), dir);
        } else if (sweep->parsed()) {
            if (g.config.empty()) {
                throw hr::Error(hr::ErrorKind::invalid_argument, "sweep needs --config");
            }
            const auto rows = hr::sweep_candidate_size(cfg, parse_sizes(sw_sizes));
            std::ostringstream table;
            table << "size\tranking_ndcg@" << cfg.eval.ndcg_k;
            if (rows.front().hlatr_ndcg) {
                table << "\thlatr_ndcg@" << cfg.eval.ndcg_k;
            }
            table << '\n';
            bool non_increasing = true;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                table << rows[i].size << '\t' << hr::format_real(rows[i].ranking_ndcg, 6);
                if (rows[i].hlatr_ndcg) {
                    table << '\t' << hr::format_real(*rows[i].hlatr_ndcg, 6);
                }
                table << '\n';
                if (i > 0 && rows[i].ranking_ndcg > rows[i - 1].ranking_ndcg) {
                    non_increasing = false;
                }
            }
            table << "# ranking ndcg non-increasing in size: " << (non_increasing ? "yes" : "no") << '\n';
            std::cout << table.str();
            std::ofstream(out_path(cfg, sw_out, "sweep.tsv")) << table.str();
        }
    } catch (const hr::Error& e) {
        print_json_error(hr::to_string(e.kind()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_json_error("internal", e.what());
        return 1;
    }
    return 0;
}
