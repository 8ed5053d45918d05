#pragma once

// Command-line front end. run_cli() is the whole program minus main(), so
// the test suite can drive it in-process.
//
// Exit codes: 0 success, 1 usage error, 2 data or compute error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pfe/pfe.hpp"

namespace pfe::cli {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every flag the subcommands understand; each subcommand binds a subset.
struct RunSpec {
    std::string command;
    std::string data;
    std::string format = "text";
    std::string out;
    std::string out_dir;
    std::string index;
    std::string model;

    // gen-data
    std::size_t n = 0;
    std::size_t d = 0;
    double scale = 1.0;

    // build-index
    std::size_t branching = 32;
    std::size_t leaf_size = 64;
    int iterations = 25;

    // estimators
    std::string method;
    std::vector<std::string> methods;
    std::size_t k = 0;
    std::size_t l = 0;
    std::vector<std::size_t> ks;
    std::vector<std::size_t> ls;
    std::size_t features = 10000;
    std::vector<std::size_t> feature_list;
    double p = 2.0;
    double mince_tol = 1e-10;
    int mince_max_iter = 100;
    bool truth = false;

    // queries
    std::optional<std::size_t> query_index;
    std::vector<std::size_t> query_indices;
    std::vector<std::string> labels;
    double noise = 0.0;
    std::vector<double> noise_levels;
    std::size_t n_queries = 100;
    std::optional<std::uint64_t> query_seed;

    std::vector<std::string> ret_err;
    std::optional<std::uint64_t> seed;
    std::vector<std::uint64_t> seeds;
    std::optional<std::size_t> budget;
    double budget_fraction = 0.05;
    std::vector<std::size_t> coverage_at;
    unsigned threads = default_thread_count();
};

inline RetrievalErrorSpec parse_ret_err(const std::string& token) {
    if (token == "none" || token == "None" || token.empty()) return {};
    std::vector<std::size_t> ranks;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) throw UsageError("bad retrieval-error spec '" + token + "'");
        std::size_t r = 0;
        if (!detail::parse_number(cur, r) || r == 0)
            throw UsageError("retrieval-error ranks are positive integers, got '" + token + "'");
        ranks.push_back(r);
        cur.clear();
    };
    for (char c : token) {
        if (c == ',' || c == '+')
            flush();
        else
            cur.push_back(c);
    }
    flush();
    return RetrievalErrorSpec(std::move(ranks));
}

inline bool is_randomized(Method m) {
    return m == Method::Uniform || m == Method::MIMPS || m == Method::MINCE || m == Method::FMBE;
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
}

inline nlohmann::ordered_json echo_json(const RunSpec& s) {
    nlohmann::ordered_json j;
    j["command"] = s.command;
    auto opt = [](const auto& o) -> nlohmann::ordered_json {
        if (o) return *o;
        return nullptr;
    };
    if (s.command == "gen-data") {
        j["n"] = s.n;
        j["d"] = s.d;
        j["scale"] = s.scale;
        j["seed"] = opt(s.seed);
        j["format"] = s.format;
        j["out"] = s.out;
        return j;
    }
    j["data"] = s.data;
    j["format"] = s.format;
    if (s.command == "build-index") {
        j["branching"] = s.branching;
        j["leaf_size"] = s.leaf_size;
        j["iterations"] = s.iterations;
        j["seed"] = opt(s.seed);
        j["out"] = s.out;
    } else if (s.command == "build-featuremap") {
        j["features"] = s.features;
        j["p"] = s.p;
        j["seed"] = opt(s.seed);
        j["out"] = s.out;
    } else if (s.command == "estimate") {
        j["method"] = s.method;
        j["k"] = s.k;
        j["l"] = s.l;
        j["features"] = s.features;
        j["p"] = s.p;
        j["model"] = s.model;
        j["query_index"] = opt(s.query_index);
        j["noise"] = s.noise;
        j["seed"] = opt(s.seed);
        j["index"] = s.index;
        j["budget"] = opt(s.budget);
        j["budget_fraction"] = s.budget_fraction;
        j["mince_tol"] = s.mince_tol;
        j["mince_max_iter"] = s.mince_max_iter;
        j["truth"] = s.truth;
    } else if (s.command == "sweep") {
        j["methods"] = s.methods;
        j["k"] = s.ks;
        j["l"] = s.ls;
        j["features"] = s.feature_list;
        j["p"] = s.p;
        j["noise"] = s.noise_levels;
        j["ret_err"] = s.ret_err;
        j["seeds"] = s.seeds;
        j["n_queries"] = s.n_queries;
        j["query_seed"] = opt(s.query_seed);
        j["mince_tol"] = s.mince_tol;
        j["mince_max_iter"] = s.mince_max_iter;
        j["threads"] = s.threads;
        j["out"] = s.out;
    } else if (s.command == "cdf") {
        j["labels"] = s.labels;
        j["query_indices"] = s.query_indices;
        j["noise"] = s.noise;
        j["seed"] = opt(s.seed);
        j["coverage_at"] = s.coverage_at;
        j["out_dir"] = s.out_dir;
    } else if (s.command == "end-to-end") {
        j["index"] = s.index;
        j["k"] = s.ks;
        j["l"] = s.ls;
        j["seeds"] = s.seeds;
        j["n_queries"] = s.n_queries;
        j["query_seed"] = opt(s.query_seed);
        j["noise"] = s.noise;
        j["budget"] = opt(s.budget);
        j["budget_fraction"] = s.budget_fraction;
        j["threads"] = s.threads;
        j["out"] = s.out;
    }
    return j;
}

// Checks that need no data files.
inline void validate(RunSpec& s) {
    require(s.format == "text" || s.format == "binary", "--format must be text or binary");
    if (s.command == "gen-data") {
        require(s.n >= 1 && s.d >= 1, "--n and --d must be >= 1");
        require(s.scale >= 0.0 && std::isfinite(s.scale), "--scale must be finite and >= 0");
        require(s.seed.has_value(), "--seed is required");
        return;
    }
    if (s.command == "build-index") {
        require(s.branching >= 2, "--branching must be >= 2");
        require(s.leaf_size >= 1, "--leaf-size must be >= 1");
        require(s.iterations >= 1, "--iterations must be >= 1");
        require(s.seed.has_value(), "--seed is required");
        return;
    }
    if (s.command == "build-featuremap") {
        require(s.features >= 1, "--features must be >= 1");
        require(s.p >= 2.0, "--p must be >= 2");
        require(s.seed.has_value(), "--seed is required");
        return;
    }
    require(s.noise >= 0.0 && std::isfinite(s.noise), "--noise must be >= 0");
    require(s.mince_tol > 0.0, "--mince-tol must be positive");
    require(s.mince_max_iter >= 1, "--mince-max-iter must be >= 1");
    require(s.budget_fraction > 0.0 && s.budget_fraction <= 1.0, "--budget-fraction must be in (0, 1]");
    if (s.budget) require(*s.budget >= 1, "--budget must be >= 1");
    require(s.threads >= 1, "--threads must be >= 1");

    if (s.command == "estimate") {
        Method m{};
        try {
            m = parse_method(s.method);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        require(s.query_index.has_value(), "--query-index is required");
        const bool loaded_map = m == Method::FMBE && !s.model.empty();
        require(!((is_randomized(m) && !loaded_map) || s.noise > 0.0) || s.seed.has_value(),
                "--seed is required for randomized estimators and noisy queries");
        if (m == Method::Uniform) require(s.k == 0 && s.l >= 1, "uniform needs --k 0 and --l >= 1");
        if (m == Method::MIMPS) require(s.k >= 1, "mimps needs --k >= 1 (use uniform for k = 0)");
        if (m == Method::MINCE) require(s.k >= 1 && s.l >= 1, "mince needs --k >= 1 and --l >= 1");
        if (m == Method::NMIMPS) require(s.k >= 1, "nmimps needs --k >= 1");
        if (m == Method::FMBE) require(s.features >= 1 && s.p >= 2.0, "fmbe needs --features >= 1 and --p >= 2");
        return;
    }
    if (s.command == "sweep") {
        require(!s.methods.empty(), "--method is required");
        require(!s.seeds.empty(), "--seeds is required");
        require(s.query_seed.has_value(), "--query-seed is required");
        require(s.n_queries >= 1, "--n-queries must be >= 1");
        if (s.noise_levels.empty()) s.noise_levels = {0.0};
        for (double x : s.noise_levels) require(x >= 0.0 && std::isfinite(x), "noise levels must be >= 0");
        if (s.ret_err.empty()) s.ret_err = {"none"};
        for (const auto& t : s.ret_err) parse_ret_err(t);
        for (const auto& name : s.methods) {
            Method m{};
            try {
                m = parse_method(name);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            if (m == Method::MIMPS || m == Method::MINCE || m == Method::NMIMPS)
                require(!s.ks.empty(), "--k is required for " + name);
            if (m == Method::MIMPS || m == Method::MINCE || m == Method::Uniform)
                require(!s.ls.empty(), "--l is required for " + name);
            if (m == Method::FMBE) require(!s.feature_list.empty(), "--features is required for fmbe");
        }
        require(s.p >= 2.0, "--p must be >= 2");
        require(!s.out.empty(), "--out is required");
        return;
    }
    if (s.command == "cdf") {
        require(!s.labels.empty() || !s.query_indices.empty(), "give --labels or --query-index");
        require(!s.out_dir.empty(), "--out-dir is required");
        require(s.noise == 0.0 || s.seed.has_value(), "--seed is required with --noise");
        if (s.coverage_at.empty()) s.coverage_at = {1, 10, 100, 1000};
        return;
    }
    if (s.command == "end-to-end") {
        require(!s.index.empty(), "--index is required");
        require(!s.ks.empty() && !s.ls.empty(), "--k and --l are required");
        for (auto k : s.ks) require(k >= 1, "--k values must be >= 1");
        for (auto l : s.ls) require(l >= 1, "--l values must be >= 1");
        require(!s.seeds.empty(), "--seeds is required");
        require(s.query_seed.has_value(), "--query-seed is required");
        require(s.n_queries >= 1, "--n-queries must be >= 1");
        require(!s.out.empty(), "--out is required");
        return;
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

inline SearchBudget resolve_budget(const RunSpec& s, std::size_t n) {
    if (s.budget) return {*s.budget};
    const auto b = static_cast<std::size_t>(std::ceil(s.budget_fraction * static_cast<double>(n)));
    return {std::max<std::size_t>(1, b)};
}

inline QuerySet sample_queries(const RunSpec& s, const EmbeddingMatrix& v) {
    require(s.n_queries <= v.size(), "--n-queries exceeds N");
    const auto idx = sample_query_indices(v.size(), s.n_queries, *s.query_seed);
    return perturb_queries(v, idx, s.noise, *s.query_seed);
}

inline int execute(const RunSpec& s, std::ostream& out) {
    const auto fmt = parse_vector_format(s.format);
    if (s.command == "gen-data") {
        const auto v = synthesize_gaussian(s.n, s.d, s.scale, *s.seed);
        save_embeddings(v, s.out, fmt);
        out << "wrote " << v.size() << "x" << v.dim() << " to " << s.out << "\n";
        return 0;
    }

    const auto v = load_embeddings(s.data, fmt);
    const std::size_t n = v.size();

    if (s.command == "build-index") {
        IndexParams params{s.branching, s.leaf_size, *s.seed, s.iterations};
        const auto idx = build_index(v, params);
        save_index(idx, s.out);
        out << "phi=" << format_double(idx.phi()) << " nodes=" << idx.nodes().size()
            << " leaves=" << idx.leaves().size() << "\n";
        return 0;
    }
    if (s.command == "build-featuremap") {
        const auto model = precompute_lambda_tilde(build_feature_map(v.dim(), s.features, s.p, *s.seed), v);
        save_feature_map(model, s.out);
        out << "features=" << model.features() << " lambda_finite=" << (model.lambda_finite() ? 1 : 0) << "\n";
        return 0;
    }
    if (s.command == "estimate") {
        const Method m = parse_method(s.method);
        require(*s.query_index < n, "--query-index out of range");
        const std::size_t qi = *s.query_index;
        const std::uint64_t seed = s.seed.value_or(0);
        const QuerySet qs = perturb_queries(v, std::span<const std::size_t>(&qi, 1), s.noise, seed);
        const auto q = qs.query(0);

        EstimatorConfig cfg{s.k, s.l, seed, s.mince_tol, s.mince_max_iter};
        if (m != Method::Exact && m != Method::FMBE) cfg.validate(n);

        Estimate est;
        if (m == Method::Exact) {
            est = exact_z(v, q);
        } else if (m == Method::FMBE) {
            FeatureMapModel model = s.model.empty()
                                        ? precompute_lambda_tilde(build_feature_map(v.dim(), s.features, s.p, seed), v)
                                        : load_feature_map(s.model);
            est = estimate_fmbe(model, q);
        } else {
            TopKResult head;
            if (s.k > 0) {
                if (s.index.empty()) {
                    head = exact_top_k(v, q, s.k);
                } else {
                    const auto idx = load_index(s.index, v);
                    head = approx_top_k(idx, q, s.k, resolve_budget(s, n));
                }
            }
            TailSample tail;
            if (m != Method::NMIMPS) tail = sample_tail(v, head.indices, s.l, derive_seed(seed, qi), q);
            if (m == Method::NMIMPS) est = estimate_nmimps(head);
            if (m == Method::Uniform || m == Method::MIMPS) est = estimate_mimps(head, tail, n);
            if (m == Method::MINCE) est = estimate_mince(head, tail, n, cfg);
        }
        out << "method=" << to_string(est.method) << "\n";
        out << "log_z_hat=" << format_double(est.log_z) << "\n";
        out << "z_hat=" << format_double(est.z_hat) << "\n";
        if (est.method == Method::MINCE)
            out << "iterations=" << est.diagnostics.iterations
                << " converged=" << (est.diagnostics.converged ? 1 : 0) << "\n";
        if (est.diagnostics.clamped) out << "clamped=1\n";
        if (s.truth) {
            const auto z = exact_z(v, q);
            out << "log_z=" << format_double(z.log_z) << "\n";
            out << "z=" << format_double(z.z_hat) << "\n";
            out << "mu=" << format_fixed(relative_error_log(est.log_z, z.log_z)) << "\n";
        }
        return 0;
    }
    if (s.command == "sweep") {
        std::vector<RetrievalErrorSpec> specs;
        for (const auto& t : s.ret_err) specs.push_back(parse_ret_err(t));
        std::vector<Setting> grid;
        for (const auto& name : s.methods) {
            const Method m = parse_method(name);
            switch (m) {
                case Method::Exact: grid.push_back({m}); break;
                case Method::Uniform:
                    for (auto l : s.ls) grid.push_back({m, 0, l});
                    break;
                case Method::NMIMPS:
                    for (auto k : s.ks)
                        for (const auto& spec : specs) grid.push_back({m, k, 0, 0, 2.0, spec});
                    break;
                case Method::MIMPS:
                case Method::MINCE:
                    for (auto k : s.ks)
                        for (auto l : s.ls)
                            for (const auto& spec : specs) grid.push_back({m, k, l, 0, 2.0, spec});
                    break;
                case Method::FMBE:
                    for (auto P : s.feature_list) grid.push_back({m, 0, 0, P, s.p});
                    break;
            }
        }
        for (const auto& st : grid) {
            try {
                st.validate(n);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        require(s.n_queries <= n, "--n-queries exceeds N");
        const auto sources = sample_query_indices(n, s.n_queries, *s.query_seed);
        SweepOptions opts{s.threads, s.mince_tol, s.mince_max_iter, s.data};
        const auto rep = run_noise_study(v, sources, s.noise_levels, grid, s.seeds, *s.query_seed, opts);
        write_text_file(s.out, sweep_csv(rep));
        for (const auto& r : rep.rows) {
            out << r.setting.estimator_label() << " k=" << r.setting.k << " l=" << r.setting.l
                << " noise=" << format_double(r.noise) << " ret_err=" << r.setting.ret_err.label()
                << " mu=" << format_fixed(r.mu, 3) << " sigma=" << format_fixed(r.sigma, 3);
            if (r.n_failures) out << " failures=" << r.n_failures;
            out << "\n";
        }
        return 0;
    }
    if (s.command == "cdf") {
        std::vector<std::pair<std::string, std::size_t>> targets;
        for (const auto& lab : s.labels) {
            auto i = v.find_label(lab);
            if (!i) throw std::runtime_error("label '" + lab + "' not found");
            targets.emplace_back(lab, *i);
        }
        for (auto i : s.query_indices) {
            if (i >= n) throw std::runtime_error("query index " + std::to_string(i) + " out of range");
            targets.emplace_back(v.label(i), i);
        }
        std::filesystem::create_directories(s.out_dir);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            const std::size_t idx = targets[t].second;
            const auto qs = perturb_queries(v, std::span<const std::size_t>(&idx, 1), s.noise,
                                            derive_seed(s.seed.value_or(0), t));
            const auto prof = cdf_profile(v, qs.query(0), targets[t].first);
            const auto path = (std::filesystem::path(s.out_dir) / ("cdf_" + targets[t].first + ".csv")).string();
            write_text_file(path, cdf_csv(prof));
            out << prof.label;
            for (auto k : s.coverage_at) out << " coverage@" << k << "=" << format_fixed(prof.coverage_at(k));
            out << " ranks_for_80pct=" << prof.ranks_for(0.8) << "\n";
        }
        return 0;
    }
    if (s.command == "end-to-end") {
        const auto idx = load_index(s.index, v);
        const auto qs = sample_queries(s, v);
        std::vector<std::pair<std::size_t, std::size_t>> grid;
        for (auto k : s.ks)
            for (auto l : s.ls) {
                require(k + l <= n, "k + l exceeds N");
                grid.emplace_back(k, l);
            }
        SweepOptions opts{s.threads, s.mince_tol, s.mince_max_iter, s.data};
        const auto rep = run_end_to_end(v, qs, idx, grid, s.seeds, resolve_budget(s, n), opts);
        write_text_file(s.out, end_to_end_csv(rep));
        for (const auto& r : rep.rows)
            out << "k=" << r.k << " l=" << r.l << " abse_mips=" << format_double(r.abse_mips)
                << " abse_nce=" << format_double(r.abse_nce) << " pct_better=" << format_fixed(r.pct_better, 2)
                << " speedup=" << format_fixed(r.speedup, 2) << " recall=" << format_fixed(r.recall, 4) << "\n";
        return 0;
    }
    throw UsageError("unknown command");
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sublinear partition function estimation toolkit", "pfe"};
    app.require_subcommand(1);
    RunSpec s;

    auto data_opts = [&](CLI::App* c) {
        c->add_option("--data", s.data, "Embedding file")->required();
        c->add_option("--format", s.format, "text or binary")->capture_default_str();
    };

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic Gaussian embedding matrix");
    gen->add_option("--n", s.n, "Number of vectors")->required();
    gen->add_option("--d", s.d, "Dimension")->required();
    gen->add_option("--scale", s.scale, "Entry standard deviation")->capture_default_str();
    gen->add_option("--seed", s.seed, "RNG seed")->required();
    gen->add_option("--format", s.format, "text or binary")->capture_default_str();
    gen->add_option("--out", s.out, "Output file")->required();

    auto* bidx = app.add_subcommand("build-index", "Build and save the k-means tree MIPS index");
    data_opts(bidx);
    bidx->add_option("--branching", s.branching)->capture_default_str();
    bidx->add_option("--leaf-size", s.leaf_size)->capture_default_str();
    bidx->add_option("--iterations", s.iterations, "Max Lloyd iterations per node")->capture_default_str();
    bidx->add_option("--seed", s.seed)->required();
    bidx->add_option("--out", s.out)->required();

    auto* bfm = app.add_subcommand("build-featuremap", "Sample a feature map and precompute lambda");
    data_opts(bfm);
    bfm->add_option("--features", s.features, "Feature count P")->required();
    bfm->add_option("--p", s.p, "Degree distribution parameter")->capture_default_str();
    bfm->add_option("--seed", s.seed)->required();
    bfm->add_option("--out", s.out)->required();

    auto* est = app.add_subcommand("estimate", "Estimate Z for one query");
    data_opts(est);
    est->add_option("--method", s.method, "exact|uniform|nmimps|mimps|mince|fmbe")->required();
    est->add_option("--k", s.k)->capture_default_str();
    est->add_option("--l", s.l)->capture_default_str();
    est->add_option("--features", s.features)->capture_default_str();
    est->add_option("--p", s.p)->capture_default_str();
    est->add_option("--model", s.model, "Precomputed feature map (fmbe)");
    est->add_option("--query-index", s.query_index, "Row used as the query")->required();
    est->add_option("--noise", s.noise, "Relative query noise")->capture_default_str();
    est->add_option("--seed", s.seed);
    est->add_option("--index", s.index, "Use this index for the head instead of exact retrieval");
    est->add_option("--budget", s.budget, "Scored candidates per search");
    est->add_option("--budget-fraction", s.budget_fraction)->capture_default_str();
    est->add_option("--mince-tol", s.mince_tol)->capture_default_str();
    est->add_option("--mince-max-iter", s.mince_max_iter)->capture_default_str();
    est->add_flag("--truth", s.truth, "Also compute exact Z and the relative error");

    auto* sw = app.add_subcommand("sweep", "Multi-seed error sweep (CSV)");
    data_opts(sw);
    sw->add_option("--method", s.methods, "Estimators")->required()->delimiter(',');
    sw->add_option("--k", s.ks)->delimiter(',');
    sw->add_option("--l", s.ls)->delimiter(',');
    sw->add_option("--features", s.feature_list)->delimiter(',');
    sw->add_option("--p", s.p)->capture_default_str();
    sw->add_option("--noise", s.noise_levels)->delimiter(',');
    sw->add_option("--ret-err", s.ret_err, "Dropped-rank specs, e.g. none 1 2 1+2");
    sw->add_option("--seeds", s.seeds)->required()->delimiter(',');
    sw->add_option("--n-queries", s.n_queries)->capture_default_str();
    sw->add_option("--query-seed", s.query_seed)->required();
    sw->add_option("--mince-tol", s.mince_tol)->capture_default_str();
    sw->add_option("--mince-max-iter", s.mince_max_iter)->capture_default_str();
    sw->add_option("--threads", s.threads)->capture_default_str();
    sw->add_option("--out", s.out)->required();

    auto* cdf = app.add_subcommand("cdf", "Per-query CDF of contributions to Z");
    data_opts(cdf);
    cdf->add_option("--labels", s.labels)->delimiter(',');
    cdf->add_option("--query-index", s.query_indices)->delimiter(',');
    cdf->add_option("--noise", s.noise)->capture_default_str();
    cdf->add_option("--seed", s.seed);
    cdf->add_option("--coverage-at", s.coverage_at)->delimiter(',');
    cdf->add_option("--out-dir", s.out_dir)->required();

    auto* e2e = app.add_subcommand("end-to-end", "Index-backed MIMPS against the Z = 1 heuristic");
    data_opts(e2e);
    e2e->add_option("--index", s.index)->required();
    e2e->add_option("--k", s.ks)->required()->delimiter(',');
    e2e->add_option("--l", s.ls)->required()->delimiter(',');
    e2e->add_option("--seeds", s.seeds)->required()->delimiter(',');
    e2e->add_option("--n-queries", s.n_queries)->capture_default_str();
    e2e->add_option("--query-seed", s.query_seed)->required();
    e2e->add_option("--noise", s.noise)->capture_default_str();
    e2e->add_option("--budget", s.budget);
    e2e->add_option("--budget-fraction", s.budget_fraction)->capture_default_str();
    e2e->add_option("--threads", s.threads)->capture_default_str();
    e2e->add_option("--out", s.out)->required();

    std::vector<std::string> storage(args);
    storage.insert(storage.begin(), "pfe");
    std::vector<char*> argv;
    for (auto& a : storage) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    for (auto* sub : app.get_subcommands()) s.command = sub->get_name();

    try {
        validate(s);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    out << "run: " << echo_json(s).dump() << "\n";
    try {
        return execute(s, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace pfe::cli
