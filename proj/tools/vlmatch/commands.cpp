#include "vlmatch/commands.hpp"

#include <filesystem>
#include <functional>

#include "vlmatch/checkpoint.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/eval.hpp"
#include "vlmatch/index.hpp"
#include "vlmatch/io.hpp"
#include "vlmatch/json_field.hpp"
#include "vlmatch/pipeline.hpp"
#include "vlmatch/synthdata.hpp"
#include "vlmatch/trainer.hpp"

namespace vlcli {

namespace fs = std::filesystem;
using namespace vlmatch;

namespace {

const std::string& path_arg(const std::map<std::string, std::string>& m, const std::string& key,
                            const std::string& command) {
    const auto it = m.find(key);
    if (it == m.end() || it->second.empty()) {
        throw ValidationError(command + ": missing required path --" + key);
    }
    return it->second;
}

const std::string& input(const Invocation& inv, const std::string& key) {
    const auto& p = path_arg(inv.inputs, key, inv.command);
    if (!fs::exists(p)) throw MissingInputError(p);
    return p;
}

const std::string& output(const Invocation& inv, const std::string& key) {
    return path_arg(inv.outputs, key, inv.command);
}

// Every command starts its snapshot from the seed alone and adds the
// sections it reads.
struct Resolver {
    const Flat& user;
    Flat resolved = Flat::object();
    std::uint64_t seed;

    explicit Resolver(const Flat& flat) : user(flat), seed(seed_of(flat)) { resolved["seed"] = seed; }

    nlohmann::json take(std::string_view name) const { return section(user, name); }

    GenConfig gen() {
        auto j = take("gen");
        j["seed"] = seed;
        const GenConfig g = GenConfig::from_json(j);
        auto r = g.to_json();
        r.erase("seed");
        store_section(resolved, "gen", r);
        return g;
    }

    EncoderConfig encoder() {
        const EncoderConfig e = EncoderConfig::from_json(take("encoder"));
        store_section(resolved, "encoder", e.to_json());
        return e;
    }

    TrainConfig train(Stage stage, std::string_view name) {
        auto j = take(name);
        j["seed"] = seed;
        const TrainConfig c = TrainConfig::from_json(j, stage);
        auto r = c.to_json();
        r.erase("stage");
        r.erase("seed");
        store_section(resolved, name, r);
        return c;
    }

    EvalConfig eval() {
        const EvalConfig e = EvalConfig::from_json(take("eval"));
        store_section(resolved, "eval", e.to_json());
        return e;
    }

    template <typename T>
    T value(std::string_view sect, const std::string& key, T fallback) {
        const auto j = take(sect);
        T v = fallback;
        try {
            v = json_field(j, key, fallback);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string(sect) + "." + key + ": " + e.what());
        }
        resolved[std::string(sect) + "." + key] = v;
        return v;
    }
};

Checkpoint load_for(const Dataset& data, const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    if (encoder_config_for(data.config, c.config) != c.config) {
        throw ValidationError(path + ": checkpoint encoder does not fit the dataset's vocabulary or patches");
    }
    return c;
}

nlohmann::json meta_for(const Invocation& inv, const TrainConfig& c) {
    return {{"command", inv.command}, {"train", c.to_json()}};
}

nlohmann::json loss_summary(const std::vector<StepRecord>& log, const std::string& key) {
    return {{"steps", log.size()},
            {"first_" + key, log.front().losses.at(key)},
            {"last_" + key, log.back().losses.at(key)}};
}

nlohmann::json cmd_gen(Invocation& inv, Resolver& r) {
    const GenConfig g = r.gen();
    const auto& out = output(inv, "out");
    const Dataset d = generate_dataset(g);
    write_dataset(d, out);
    return {{"items", d.items.size()},
            {"relevance_pairs", d.relevance.size()},
            {"click_pairs", d.clicks.size()},
            {"warnings", d.warnings}};
}

nlohmann::json cmd_pretrain(Invocation& inv, Resolver& r) {
    const Dataset data = read_dataset(input(inv, "data"));
    const EncoderConfig enc = encoder_config_for(data.config, r.encoder());
    const TrainConfig c = r.train(Stage::Pretrain, "pretrain");
    const auto& out = output(inv, "out");
    const auto res = run_stage(c, {&data, enc, nullptr, nullptr});
    save_checkpoint(res.params, enc, out, meta_for(inv, c));
    if (inv.outputs.count("metrics")) write_metrics_log(res.log, output(inv, "metrics"));
    return loss_summary(res.log, "total");
}

nlohmann::json cmd_finetune_relevance(Invocation& inv, Resolver& r) {
    const Dataset data = read_dataset(input(inv, "data"));
    const Checkpoint base = load_for(data, input(inv, "base"));
    const TrainConfig c = r.train(Stage::FinetuneRelevance, "relevance");
    const auto& out = output(inv, "out");
    const auto res = run_stage(c, {&data, base.config, &base.params, nullptr});
    save_checkpoint(res.params, base.config, out, meta_for(inv, c));
    if (inv.outputs.count("metrics")) write_metrics_log(res.log, output(inv, "metrics"));
    auto s = loss_summary(res.log, "relevance");
    s["heldout_auc"] = heldout_relevance_auc(data, relevance_scorer(res.params, base.config, data));
    s["base_cosine_auc"] = heldout_relevance_auc(data, cosine_scorer(base.params, base.config, data));
    return s;
}

nlohmann::json cmd_finetune_retrieval(Invocation& inv, Resolver& r) {
    const Dataset data = read_dataset(input(inv, "data"));
    const Checkpoint base = load_for(data, input(inv, "base"));
    const Checkpoint teacher = load_for(data, input(inv, "teacher"));
    if (teacher.config != base.config) throw ValidationError("teacher and base encoders differ");
    const TrainConfig c = r.train(Stage::FinetuneRetrieval, "retrieval");
    const auto& out = output(inv, "out");
    const auto res = run_stage(c, {&data, base.config, &base.params, &teacher.params});
    save_checkpoint(res.params, base.config, out, meta_for(inv, c));
    if (inv.outputs.count("metrics")) write_metrics_log(res.log, output(inv, "metrics"));
    return loss_summary(res.log, "total");
}

nlohmann::json cmd_index(Invocation& inv, Resolver& r) {
    const Dataset data = read_dataset(input(inv, "data"));
    const Checkpoint model = load_for(data, input(inv, "retrieval"));
    const bool ann = r.value<bool>("index", "ann", true);
    AnnParams params;
    params.m = r.value<std::size_t>("index", "m", params.m);
    params.ef_construction = r.value<std::size_t>("index", "ef_construction", params.ef_construction);
    params.seed = r.seed;
    const auto& out = output(inv, "out");
    const auto catalog = embed_catalog(data.items, model.params, model.config);
    const auto index = EmbeddingIndex::build(catalog.ids, catalog.vectors, catalog.dim, ann, params);
    index.save(out);
    if (inv.outputs.count("embeddings")) write_embeddings(catalog, output(inv, "embeddings"));
    return {{"vectors", index.size()}, {"dim", index.dim()}, {"ann", index.has_graph()}};
}

nlohmann::json cmd_match(Invocation& inv, Resolver& r) {
    MatchOptions opt;
    opt.k_retrieve = r.value<std::size_t>("match", "k_retrieve", opt.k_retrieve);
    opt.k_final = r.value<std::size_t>("match", "k_final", opt.k_final);
    opt.use_ann = r.value<bool>("match", "use_ann", opt.use_ann);
    opt.ef_search = r.value<std::size_t>("match", "ef_search", opt.ef_search);
    const auto which = r.value<std::string>("match", "queries", "heldout");
    const auto sample = r.value<std::size_t>("match", "query_sample", 0);
    if (opt.k_final < 1) throw ParameterError("match: k_final must be >= 1");
    if (opt.k_final > opt.k_retrieve) {
        throw ParameterError("match: k_final " + std::to_string(opt.k_final) + " exceeds k_retrieve " +
                             std::to_string(opt.k_retrieve));
    }
    if (which != "heldout" && which != "all") {
        throw ValidationError("match.queries must be 'heldout' or 'all'");
    }
    const Dataset data = read_dataset(input(inv, "data"));
    const EmbeddingIndex index = EmbeddingIndex::load(input(inv, "index"));
    const Checkpoint retrieval = load_for(data, input(inv, "retrieval"));
    const Checkpoint relevance = load_for(data, input(inv, "relevance"));
    const auto& out = output(inv, "out");
    if (index.dim() != retrieval.config.proj_dim) {
        throw ValidationError("index width " + std::to_string(index.dim()) +
                              " does not match the retrieval model's " +
                              std::to_string(retrieval.config.proj_dim));
    }
    std::vector<std::uint64_t> queries;
    if (which == "all") {
        for (const auto& it : data.items) queries.push_back(it.id);
        if (sample > 0 && queries.size() > sample) queries.resize(sample);
    } else {
        queries = heldout_queries(data, sample);
    }
    const Reranker reranker(relevance.params, relevance.config, data.items);
    std::vector<MatchResult> results;
    for (const auto q : queries) {
        results.push_back(match(q, data.items[q].query_tokens, index, retrieval.params, reranker,
                                retrieval.config, opt));
    }
    write_match_report(results, out);
    return {{"queries", results.size()}};
}

nlohmann::json cmd_eval(Invocation& inv, Resolver& r) {
    const EvalConfig ev = r.eval();
    const Dataset data = read_dataset(input(inv, "data"));
    const auto results = read_match_report(input(inv, "report"));
    const auto& out = output(inv, "out");
    const auto m = evaluate_matches(results, data, ev);
    nlohmann::json report = m.to_json(ev);
    if (inv.inputs.count("relevance")) {
        const Checkpoint rel = load_for(data, input(inv, "relevance"));
        report["heldout_auc"] = heldout_relevance_auc(data, relevance_scorer(rel.params, rel.config, data));
    }
    report["config"] = ev.to_json();
    report["seed"] = data.config.seed;
    write_file_atomic(out, report.dump(2) + "\n");
    return report;
}

nlohmann::json arm_json(const RetrievalMetrics& m, const EvalConfig& ev) {
    nlohmann::json j = m.to_json(ev);
    j.erase("queries");
    j.erase("click_pairs");
    return j;
}

nlohmann::json cmd_ablation(Invocation& inv, Resolver& r) {
    TrainConfig c = r.train(Stage::FinetuneRetrieval, "retrieval");
    const EvalConfig ev = r.eval();
    const auto lambdas = r.value<std::vector<double>>("ablation", "lambdas", {0.0, 1.0});
    if (lambdas.empty()) throw ValidationError("ablation.lambdas must not be empty");
    for (const double l : lambdas) {
        if (!(l >= 0.0)) throw ValidationError("ablation.lambdas must be >= 0");
    }
    const Dataset data = read_dataset(input(inv, "data"));
    const Checkpoint base = load_for(data, input(inv, "base"));
    const Checkpoint teacher = load_for(data, input(inv, "teacher"));
    if (teacher.config != base.config) throw ValidationError("teacher and base encoders differ");
    const auto& out = output(inv, "out");

    nlohmann::json table;
    const auto base_metrics = evaluate_retrieval(data, base.params, base.config, ev);
    table["base"] = arm_json(base_metrics, ev);
    table["queries"] = base_metrics.queries;
    table["click_pairs"] = base_metrics.click_pairs;
    table["arms"] = nlohmann::json::array();
    for (const double l : lambdas) {
        c.lambda = l;
        const auto res = run_stage(c, {&data, base.config, &base.params, &teacher.params});
        auto arm = arm_json(evaluate_retrieval(data, res.params, base.config, ev), ev);
        arm["lambda"] = l;
        table["arms"].push_back(std::move(arm));
    }
    table["seed"] = r.seed;
    write_file_atomic(out, table.dump(2) + "\n");
    return table;
}

using Handler = std::function<nlohmann::json(Invocation&, Resolver&)>;

const std::map<std::string, Handler>& handlers() {
    static const std::map<std::string, Handler> h = {
        {"gen", cmd_gen},
        {"pretrain", cmd_pretrain},
        {"finetune-relevance", cmd_finetune_relevance},
        {"finetune-retrieval", cmd_finetune_retrieval},
        {"index", cmd_index},
        {"match", cmd_match},
        {"eval", cmd_eval},
        {"ablation", cmd_ablation},
    };
    return h;
}

}  // namespace

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [k, v] : handlers()) n.push_back(k);
        return n;
    }();
    return names;
}

nlohmann::json run(Invocation& inv) {
    const auto it = handlers().find(inv.command);
    if (it == handlers().end()) throw ValidationError("unknown command '" + inv.command + "'");
    check_keys(inv.config);
    Resolver r(inv.config);
    try {
        auto summary = it->second(inv, r);
        inv.config = r.resolved;
        return summary;
    } catch (...) {
        inv.config = r.resolved;
        throw;
    }
}

int exit_code_for(std::exception_ptr error) {
    if (!error) return 0;
    try {
        std::rethrow_exception(error);
    } catch (const MissingInputError&) {
        return 2;
    } catch (const ValidationError&) {
        return 3;
    } catch (const ParameterError&) {
        return 3;
    } catch (const FormatError&) {
        return 3;
    } catch (const DimensionError&) {
        return 3;
    } catch (...) {
        return 4;
    }
}

}  // namespace vlcli
