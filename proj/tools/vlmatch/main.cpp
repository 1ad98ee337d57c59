#include <chrono>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "vlmatch/commands.hpp"
#include "vlmatch/config.hpp"
#include "vlmatch/error.hpp"
#include "vlmatch/manifest.hpp"

namespace {

struct Paths {
    std::vector<std::pair<std::string, std::string>> inputs;   // flag name, help
    std::vector<std::pair<std::string, std::string>> outputs;
};

// Named flags and the config keys they overwrite.
struct FlagSpec {
    std::string flag;
    std::string key;
    std::string help;
    bool is_switch = false;
};

struct Subcommand {
    std::string name;
    std::string help;
    Paths paths;
    std::vector<FlagSpec> flags;
};

std::vector<FlagSpec> train_flags(const std::string& sect) {
    return {{"--steps", sect + ".steps", "optimizer steps"},
            {"--batch-size", sect + ".batch_size", "examples per step"},
            {"--lr", sect + ".lr", "learning rate"}};
}

std::vector<Subcommand> subcommands() {
    auto retrieval = train_flags("retrieval");
    retrieval.push_back({"--lambda", "retrieval.lambda", "weight of the distillation term"});
    auto gen = std::vector<FlagSpec>{{"--n-items", "gen.n_items", "catalog size"}};
    return {
        {"gen", "generate a synthetic corpus directory", {{}, {{"out", "dataset directory"}}}, gen},
        {"pretrain",
         "pre-train the base model",
         {{{"data", "dataset directory"}}, {{"out", "checkpoint"}, {"metrics", "loss log (JSON lines)"}}},
         train_flags("pretrain")},
        {"finetune-relevance",
         "fine-tune the relevance classifier",
         {{{"data", "dataset directory"}, {"base", "base checkpoint"}},
          {{"out", "checkpoint"}, {"metrics", "loss log (JSON lines)"}}},
         train_flags("relevance")},
        {"finetune-retrieval",
         "fine-tune the multitask retrieval model",
         {{{"data", "dataset directory"}, {"base", "base checkpoint"}, {"teacher", "relevance checkpoint"}},
          {{"out", "checkpoint"}, {"metrics", "loss log (JSON lines)"}}},
         retrieval},
        {"index",
         "embed catalog images and build the search index",
         {{{"data", "dataset directory"}, {"retrieval", "retrieval checkpoint"}},
          {{"out", "index file"}, {"embeddings", "flat embedding export"}}},
         {{"--exact", "index.ann", "store vectors only, no graph", true}}},
        {"match",
         "retrieve and rerank images for queries",
         {{{"data", "dataset directory"},
           {"index", "index file"},
           {"retrieval", "retrieval checkpoint"},
           {"relevance", "relevance checkpoint"}},
          {{"out", "match report (JSON lines)"}}},
         {{"--k-retrieve", "match.k_retrieve", "stage-one candidates"},
          {"--k-final", "match.k_final", "results kept after reranking"},
          {"--ef-search", "match.ef_search", "ANN beam width"},
          {"--queries", "match.queries", "heldout or all"},
          {"--exact", "match.use_ann", "exact stage-one search", true}}},
        {"eval",
         "score a match report",
         {{{"data", "dataset directory"}, {"report", "match report"}, {"relevance", "relevance checkpoint (adds AUC)"}},
          {{"out", "eval report (JSON)"}}},
         {}},
        {"ablation",
         "retrieval fine-tuning with and without distillation",
         {{{"data", "dataset directory"}, {"base", "base checkpoint"}, {"teacher", "relevance checkpoint"}},
          {{"out", "comparison table (JSON)"}}},
         train_flags("retrieval")},
    };
}

bool required_path(const std::string& command, const std::string& name) {
    if (name == "metrics" || name == "embeddings") return false;
    if (command == "eval" && name == "relevance") return false;
    return true;
}

int execute(vlcli::Invocation inv) {
    const auto start = std::chrono::steady_clock::now();
    vlcli::RunManifest m;
    m.command = inv.command;
    m.config_path = inv.config_path;
    m.inputs = inv.inputs;
    m.outputs = inv.outputs;
    std::exception_ptr error;
    try {
        m.seed = vlcli::seed_of(inv.config);
        const auto summary = vlcli::run(inv);
        std::cout << summary.dump(2) << "\n";
    } catch (const std::exception& e) {
        error = std::current_exception();
        m.error = e.what();
        std::cerr << "vlmatch " << inv.command << ": " << e.what() << "\n";
    }
    m.exit_status = vlcli::exit_code_for(error);
    m.config = inv.config;
    m.duration_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto out = inv.outputs.find("out");
    if (out != inv.outputs.end() && !out->second.empty()) {
        try {
            vlcli::write_manifest(m, vlcli::manifest_path(out->second));
        } catch (const std::exception& e) {
            std::cerr << "vlmatch: cannot write manifest: " << e.what() << "\n";
            if (m.exit_status == 0) m.exit_status = 4;
        }
    }
    return m.exit_status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vlmatch: query-image matching with a pre-trained vision-language model"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    struct Bound {
        Subcommand spec;
        CLI::App* app = nullptr;
        std::string config;
        std::vector<std::string> sets;
        std::uint64_t seed = 1;
        CLI::Option* seed_opt = nullptr;
        std::map<std::string, std::string> paths;
        std::map<std::string, std::string> flag_values;
        std::map<std::string, bool> switches;
        std::map<std::string, CLI::Option*> flag_opts;
    };
    std::vector<std::unique_ptr<Bound>> bound;
    for (auto& spec : subcommands()) {
        auto b = std::make_unique<Bound>();
        b->spec = spec;
        b->app = app.add_subcommand(spec.name, spec.help);
        b->app->add_option("--config", b->config, "JSON config with dotted keys");
        b->app->add_option("--set", b->sets, "override one config key: key=value")->take_all();
        b->seed_opt = b->app->add_option("--seed", b->seed, "seed for every random stream");
        for (const auto& [name, help] : spec.paths.inputs) {
            auto* o = b->app->add_option("--" + name, b->paths[name], help);
            if (required_path(spec.name, name)) o->required();
        }
        for (const auto& [name, help] : spec.paths.outputs) {
            auto* o = b->app->add_option("--" + name, b->paths[name], help);
            if (required_path(spec.name, name)) o->required();
        }
        for (const auto& f : spec.flags) {
            if (f.is_switch) {
                b->flag_opts[f.flag] = b->app->add_flag(f.flag, b->switches[f.flag], f.help);
            } else {
                b->flag_opts[f.flag] = b->app->add_option(f.flag, b->flag_values[f.flag], f.help);
            }
        }
        bound.push_back(std::move(b));
    }
    std::string replay_manifest;
    auto* replay = app.add_subcommand("replay", "re-run a command from its manifest");
    replay->add_option("manifest", replay_manifest, "<output>.manifest.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;
    }

    if (replay->parsed()) {
        try {
            const auto m = vlcli::read_manifest(replay_manifest);
            vlcli::Invocation inv{m.command, m.config_path, m.config, m.inputs, m.outputs};
            return execute(std::move(inv));
        } catch (const std::exception& e) {
            std::cerr << "vlmatch replay: " << e.what() << "\n";
            return vlcli::exit_code_for(std::current_exception());
        }
    }

    for (auto& b : bound) {
        if (!b->app->parsed()) continue;
        vlcli::Invocation inv;
        inv.command = b->spec.name;
        inv.config_path = b->config;
        try {
            if (!b->config.empty()) inv.config = vlcli::load_config(b->config);
            for (const auto& s : b->sets) vlcli::apply_set(inv.config, s);
            if (b->seed_opt->count() > 0) inv.config["seed"] = b->seed;
            for (const auto& f : b->spec.flags) {
                if (b->flag_opts[f.flag]->count() == 0) continue;
                if (f.is_switch) {
                    inv.config[f.key] = false;  // both switches turn ANN off
                } else {
                    vlcli::apply_set(inv.config, f.key + "=" + b->flag_values[f.flag]);
                }
            }
        } catch (const std::exception& e) {
            std::cerr << "vlmatch " << inv.command << ": " << e.what() << "\n";
            return vlcli::exit_code_for(std::current_exception());
        }
        for (const auto& [name, help] : b->spec.paths.inputs) {
            if (!b->paths[name].empty()) inv.inputs[name] = b->paths[name];
        }
        for (const auto& [name, help] : b->spec.paths.outputs) {
            if (!b->paths[name].empty()) inv.outputs[name] = b->paths[name];
        }
        return execute(std::move(inv));
    }
    return 3;
}
