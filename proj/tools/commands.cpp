// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "spanattn/adaptation.hpp"
#include "spanattn/bench.hpp"
#include "spanattn/config.hpp"
#include "spanattn/errors.hpp"
#include "spanattn/evalgen.hpp"
#include "spanattn/experiment.hpp"
#include "spanattn/se_attn.hpp"
#include "spanattn/tokenizer.hpp"

namespace spanattn::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out = "out";
};

ExperimentConfig load(const Common& c) {
    auto cfg = load_config(c.config);
    if (const char* env = std::getenv("SPANATTN_SEED"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const auto seed = std::strtoull(env, &end, 10);
        if (*end != '\0') {
            throw ConfigError(std::string("SPANATTN_SEED is not an integer: '") + env + "'");
        }
        cfg.override_seed(seed);
    }
    return cfg;
}

std::string resolve(const std::string& out, const std::string& path) {
    const fs::path p(path);
    return p.is_absolute() ? p.string() : (fs::path(out) / p).string();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw UsageError("cannot write " + path);
    }
    f << content;
}

/// manifest.json carries only reproducible fields; wall-clock data goes to
/// run_info.json. Commands sharing an output directory and config are merged.
void write_manifest(const std::string& out, const std::string& command, const ExperimentConfig& cfg,
                    std::vector<std::string> artifacts, double elapsed_s) {
    artifacts.push_back("config.txt");
    artifacts.push_back("run_info.json");
    std::sort(artifacts.begin(), artifacts.end());
    write_file(resolve(out, "config.txt"), cfg.to_text());
    const std::string path = resolve(out, "manifest.json");
    const std::string hash = hex64(cfg.hash());
    nlohmann::json m;
    if (std::ifstream f(path); f) {
        try {
            auto old = nlohmann::json::parse(f);
            if (old.value("config_hash", "") == hash && old.contains("commands")) {
                m = old;
            }
        } catch (const nlohmann::json::exception&) {
        }
    }
    m["config_hash"] = hash;
    m["commands"][command] = artifacts;
    std::set<std::string> all;
    for (const auto& [cmd, list] : m["commands"].items()) {
        for (const auto& a : list) {
            all.insert(a.get<std::string>());
        }
    }
    m["artifacts"] = all;
    write_file(path, m.dump(2) + "\n");
    nlohmann::json info;
    info["command"] = command;
    info["elapsed_s"] = elapsed_s;
    info["finished_unix"] = static_cast<long long>(std::time(nullptr));
    write_file(resolve(out, "run_info.json"), info.dump(2) + "\n");
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_train(const Common& c, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = load(c);
    fs::create_directories(c.out);
    HybridModel<float> model = cfg.init_checkpoint.empty() ? HybridModel<float>(cfg.model)
                                                           : load_checkpoint<float>(cfg.init_checkpoint);
    if (!cfg.init_checkpoint.empty() && !(model.config() == cfg.model)) {
        throw ConfigError("paths.init_checkpoint: checkpoint model section differs from the config");
    }
    apply_policy(model, cfg.policy, cfg.seed);

    TrainRunConfig run;
    run.steps = cfg.steps;
    run.opt = cfg.opt;
    run.runtime = cfg.runtime();
    run.seed = cfg.seed;
    std::ofstream log(resolve(c.out, "train_log.csv"));
    std::ofstream timing(resolve(c.out, "train_timing.csv"));
    log << "step,loss,lr\n";
    timing << "step,tokens_per_s\n";
    const auto rows = train_on_task(model, cfg.data, run, [&](const TrainLogRow& r) {
        log << r.step << ',' << fmt(r.loss) << ',' << fmt(r.lr) << '\n';
        timing << r.step << ',' << r.tokens_per_s << '\n';
    });
    log.close();
    timing.close();
    const std::string ckpt = resolve(c.out, cfg.checkpoint);
    save_checkpoint(ckpt, model);
    write_manifest(c.out, "train", cfg, {fs::path(ckpt).lexically_relative(c.out).string(), "train_log.csv",
                                         "train_timing.csv"},
                   seconds_since(t0));
    out << "trained " << rows.size() << " steps";
    if (!rows.empty()) {
        out << ", final loss " << rows.back().loss;
    }
    out << "; checkpoint " << ckpt << "\n";
    return kOk;
}

AttentionRuntime eval_runtime(const ExperimentConfig& cfg, const std::string& eval_attn) {
    AttentionRuntime rt = cfg.runtime();
    if (eval_attn == "train") {
        return rt;
    }
    rt.variant = parse_attention_variant(eval_attn);
    if (rt.variant == AttentionVariant::S2) {
        throw UsageError("--eval-attn s2: s2 attention is not available in this build");
    }
    return rt;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& eval_attn, std::size_t threads,
             std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = load(c);
    const AttentionRuntime rt = eval_runtime(cfg, eval_attn);
    const std::string ckpt = checkpoint.empty() ? resolve(c.out, cfg.checkpoint) : checkpoint;
    auto model = load_checkpoint<float>(ckpt);
    fs::create_directories(c.out);

    std::vector<std::string> dispatch;
    std::vector<RetrievalTrace> traces;
    std::ostringstream csv;
    csv << "task,context_length,variant,recall,ppl,instances,status\n";
    for (const auto& task : cfg.eval_tasks) {
        for (auto L : cfg.eval_lengths) {
            AttentionRuntime local = rt;
            local.dispatch = &dispatch;
            const auto res = eval_recall(model, task, L, cfg.eval_instances, local, cfg.seed, threads);
            csv << task << ',' << L << ',' << res.variant << ',';
            if (res.infeasible) {
                csv << ",," << 0 << ",infeasible\n";
                out << task << " @" << L << ": infeasible (" << res.note << ")\n";
                continue;
            }
            std::string ppl;
            if (cfg.eval_ppl) {
                ppl = fmt(eval_perplexity(model, task, L, std::min<std::size_t>(cfg.eval_instances, 4), rt, cfg.seed));
            }
            csv << fmt(res.recall) << ',' << ppl << ',' << res.instances << ",ok\n";
            out << task << " @" << L << ": recall " << res.recall << (ppl.empty() ? "" : ", ppl " + ppl) << "\n";
        }
    }
    write_file(resolve(c.out, "results.csv"), csv.str());

    // One extra forward on the first feasible instance captures the per-layer retrieval traces.
    for (const auto& task : cfg.eval_tasks) {
        try {
            auto inst = generate_task(task, cfg.eval_lengths.front(), eval_instance_seed(cfg.seed, 0));
            AttentionRuntime probe = rt;
            probe.traces = &traces;
            model_logits(model, inst.tokens(), probe);
            break;
        } catch (const GenerationError&) {
        }
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& d : dispatch) {
        ++counts[d];
    }
    nlohmann::json trace;
    trace["eval_attn"] = std::string(to_string(rt.variant));
    trace["train_attn"] = std::string(to_string(cfg.variant));
    trace["override"] = eval_attn;
    trace["dispatch_counts"] = counts;
    trace["retrieval_traces"] = nlohmann::json::array();
    for (const auto& t : traces) {
        trace["retrieval_traces"].push_back(nlohmann::json::parse(t.to_json()));
    }
    write_file(resolve(c.out, "eval_dispatch.json"), trace.dump(2) + "\n");
    write_manifest(c.out, "eval", cfg, {"results.csv", "eval_dispatch.json"}, seconds_since(t0));
    return kOk;
}

int cmd_gen(const std::string& task, std::size_t length, std::size_t count, std::uint64_t seed,
            const std::string& path, std::ostream& out) {
    std::ostringstream lines;
    for (std::size_t i = 0; i < count; ++i) {
        lines << generate_task(task, length, eval_instance_seed(seed, i)).to_json() << '\n';
    }
    if (path.empty() || path == "-") {
        out << lines.str();
    } else {
        if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
            fs::create_directories(parent);
        }
        write_file(path, lines.str());
    }
    return kOk;
}

int cmd_bench(const Common& c, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = load(c);
    fs::create_directories(c.out);
    const auto rows = profile_grid(cfg.bench_variants, cfg.bench_lengths, cfg.bench);
    std::ostringstream csv;
    write_profile_csv(csv, rows);
    write_file(resolve(c.out, "profile.csv"), csv.str());
    for (auto v : cfg.bench_variants) {
        std::vector<double> ls, ts;
        for (const auto& r : rows) {
            if (r.variant == v && !r.capped) {
                ls.push_back(static_cast<double>(r.L));
                ts.push_back(r.median_s);
            }
        }
        if (ls.size() >= 2) {
            out << to_string(v) << ": log-log slope " << loglog_slope(ls, ts) << "\n";
        }
    }
    write_manifest(c.out, "bench", cfg, {"profile.csv"}, seconds_since(t0));
    return kOk;
}

int cmd_trace(const Common& c, const std::string& checkpoint, const std::string& input, std::size_t layer,
              std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = load(c);
    if (!is_se_variant(cfg.variant)) {
        throw UsageError("trace needs an SE attention variant, config has '" + std::string(to_string(cfg.variant)) +
                         "'");
    }
    auto model = checkpoint.empty() ? HybridModel<float>(cfg.model) : load_checkpoint<float>(checkpoint);
    std::vector<int> tokens;
    if (!input.empty()) {
        std::ifstream f(input, std::ios::binary);
        if (!f) {
            throw MissingArtifactError("input sample not found: " + input);
        }
        std::stringstream ss;
        ss << f.rdbuf();
        tokens = encode(ss.str());
        if (tokens.size() > cfg.data.context_length) {
            tokens.resize(cfg.data.context_length);
        }
        if (tokens.empty()) {
            throw InputError("input sample is empty");
        }
    } else {
        tokens = generate_task(cfg.data.task, cfg.data.context_length, eval_instance_seed(cfg.seed, 0)).tokens();
    }
    std::vector<RetrievalTrace> traces;
    AttentionRuntime rt = cfg.runtime();
    rt.traces = &traces;
    model_logits(model, tokens, rt);
    if (layer >= traces.size()) {
        throw UsageError("--layer " + std::to_string(layer) + ": model has " + std::to_string(traces.size()) +
                         " attention layers");
    }
    fs::create_directories(c.out);
    nlohmann::json all = nlohmann::json::array();
    for (const auto& t : traces) {
        all.push_back(nlohmann::json::parse(t.to_json()));
    }
    write_file(resolve(c.out, "trace.json"), all.dump(2) + "\n");
    write_file(resolve(c.out, "mask.rle"), mask_to_rle(trace_pattern(traces[layer])));
    write_manifest(c.out, "trace", cfg, {"trace.json", "mask.rle"}, seconds_since(t0));
    out << "traced " << traces.size() << " attention layers over " << tokens.size() << " tokens\n";
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hybrid SSM/attention experiments with span-expanded retrieval"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config, "experiment config file")->required();
        sub->add_option("-o,--out", common.out, "output directory")->capture_default_str();
    };

    auto* train = app.add_subcommand("train", "train a model on generated task data");
    add_common(train);

    std::string checkpoint, eval_attn = "full";
    std::size_t threads = 1;
    auto* eval = app.add_subcommand("eval", "recall (and optional perplexity) on generated tasks");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint (default: <out>/<paths.checkpoint>)");
    eval->add_option("--eval-attn", eval_attn, "attention at evaluation: full, train, or a variant name")
        ->capture_default_str();
    eval->add_option("--threads", threads, "evaluation workers")->check(CLI::PositiveNumber)->capture_default_str();

    std::string task = "niah_single_1", gen_out;
    std::size_t length = 256, count = 1;
    std::uint64_t gen_seed = 0;
    auto* gen = app.add_subcommand("gen", "write task instances as JSON lines");
    gen->add_option("--task", task)->capture_default_str();
    gen->add_option("--context-length", length)->capture_default_str();
    gen->add_option("--count", count)->capture_default_str();
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("-o,--out", gen_out, "output file (default stdout)");

    auto* bench = app.add_subcommand("bench", "profile one training step per attention variant");
    add_common(bench);

    std::string input;
    std::size_t layer = 0;
    auto* trace = app.add_subcommand("trace", "dump retrieval traces and the attention mask");
    add_common(trace);
    trace->add_option("--checkpoint", checkpoint, "model checkpoint (default: fresh init from config)");
    trace->add_option("--input", input, "text sample (default: one instance of data.task)");
    trace->add_option("--layer", layer, "attention layer whose mask is written")->capture_default_str();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
        if (const char* env = std::getenv("SPANATTN_SEED"); gen->parsed() && env != nullptr && *env != '\0') {
            gen_seed = std::strtoull(env, nullptr, 10);
        }
        if (train->parsed()) return cmd_train(common, out);
        if (eval->parsed()) return cmd_eval(common, checkpoint, eval_attn, threads, out);
        if (gen->parsed()) return cmd_gen(task, length, count, gen_seed, gen_out, out);
        if (bench->parsed()) return cmd_bench(common, out);
        if (trace->parsed()) return cmd_trace(common, checkpoint, input, layer, out);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const MissingArtifactError& e) {
        err << "error: " << e.what() << "\n";
        return kMissingArtifact;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kValidation;
}

}  // namespace spanattn::cli
