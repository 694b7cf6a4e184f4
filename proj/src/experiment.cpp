// SPDX-License-Identifier: Apache-2.0
#include "spanattn/experiment.hpp"

#include <chrono>
#include <thread>

#include "spanattn/errors.hpp"
#include "spanattn/ops.hpp"
#include "spanattn/random.hpp"
#include "spanattn/tokenizer.hpp"

namespace spanattn {

std::string_view to_string(LossMode m) {
    return m == LossMode::All ? "all" : "answer";
}

LossMode parse_loss_mode(std::string_view name) {
    if (name == "all") {
        return LossMode::All;
    }
    if (name == "answer") {
        return LossMode::Answer;
    }
    throw ConfigError("unknown loss mode '" + std::string(name) + "' (expected all or answer)");
}

TrainExample task_example(const TaskInstance& inst, LossMode loss) {
    auto ex = next_token_example(inst.tokens());
    if (loss == LossMode::Answer) {
        // targets[t] predicts token t + 1; the target occupies [prompt, prompt + |target|).
        const std::size_t first = inst.prompt_tokens();
        for (std::size_t t = 0; t < ex.targets.size(); ++t) {
            if (t + 1 < first) {
                ex.targets[t] = kIgnoreTarget;
            }
        }
    }
    return ex;
}

std::uint64_t train_instance_seed(std::uint64_t seed, std::size_t step, std::size_t i) {
    return derive_seed(seed, {0x5452, step, i});
}

std::uint64_t eval_instance_seed(std::uint64_t seed, std::size_t i) {
    return derive_seed(seed, {0x4556, i});
}

std::vector<TrainExample> make_batch(const DataConfig& data, std::uint64_t seed, std::size_t step) {
    std::vector<TrainExample> batch;
    batch.reserve(data.batch);
    for (std::size_t i = 0; i < data.batch; ++i) {
        const std::uint64_t s = data.pool == 0 ? train_instance_seed(seed, step, i)
                                               : train_instance_seed(seed, 0, (step * data.batch + i) % data.pool);
        batch.push_back(task_example(generate_task(data.task, data.context_length, s), data.loss));
    }
    return batch;
}

std::vector<TrainLogRow> train_on_task(HybridModel<float>& model, const DataConfig& data, const TrainRunConfig& run,
                                       const std::function<void(const TrainLogRow&)>& on_step) {
    if (data.batch == 0) {
        throw ConfigError("batch size must be positive");
    }
    AdamW<float> opt(run.opt);
    std::vector<TrainLogRow> log;
    for (std::size_t step = 0; step < run.steps; ++step) {
        auto batch = make_batch(data, run.seed, step);
        AttentionRuntime rt = run.runtime;
        rt.step = step;
        const double lr = run.opt.lr_at(step);
        const auto t0 = std::chrono::steady_clock::now();
        const double loss = train_step(model, std::span<const TrainExample>(batch), opt, rt, lr);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        TrainLogRow row{step, loss, lr, static_cast<double>(data.batch * data.context_length) / secs};
        log.push_back(row);
        if (on_step) {
            on_step(row);
        }
    }
    return log;
}

EvalOutcome eval_recall(HybridModel<float>& model, std::string_view task, std::size_t context_length,
                        std::size_t instances, const AttentionRuntime& rt, std::uint64_t seed, std::size_t threads) {
    EvalOutcome out;
    out.task = std::string(task);
    out.context_length = context_length;
    out.variant = std::string(to_string(rt.variant));
    std::vector<TaskInstance> insts;
    try {
        for (std::size_t i = 0; i < instances; ++i) {
            insts.push_back(generate_task(task, context_length, eval_instance_seed(seed, i)));
        }
    } catch (const GenerationError& e) {
        out.infeasible = true;
        out.note = e.what();
        return out;
    }
    // Only the first worker records dispatch/trace logs; the vectors are not shared.
    std::vector<double> scores(insts.size(), 0.0);
    auto worker = [&](std::size_t w, std::size_t nw) {
        AttentionRuntime local = rt;
        if (w != 0) {
            local.traces = nullptr;
            local.dispatch = nullptr;
        }
        LogitsFn fn = [&](std::span<const int> toks) { return model_logits(model, toks, local); };
        for (std::size_t i = w; i < insts.size(); i += nw) {
            auto prompt = encode(insts[i].prompt);
            auto gen = greedy_decode(fn, prompt, insts[i].target.size());
            scores[i] = score_recall(decode(gen), insts[i]);
        }
    };
    const std::size_t nw = std::max<std::size_t>(1, std::min(threads, insts.size()));
    if (nw == 1) {
        worker(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < nw; ++w) {
            pool.emplace_back(worker, w, nw);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    double total = 0.0;
    for (double s : scores) {
        total += s;
    }
    out.instances = insts.size();
    out.recall = insts.empty() ? 0.0 : total / static_cast<double>(insts.size());
    return out;
}

double eval_perplexity(HybridModel<float>& model, std::string_view task, std::size_t context_length,
                       std::size_t instances, const AttentionRuntime& rt, std::uint64_t seed) {
    std::vector<int> stream;
    for (std::size_t i = 0; i < instances; ++i) {
        auto t = generate_task(task, context_length, eval_instance_seed(seed, i)).tokens();
        stream.insert(stream.end(), t.begin(), t.end());
    }
    LogitsFn fn = [&](std::span<const int> toks) { return model_logits(model, toks, rt); };
    return perplexity(fn, stream, context_length);
}

}  // namespace spanattn
