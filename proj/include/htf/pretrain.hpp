#pragma once

#include <cmath>
#include <vector>

#include "htf/dataprep.hpp"

namespace htf::pretrain {

struct PretrainConfig {
    int steps = 3000;
    double lr = 1e-3;
    double lr_final = -1.0;  // cosine-decay target; negative means constant lr
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 0) throw ConfigError("PretrainConfig: steps must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("PretrainConfig: lr must be positive");
    }

    double lr_at(int step) const {
        if (lr_final < 0.0 || steps <= 1) return lr;
        const double t = static_cast<double>(step - 1) / static_cast<double>(steps - 1);
        return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(3.14159265358979323846 * t));
    }
};

struct PretrainResult {
    model::ToyVlmParams params;
    std::vector<double> loss_curve;  // per-step mean next-token CE
};

// Next-token cross-entropy training over the procedural corpus, one example
// per step (Adam). Deterministic given the seed; divergence is an error,
// never a silent continuation.
inline PretrainResult pretrain_toy(model::ToyVlmParams params,
                                   const std::vector<dataprep::CorpusExample>& corpus,
                                   const std::vector<Tensor>& features_by_image, const PretrainConfig& cfg) {
    cfg.validate();
    PretrainResult res;
    if (cfg.steps == 0) {
        res.params = std::move(params);
        return res;
    }
    if (corpus.empty()) throw ContractError("pretrain_toy: corpus is empty");
    for (const dataprep::CorpusExample& ex : corpus)
        if (ex.image_id < 0 || ex.image_id >= static_cast<int>(features_by_image.size()))
            throw ContractError("pretrain_toy: example references image " + std::to_string(ex.image_id) +
                                " but only " + std::to_string(features_by_image.size()) + " feature tensors given");

    // Adam state per tensor, in for_each order.
    std::vector<Tensor*> slots;
    params.for_each([&slots](const std::string&, Tensor& t) { slots.push_back(&t); });
    std::vector<Tensor> m, v;
    m.reserve(slots.size());
    v.reserve(slots.size());
    for (Tensor* t : slots) {
        m.push_back(Tensor::zeros(t->shape));
        v.push_back(Tensor::zeros(t->shape));
    }

    Rng rng(mix_seed(cfg.seed, fnv1a("pretrain")));
    res.loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 1; step <= cfg.steps; ++step) {
        const dataprep::CorpusExample& ex = corpus[rng.below(corpus.size())];
        Tape tape;
        model::BoundParams bp = model::bind(tape, params, true);
        Var f = tape.constant(features_by_image[static_cast<std::size_t>(ex.image_id)]);
        Var logits = model::forward_logits(tape, bp, f, ex.prompt_ids, ex.target_ids);
        Var loss = mean_all(cross_entropy_rows(logits, ex.target_ids));
        const double lv = loss.value().item();
        if (!std::isfinite(lv))
            throw TrainingError("pretrain_toy: loss diverged to " + fmt_double(lv) + " at step " +
                                std::to_string(step));
        res.loss_curve.push_back(lv);
        tape.backward(loss);

        std::vector<Var*> bound;
        bp.for_each([&bound](const std::string&, Var& bv) { bound.push_back(&bv); });
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        const double lr = cfg.lr_at(step);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (!tape.has_grad(bound[i]->idx)) continue;  // unreached parameter this step
            const Tensor& g = bound[i]->grad();
            Tensor& tm = m[i];
            Tensor& tv = v[i];
            Tensor& w = *slots[i];
            for (std::size_t k = 0; k < g.numel(); ++k) {
                tm[k] = cfg.beta1 * tm[k] + (1.0 - cfg.beta1) * g[k];
                tv[k] = cfg.beta2 * tv[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                w[k] -= lr * (tm[k] / bc1) / (std::sqrt(tv[k] / bc2) + cfg.eps);
            }
        }
    }
    res.params = std::move(params);
    return res;
}

}  // namespace htf::pretrain
