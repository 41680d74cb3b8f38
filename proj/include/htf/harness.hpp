#pragma once

#include <array>
#include <chrono>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "htf/attack.hpp"

namespace htf::harness {

// ------------------------------- quality -------------------------------

// Multiset precision/recall F1 over non-special tokens: the deterministic
// stand-in for an external judge. Empty-vs-empty scores 1, empty-vs-
// nonempty scores 0.
inline double token_f1(const std::vector<int>& candidate, const std::vector<int>& reference) {
    std::map<int, int> cc, rc;
    int nc = 0, nr = 0;
    for (int t : candidate)
        if (!vocab::is_special(t)) {
            ++cc[t];
            ++nc;
        }
    for (int t : reference)
        if (!vocab::is_special(t)) {
            ++rc[t];
            ++nr;
        }
    if (nc == 0 && nr == 0) return 1.0;
    if (nc == 0 || nr == 0) return 0.0;
    int overlap = 0;
    for (const auto& [tok, n] : cc) {
        auto it = rc.find(tok);
        if (it != rc.end()) overlap += std::min(n, it->second);
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / nc;
    const double r = static_cast<double>(overlap) / nr;
    return 2.0 * p * r / (p + r);
}

// ------------------------------- evaluation -------------------------------

struct PromptResult {
    int prompt_idx = 0;
    int total_tokens = 0;
    int visible_tokens = 0;
    bool reached_limit = false;
    int latency_proxy = 0;    // token count, the deterministic cost driver
    double wall_seconds = 0;  // advisory only
    double quality = 0;       // token-F1 vs the stored clean response
    std::vector<int> tokens;
    bool error = false;
    std::string error_msg;
};

struct Aggregates {
    int n = 0;
    int errors = 0;
    double asr = 0;
    double mean_latency = 0;
    double mean_total = 0;
    double mean_visible = 0;
    double mean_quality = 0;
};

inline Aggregates aggregate(const std::vector<PromptResult>& rows) {
    Aggregates a;
    for (const PromptResult& r : rows) {
        if (r.error) {
            ++a.errors;
            continue;
        }
        ++a.n;
        a.asr += r.reached_limit ? 1.0 : 0.0;
        a.mean_latency += r.latency_proxy;
        a.mean_total += r.total_tokens;
        a.mean_visible += r.visible_tokens;
        a.mean_quality += r.quality;
    }
    if (a.n > 0) {
        a.asr /= a.n;
        a.mean_latency /= a.n;
        a.mean_total /= a.n;
        a.mean_visible /= a.n;
        a.mean_quality /= a.n;
    }
    return a;
}

// Generate on every test-split prompt and measure length, visibility,
// limit hits, and response quality against the stored clean responses.
// Per-prompt failures are recorded, not fatal.
inline std::vector<PromptResult> evaluate(const model::ToyVlmParams& params, const Tensor& features,
                                          const dataprep::GuidingDataset& dataset,
                                          const model::GenerationConfig& gen_cfg) {
    if (dataset.test_idx.empty()) throw ContractError("evaluate: test split is empty");
    std::vector<PromptResult> out;
    for (int idx : dataset.test_idx) {
        const dataprep::PromptResponsePair& pair = dataset.pairs[static_cast<std::size_t>(idx)];
        PromptResult r;
        r.prompt_idx = idx;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            model::GenResult g = model::generate(params, features, pair.prompt_tokens, gen_cfg);
            r.tokens = std::move(g.tokens);
            r.total_tokens = static_cast<int>(r.tokens.size());
            r.visible_tokens = model::render_visible(r.tokens).visible_length;
            r.reached_limit = g.reached_limit;
            r.latency_proxy = r.total_tokens;
            r.quality = token_f1(r.tokens, pair.response_tokens);
        } catch (const std::exception& e) {
            r.error = true;
            r.error_msg = e.what();
        }
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

struct AttackReport {
    std::vector<PromptResult> clean;
    std::vector<PromptResult> adversarial;
    Aggregates clean_agg;
    Aggregates adv_agg;
    double mult_latency = 0, mult_total = 0, mult_visible = 0, mult_quality = 0;
};

inline AttackReport make_report(const model::ToyVlmParams& params, const Tensor& clean_features,
                                const Tensor& adv_features, const dataprep::GuidingDataset& dataset,
                                const model::GenerationConfig& gen_cfg) {
    AttackReport rep;
    rep.clean = evaluate(params, clean_features, dataset, gen_cfg);
    rep.adversarial = evaluate(params, adv_features, dataset, gen_cfg);
    rep.clean_agg = aggregate(rep.clean);
    rep.adv_agg = aggregate(rep.adversarial);
    auto ratio = [](double adv, double clean, const char* what) {
        if (!(clean > 0.0))
            throw ContractError(std::string("AttackReport: clean mean ") + what + " must be positive for multipliers");
        return adv / clean;
    };
    rep.mult_latency = ratio(rep.adv_agg.mean_latency, rep.clean_agg.mean_latency, "latency");
    rep.mult_total = ratio(rep.adv_agg.mean_total, rep.clean_agg.mean_total, "length");
    rep.mult_visible = ratio(rep.adv_agg.mean_visible, rep.clean_agg.mean_visible, "visible length");
    rep.mult_quality = ratio(rep.adv_agg.mean_quality, rep.clean_agg.mean_quality, "quality");
    return rep;
}

// ------------------------------- report IO -------------------------------

inline void write_report_csv(std::ostream& os, const AttackReport& rep) {
    os << "condition,prompt_idx,total_tokens,visible_tokens,reached_limit,latency_proxy,quality\n";
    auto rows = [&os](const char* cond, const std::vector<PromptResult>& rs) {
        for (const PromptResult& r : rs) {
            if (r.error) continue;
            os << cond << ',' << r.prompt_idx << ',' << r.total_tokens << ',' << r.visible_tokens << ','
               << (r.reached_limit ? 1 : 0) << ',' << r.latency_proxy << ',' << fmt_double(r.quality) << "\n";
        }
    };
    rows("clean", rep.clean);
    rows("adversarial", rep.adversarial);
    if (!os) throw IoError("write_report_csv: stream write failed");
}

inline nlohmann::json aggregates_json(const Aggregates& a) {
    return nlohmann::json{{"n", a.n},
                          {"errors", a.errors},
                          {"asr", a.asr},
                          {"mean_latency", a.mean_latency},
                          {"mean_total", a.mean_total},
                          {"mean_visible", a.mean_visible},
                          {"mean_quality", a.mean_quality}};
}

inline nlohmann::json summary_json(const AttackReport& rep) {
    return nlohmann::json{{"clean", aggregates_json(rep.clean_agg)},
                          {"adversarial", aggregates_json(rep.adv_agg)},
                          {"multipliers",
                           {{"latency", rep.mult_latency},
                            {"output_length", rep.mult_total},
                            {"visible_length", rep.mult_visible},
                            {"quality", rep.mult_quality}}}};
}

// ------------------------------- distributions -------------------------------

struct HistogramBundle {
    int limit = 0;
    int bin_width = 0;
    std::vector<int> clean_total;  // 17 bins: floor(len/width), len==limit lands in the last
    std::vector<int> adv_visible;
    std::vector<int> adv_total;
};

inline HistogramBundle length_distributions(const AttackReport& rep, int limit) {
    if (limit < 16) throw ContractError("length_distributions: limit too small to bin");
    HistogramBundle h;
    h.limit = limit;
    h.bin_width = limit / 16;
    const int nbins = limit / h.bin_width + 1;
    h.clean_total.assign(static_cast<std::size_t>(nbins), 0);
    h.adv_visible.assign(static_cast<std::size_t>(nbins), 0);
    h.adv_total.assign(static_cast<std::size_t>(nbins), 0);
    auto bin = [&](int len) { return std::min(nbins - 1, len / h.bin_width); };
    for (const PromptResult& r : rep.clean)
        if (!r.error) ++h.clean_total[static_cast<std::size_t>(bin(r.total_tokens))];
    for (const PromptResult& r : rep.adversarial)
        if (!r.error) {
            ++h.adv_visible[static_cast<std::size_t>(bin(r.visible_tokens))];
            ++h.adv_total[static_cast<std::size_t>(bin(r.total_tokens))];
        }
    return h;
}

inline void write_histogram_csv(std::ostream& os, const HistogramBundle& h) {
    os << "series,bin_lo,bin_hi,count\n";
    auto series = [&os, &h](const char* name, const std::vector<int>& bins) {
        for (std::size_t i = 0; i < bins.size(); ++i)
            os << name << ',' << static_cast<int>(i) * h.bin_width << ','
               << static_cast<int>(i + 1) * h.bin_width - 1 << ',' << bins[i] << "\n";
    };
    series("clean_total", h.clean_total);
    series("adv_visible", h.adv_visible);
    series("adv_total", h.adv_total);
    if (!os) throw IoError("write_histogram_csv: stream write failed");
}

// ------------------------------- ablation studies -------------------------------

struct AblationRow {
    std::string name;
    AttackReport report;
    bool failed = false;
    std::string error;
};

// All seven nonempty loss-term subsets, same seeds, excluded terms removed
// by zeroing their static scale.
inline std::vector<AblationRow> run_ablation_losses(const model::ToyVlmParams& params, const Tensor& clean_features,
                                                    const dataprep::GuidingDataset& dataset,
                                                    const attack::AttackConfig& base_cfg,
                                                    const model::GenerationConfig& gen_cfg) {
    struct Combo {
        const char* name;
        bool sem, spe, eos;
    };
    static const Combo combos[7] = {{"sem", true, false, false},      {"spe", false, true, false},
                                    {"eos", false, false, true},      {"sem+spe", true, true, false},
                                    {"sem+eos", true, false, true},   {"spe+eos", false, true, true},
                                    {"sem+spe+eos", true, true, true}};
    std::vector<AblationRow> rows;
    for (const Combo& c : combos) {
        AblationRow row;
        row.name = c.name;
        attack::AttackConfig cfg = base_cfg;
        if (!c.sem) cfg.mu_sem = 0.0;
        if (!c.spe) cfg.mu_spe = 0.0;
        if (!c.eos) cfg.mu_eos = 0.0;
        try {
            attack::Perturbation p = attack::craft(params, clean_features, dataset, cfg);
            Tensor adv = clean_features;
            for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] += p.delta[i];
            row.report = make_report(params, clean_features, adv, dataset, gen_cfg);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// One craft+evaluate per candidate tail token.
inline std::vector<AblationRow> run_ablation_token(const model::ToyVlmParams& params, const Tensor& clean_features,
                                                   const dataprep::GuidingDataset& dataset,
                                                   const attack::AttackConfig& base_cfg,
                                                   const model::GenerationConfig& gen_cfg,
                                                   const std::vector<int>& tokens) {
    std::vector<AblationRow> rows;
    for (int tok : tokens) {
        AblationRow row;
        row.name = vocab::special_name(tok);
        attack::AttackConfig cfg = base_cfg;
        cfg.tail_token = tok;
        try {
            cfg.validate();
            attack::Perturbation p = attack::craft(params, clean_features, dataset, cfg);
            Tensor adv = clean_features;
            for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] += p.delta[i];
            row.report = make_report(params, clean_features, adv, dataset, gen_cfg);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// A fixed crafted perturbation re-measured under nucleus sampling and a
// doubled generation limit.
struct DecodeStudy {
    AttackReport greedy;
    AttackReport nucleus;
    AttackReport doubled;  // greedy, 2x max_new_tokens
};

inline DecodeStudy run_ablation_decode(const model::ToyVlmParams& params, const Tensor& clean_features,
                                       const Tensor& adv_features, const dataprep::GuidingDataset& dataset,
                                       const model::GenerationConfig& base_gen) {
    DecodeStudy st;
    model::GenerationConfig greedy = base_gen;
    greedy.strategy = model::GenerationConfig::Strategy::greedy;
    st.greedy = make_report(params, clean_features, adv_features, dataset, greedy);
    model::GenerationConfig nuc = base_gen;
    nuc.strategy = model::GenerationConfig::Strategy::nucleus;
    nuc.top_p = 1.0;
    nuc.temperature = 1.0;
    st.nucleus = make_report(params, clean_features, adv_features, dataset, nuc);
    model::GenerationConfig dbl = greedy;
    dbl.max_new_tokens = base_gen.max_new_tokens * 2;
    st.doubled = make_report(params, clean_features, adv_features, dataset, dbl);
    return st;
}

// Evaluate a perturbation crafted against model A on independently seeded
// and pretrained model B (B's own dataset supplies its clean baseline).
inline AttackReport run_transfer(const Tensor& clean_features, const Tensor& delta,
                                 const model::ToyVlmParams& params_b, const dataprep::GuidingDataset& dataset_b,
                                 const model::GenerationConfig& gen_cfg) {
    Tensor adv = clean_features;
    if (!adv.same_shape(delta)) throw ShapeError("run_transfer: feature/delta shape mismatch");
    for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] += delta[i];
    return make_report(params_b, clean_features, adv, dataset_b, gen_cfg);
}

}  // namespace htf::harness
