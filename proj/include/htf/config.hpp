#pragma once

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "htf/attack.hpp"
#include "htf/pretrain.hpp"

namespace htf::config {

// Full description of one end-to-end run. Every constant of the desk-scale
// setup lives here; the full-scale reference values are documented in the
// startup banner and the shipped sample config.
struct RunConfig {
    std::uint64_t model_seed = 7;
    std::uint64_t data_seed = 11;
    std::uint64_t attack_seed = 13;
    std::uint64_t transfer_model_seed = 0;  // 0 = unset; the transfer study needs an explicit second seed
    std::uint64_t generation_seed = 17;

    model::ModelDims dims;
    int n_images = 2;
    int prompts_per_image = 60;
    int response_cap = 48;

    // Desk-scale pretraining schedule: long enough for the toy model to
    // memorize the guiding corpus (required for a meaningful clean baseline).
    pretrain::PretrainConfig pretrain{.steps = 12000, .lr = 1.5e-3, .lr_final = 1e-4};
    attack::AttackConfig attack;
    model::GenerationConfig generation;

    std::string output_dir = "out";
    std::vector<int> ablation_tokens = {vocab::BOS, vocab::IM_START, vocab::BOX_START};
    int jobs = 1;

    void validate() const {
        dims.validate();
        if (n_images < 1) throw ConfigError("RunConfig: n_images must be >= 1");
        if (prompts_per_image != 60)
            throw ConfigError("RunConfig: the guiding dataset contract needs exactly 60 prompts per image");
        if (response_cap < 1 || response_cap > 48)
            throw ConfigError("RunConfig: response_cap must lie in [1,48] so response+tail fits the context");
        pretrain.validate();
        attack.validate();
        generation.validate();
        if (jobs < 1) throw ConfigError("RunConfig: jobs must be >= 1");
        if (ablation_tokens.empty()) throw ConfigError("RunConfig: ablation_tokens must not be empty");
        for (int t : ablation_tokens)
            if (!vocab::is_special(t) || t == vocab::EOS)
                throw ConfigError("RunConfig: ablation token " + std::to_string(t) +
                                  " must be a non-EOS special id");
        if (output_dir.empty()) throw ConfigError("RunConfig: output_dir must not be empty");
        const int worst = dims.n_visual_tokens + 64 + response_cap + attack.tail_length - 1;
        if (worst > dims.context_len)
            throw ConfigError("RunConfig: response_cap + tail_length cannot fit the context window (" +
                              std::to_string(worst) + " > " + std::to_string(dims.context_len) + ")");
    }
};

inline nlohmann::json to_json(const RunConfig& rc) {
    nlohmann::json j;
    j["seeds"] = {{"model", rc.model_seed},
                  {"data", rc.data_seed},
                  {"attack", rc.attack_seed},
                  {"transfer_model", rc.transfer_model_seed},
                  {"generation", rc.generation_seed}};
    j["model"] = {{"d_model", rc.dims.d_model},         {"n_layers", rc.dims.n_layers},
                  {"n_heads", rc.dims.n_heads},         {"ffn_dim", rc.dims.ffn_dim},
                  {"context_len", rc.dims.context_len}, {"n_visual_tokens", rc.dims.n_visual_tokens}};
    j["dataprep"] = {{"n_images", rc.n_images},
                     {"prompts_per_image", rc.prompts_per_image},
                     {"response_cap", rc.response_cap}};
    j["pretrain"] = {{"steps", rc.pretrain.steps}, {"lr", rc.pretrain.lr}, {"lr_final", rc.pretrain.lr_final}};
    nlohmann::json aj;
    attack::to_json(aj, rc.attack);
    aj.erase("seed");  // seeds live in one place
    j["attack"] = aj;
    j["generation"] = {{"strategy", rc.generation.strategy == model::GenerationConfig::Strategy::greedy ? "greedy"
                                                                                                        : "nucleus"},
                       {"top_p", rc.generation.top_p},
                       {"temperature", rc.generation.temperature},
                       {"max_new_tokens", rc.generation.max_new_tokens}};
    j["output_dir"] = rc.output_dir;
    j["ablation"] = {{"tokens", rc.ablation_tokens}};
    j["jobs"] = rc.jobs;
    return j;
}

inline RunConfig from_json(const nlohmann::json& j) {
    RunConfig rc;
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        rc.model_seed = s.value("model", rc.model_seed);
        rc.data_seed = s.value("data", rc.data_seed);
        rc.attack_seed = s.value("attack", rc.attack_seed);
        rc.transfer_model_seed = s.value("transfer_model", rc.transfer_model_seed);
        rc.generation_seed = s.value("generation", rc.generation_seed);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        rc.dims.d_model = m.value("d_model", rc.dims.d_model);
        rc.dims.n_layers = m.value("n_layers", rc.dims.n_layers);
        rc.dims.n_heads = m.value("n_heads", rc.dims.n_heads);
        rc.dims.ffn_dim = m.value("ffn_dim", rc.dims.ffn_dim);
        rc.dims.context_len = m.value("context_len", rc.dims.context_len);
        rc.dims.n_visual_tokens = m.value("n_visual_tokens", rc.dims.n_visual_tokens);
    }
    if (j.contains("dataprep")) {
        const auto& d = j.at("dataprep");
        rc.n_images = d.value("n_images", rc.n_images);
        rc.prompts_per_image = d.value("prompts_per_image", rc.prompts_per_image);
        rc.response_cap = d.value("response_cap", rc.response_cap);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        rc.pretrain.steps = p.value("steps", rc.pretrain.steps);
        rc.pretrain.lr = p.value("lr", rc.pretrain.lr);
        rc.pretrain.lr_final = p.value("lr_final", rc.pretrain.lr_final);
    }
    if (j.contains("attack")) attack::from_json(j.at("attack"), rc.attack);
    if (j.contains("generation")) {
        const auto& g = j.at("generation");
        const std::string strat = g.value("strategy", std::string("greedy"));
        if (strat == "greedy")
            rc.generation.strategy = model::GenerationConfig::Strategy::greedy;
        else if (strat == "nucleus")
            rc.generation.strategy = model::GenerationConfig::Strategy::nucleus;
        else
            throw ConfigError("RunConfig: unknown generation strategy '" + strat + "'");
        rc.generation.top_p = g.value("top_p", rc.generation.top_p);
        rc.generation.temperature = g.value("temperature", rc.generation.temperature);
        rc.generation.max_new_tokens = g.value("max_new_tokens", rc.generation.max_new_tokens);
    }
    rc.output_dir = j.value("output_dir", rc.output_dir);
    if (j.contains("ablation")) rc.ablation_tokens = j.at("ablation").value("tokens", rc.ablation_tokens);
    rc.jobs = j.value("jobs", rc.jobs);
    return rc;
}

// Resolve derived seeds and apply the smoke-test override, then validate.
inline RunConfig finalize(RunConfig rc) {
    if (const char* ov = std::getenv("HTF_SEED_OVERRIDE")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(ov, &end, 10);
        if (end == ov || *end != '\0')
            throw ConfigError("HTF_SEED_OVERRIDE: '" + std::string(ov) + "' is not an integer");
        rc.attack_seed = static_cast<std::uint64_t>(v);
    }
    rc.pretrain.seed = rc.model_seed;
    rc.attack.seed = rc.attack_seed;
    rc.generation.seed = rc.generation_seed;
    rc.validate();
    return rc;
}

inline RunConfig load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: " + path + " is not valid JSON");
    return finalize(from_json(j));
}

inline std::uint64_t config_hash(const RunConfig& rc) { return fnv1a(to_json(rc).dump()); }

// Startup banner: the shipped desk-scale values next to the full-scale
// reference settings they stand in for.
inline void print_banner(std::ostream& os, const RunConfig& rc) {
    os << "run configuration (desk scale, full-scale reference in parens)\n"
       << "  attack.iterations:       " << rc.attack.iterations << " (5000)\n"
       << "  attack.tail_length:      " << rc.attack.tail_length << " (1024)\n"
       << "  attack.alpha:            " << fmt_double(rc.attack.alpha) << " (1/255)\n"
       << "  attack.epsilon:          " << fmt_double(rc.attack.epsilon) << " (64/255)\n"
       << "  attack.mu:               " << fmt_double(rc.attack.mu_sem) << "/" << fmt_double(rc.attack.mu_spe) << "/"
       << fmt_double(rc.attack.mu_eos) << " (1/1e3/1e4)\n"
       << "  attack.dwa:              T=" << fmt_double(rc.attack.dwa_temperature) << " floor="
       << fmt_double(rc.attack.dwa_floor) << " (T=2.0 floor=0.15)\n"
       << "  generation.max_new:      " << rc.generation.max_new_tokens << " (2048)\n"
       << "  dataprep.n_images:       " << rc.n_images << " (10)\n"
       << "  dataprep.prompts/image:  " << rc.prompts_per_image << " (60, split 40/20)\n"
       << "  config hash:             " << hex16(config_hash(rc)) << "\n";
}

}  // namespace htf::config
