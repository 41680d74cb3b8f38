#pragma once

#include <array>
#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "htf/dataprep.hpp"

namespace htf::attack {

// ------------------------------- config -------------------------------

struct AttackConfig {
    double alpha = 1.0 / 255.0;    // PGD step size, feature units
    double epsilon = 64.0 / 255.0; // L-inf radius, feature units
    int iterations = 2000;         // desk default; full-scale setting is 5000
    int tail_length = 64;          // desk default; full-scale setting is 1024
    int tail_token = vocab::BOS;
    double mu_sem = 1.0;
    double mu_spe = 1e3;
    double mu_eos = 1e4;
    double dwa_temperature = 2.0;
    double dwa_floor = 0.15;
    double dwa_sigma = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("AttackConfig: alpha must be positive");
        if (!(epsilon > 0.0)) throw ConfigError("AttackConfig: epsilon must be positive");
        if (iterations < 0) throw ConfigError("AttackConfig: iterations must be >= 0");
        if (tail_length < 1) throw ConfigError("AttackConfig: tail_length must be >= 1");
        if (!vocab::is_special(tail_token))
            throw ConfigError("AttackConfig: tail_token " + std::to_string(tail_token) + " is not a special id");
        if (tail_token == vocab::EOS) throw ConfigError("AttackConfig: tail_token must differ from EOS");
        if (!(dwa_temperature > 0.0)) throw ConfigError("AttackConfig: dwa temperature must be positive");
        if (!(dwa_floor >= 0.0 && dwa_floor < 1.0 / 3.0))
            throw ConfigError("AttackConfig: dwa floor must lie in [0, 1/3)");
    }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
    j = nlohmann::json{{"alpha", c.alpha},
                       {"epsilon", c.epsilon},
                       {"iterations", c.iterations},
                       {"tail_length", c.tail_length},
                       {"tail_token", c.tail_token},
                       {"mu_sem", c.mu_sem},
                       {"mu_spe", c.mu_spe},
                       {"mu_eos", c.mu_eos},
                       {"dwa_temperature", c.dwa_temperature},
                       {"dwa_floor", c.dwa_floor},
                       {"dwa_sigma", c.dwa_sigma},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
    c.alpha = j.value("alpha", c.alpha);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.iterations = j.value("iterations", c.iterations);
    c.tail_length = j.value("tail_length", c.tail_length);
    c.tail_token = j.value("tail_token", c.tail_token);
    c.mu_sem = j.value("mu_sem", c.mu_sem);
    c.mu_spe = j.value("mu_spe", c.mu_spe);
    c.mu_eos = j.value("mu_eos", c.mu_eos);
    c.dwa_temperature = j.value("dwa_temperature", c.dwa_temperature);
    c.dwa_floor = j.value("dwa_floor", c.dwa_floor);
    c.dwa_sigma = j.value("dwa_sigma", c.dwa_sigma);
    c.seed = j.value("seed", c.seed);
}

// ------------------------------- losses -------------------------------

// Mean cross-entropy over the first K teacher positions (the clean
// response, terminal EOS included).
inline Var loss_sem(Var logits, const std::vector<int>& response) {
    if (response.empty()) throw ContractError("loss_sem: K must be >= 1");
    const int K = static_cast<int>(response.size());
    if (logits.value().rows() < K)
        throw ShapeError("loss_sem: logits cover " + std::to_string(logits.value().rows()) + " positions, need " +
                         std::to_string(K));
    return mean_all(cross_entropy_rows(slice_rows(logits, 0, K), response));
}

// Mean cross-entropy toward the tail token over positions K+1..K+M.
inline Var loss_spe(Var logits, int K, int M, int t_spe) {
    if (M < 1) throw ContractError("loss_spe: M must be >= 1");
    if (K < 0) throw ContractError("loss_spe: K must be >= 0");
    if (logits.value().rows() < K + M)
        throw ShapeError("loss_spe: logits cover " + std::to_string(logits.value().rows()) + " positions, need " +
                         std::to_string(K + M));
    return mean_all(cross_entropy_rows(slice_rows(logits, K, K + M), std::vector<int>(static_cast<std::size_t>(M), t_spe)));
}

// Mean raw EOS logit over every position; negative values are meaningful.
inline Var loss_eos(Var logits, int eos_id = vocab::EOS) {
    if (logits.value().rows() < 1) throw ContractError("loss_eos: need at least one position");
    if (eos_id < 0 || eos_id >= logits.value().cols())
        throw std::out_of_range("loss_eos: eos id outside vocabulary");
    return mean_all(slice_cols(logits, eos_id, eos_id + 1));
}

// ------------------------------- DWA -------------------------------

struct DwaState {
    std::array<double, 3> prev{0.0, 0.0, 0.0};
    std::array<double, 3> lambda{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    int t = 1;
};

// One weighting update per optimization step: loss-change ratios against
// the previous step, tempered softmax, floor, renormalize. The first step
// has no history and keeps uniform weights.
inline DwaState dwa_update(DwaState state, const std::array<double, 3>& current, const AttackConfig& cfg) {
    if (state.t < 1) throw ContractError("dwa_update: step counter must be >= 1");
    if (state.t == 1) {
        state.lambda = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    } else {
        std::array<double, 3> r{};
        for (int k = 0; k < 3; ++k) {
            double v = current[static_cast<std::size_t>(k)] /
                       (state.prev[static_cast<std::size_t>(k)] + cfg.dwa_sigma);
            // a vanishing or sign-flipped denominator can push the ratio out
            // of floating range; pin it to a large finite surrogate so the
            // softmax below stays well-defined
            if (std::isnan(v)) v = 0.0;
            if (v > 1e6) v = 1e6;
            if (v < -1e6) v = -1e6;
            r[static_cast<std::size_t>(k)] = v / cfg.dwa_temperature;
        }
        const double m = std::max({r[0], r[1], r[2]});
        std::array<double, 3> e{};
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
            e[static_cast<std::size_t>(k)] = std::exp(r[static_cast<std::size_t>(k)] - m);
            s += e[static_cast<std::size_t>(k)];
        }
        double floored_sum = 0.0;
        for (int k = 0; k < 3; ++k) {
            double w = e[static_cast<std::size_t>(k)] / s;
            w = std::max(w, cfg.dwa_floor);
            state.lambda[static_cast<std::size_t>(k)] = w;
            floored_sum += w;
        }
        for (double& w : state.lambda) w /= floored_sum;
    }
    state.prev = current;
    state.t += 1;
    return state;
}

// Composite objective; λ and μ multiply in as constants, so no gradient
// flows through the weighting.
inline Var total_loss(Var l_sem, Var l_spe, Var l_eos, const DwaState& dwa, const AttackConfig& cfg) {
    Var a = scale(l_sem, cfg.mu_sem * dwa.lambda[0]);
    Var b = scale(l_spe, cfg.mu_spe * dwa.lambda[1]);
    Var c = scale(l_eos, cfg.mu_eos * dwa.lambda[2]);
    return add(add(a, b), c);
}

// ------------------------------- PGD -------------------------------

inline Tensor pgd_step(const Tensor& delta, const Tensor& grad, const AttackConfig& cfg) {
    if (!delta.same_shape(grad))
        throw ShapeError("pgd_step: delta " + Tensor::shape_str(delta.shape) + " vs grad " +
                         Tensor::shape_str(grad.shape));
    Tensor out = delta;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double g = grad[i];
        const double sgn = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        double v = out[i] - cfg.alpha * sgn;
        v = std::min(cfg.epsilon, std::max(-cfg.epsilon, v));
        out[i] = v;
    }
    return out;
}

// ------------------------------- crafting -------------------------------

struct TraceRow {
    int step = 0;
    double loss_sem = 0, loss_spe = 0, loss_eos = 0;
    double lambda_sem = 0, lambda_spe = 0, lambda_eos = 0;
    double total = 0;
};

struct Perturbation {
    Tensor delta;
    double epsilon = 0;
    int iterations = 0;
    std::vector<TraceRow> trace;
    std::vector<double> max_abs_per_step;  // ||delta_t||_inf after each step
    std::array<double, 3> final_losses{0, 0, 0};
    double final_total = 0;
};

// Mid-run snapshot: everything needed to continue a craft bit-exactly.
struct CraftState {
    int next_step = 1;
    Tensor delta;
    DwaState dwa;
    std::string rng_state;
    std::vector<TraceRow> trace;
    std::vector<double> max_abs_per_step;
};

struct CraftAborted : TrainingError {
    Perturbation partial;
    CraftAborted(const std::string& msg, Perturbation p) : TrainingError(msg), partial(std::move(p)) {}
};

inline const char* trace_header() {
    return "step,loss_sem,loss_spe,loss_eos,lambda_sem,lambda_spe,lambda_eos,total";
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
    os << trace_header() << "\n";
    for (const TraceRow& r : trace)
        os << r.step << ',' << fmt_double(r.loss_sem) << ',' << fmt_double(r.loss_spe) << ',' << fmt_double(r.loss_eos)
           << ',' << fmt_double(r.lambda_sem) << ',' << fmt_double(r.lambda_spe) << ',' << fmt_double(r.lambda_eos)
           << ',' << fmt_double(r.total) << "\n";
    if (!os) throw IoError("write_trace_csv: stream write failed");
}

inline std::vector<TraceRow> read_trace_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != trace_header())
        throw IoError("read_trace_csv: bad header '" + line + "'");
    std::vector<TraceRow> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        TraceRow r;
        char comma;
        std::istringstream ss(line);
        ss >> r.step >> comma >> r.loss_sem >> comma >> r.loss_spe >> comma >> r.loss_eos >> comma >> r.lambda_sem >>
            comma >> r.lambda_spe >> comma >> r.lambda_eos >> comma >> r.total;
        if (ss.fail()) throw IoError("read_trace_csv: unparseable row '" + line + "'");
        out.push_back(r);
    }
    return out;
}

inline CraftState fresh_craft_state(const Tensor& features, const AttackConfig& cfg) {
    CraftState st;
    st.next_step = 1;
    st.delta = Tensor::zeros(features.shape);
    st.dwa = DwaState{};
    st.rng_state = Rng(mix_seed(cfg.seed, fnv1a("craft"))).save_state();
    return st;
}

// The optimization loop: sample a guiding pair, teacher-force the clean
// response followed by M tail tokens, take the weighted three-part loss,
// and descend along the gradient sign under the L-inf budget. `until_step`
// caps work for checkpointing; the default runs to cfg.iterations.
inline CraftState craft_steps(const model::ToyVlmParams& params, const Tensor& features,
                              const dataprep::GuidingDataset& dataset, const AttackConfig& cfg, CraftState st,
                              int until_step = -1) {
    cfg.validate();
    if (dataset.opt_idx.empty()) throw ContractError("craft: dataset has no optimization pairs");
    const int nv = params.dims.n_visual_tokens;
    for (int idx : dataset.opt_idx) {
        const auto& pair = dataset.pairs[static_cast<std::size_t>(idx)];
        // Supervised span: the full clean response (K positions, EOS included)
        // plus the M tail positions that follow it.
        const int need = nv + static_cast<int>(pair.prompt_tokens.size()) + pair.K + cfg.tail_length - 1;
        if (need > params.dims.context_len)
            throw ConfigError("craft: pair needs " + std::to_string(need) + " positions but context_len is " +
                              std::to_string(params.dims.context_len));
    }
    if (!st.delta.same_shape(Tensor::zeros(features.shape)))
        throw ShapeError("craft: resumed delta shape " + Tensor::shape_str(st.delta.shape) + " does not match features");
    const int stop = until_step < 0 ? cfg.iterations : std::min(until_step, cfg.iterations);
    Rng rng(0);
    rng.load_state(st.rng_state);
    for (int t = st.next_step; t <= stop; ++t) {
        const auto& pair = dataset.pairs[static_cast<std::size_t>(dataset.opt_idx[rng.below(dataset.opt_idx.size())])];
        // Teacher sequence: the clean response (EOS included -- the semantic
        // loss keeps the visible answer intact) followed by M copies of the
        // tail token at the positions after it.
        std::vector<int> teacher = pair.response_tokens;
        teacher.insert(teacher.end(), static_cast<std::size_t>(cfg.tail_length), cfg.tail_token);

        Tape tape;
        model::BoundParams bp = model::bind(tape, params, false);
        Var delta_var = tape.leaf(st.delta, true);
        Var x_adv = add(tape.constant(features), delta_var);
        Var logits = model::forward_logits(tape, bp, x_adv, pair.prompt_tokens, teacher);
        Var l_sem = loss_sem(logits, pair.response_tokens);
        Var l_spe = loss_spe(logits, pair.K, cfg.tail_length, cfg.tail_token);
        Var l_eos = loss_eos(logits);
        const std::array<double, 3> raw{l_sem.value().item(), l_spe.value().item(), l_eos.value().item()};
        for (double v : raw)
            if (!std::isfinite(v)) {
                Perturbation p;
                p.delta = st.delta;
                p.epsilon = cfg.epsilon;
                p.iterations = t - 1;
                p.trace = st.trace;
                p.max_abs_per_step = st.max_abs_per_step;
                throw CraftAborted("craft: non-finite loss at step " + std::to_string(t), std::move(p));
            }
        st.dwa = dwa_update(st.dwa, raw, cfg);
        Var total = total_loss(l_sem, l_spe, l_eos, st.dwa, cfg);
        tape.backward(total);
        st.delta = pgd_step(st.delta, delta_var.grad(), cfg);

        TraceRow row;
        row.step = t;
        row.loss_sem = raw[0];
        row.loss_spe = raw[1];
        row.loss_eos = raw[2];
        row.lambda_sem = st.dwa.lambda[0];
        row.lambda_spe = st.dwa.lambda[1];
        row.lambda_eos = st.dwa.lambda[2];
        row.total = total.value().item();
        st.trace.push_back(row);
        st.max_abs_per_step.push_back(st.delta.max_abs());
        st.next_step = t + 1;
    }
    st.rng_state = rng.save_state();
    return st;
}

inline Perturbation finish_craft(CraftState st, const AttackConfig& cfg) {
    Perturbation p;
    p.delta = std::move(st.delta);
    p.epsilon = cfg.epsilon;
    p.iterations = static_cast<int>(st.trace.size());
    p.trace = std::move(st.trace);
    p.max_abs_per_step = std::move(st.max_abs_per_step);
    if (!p.trace.empty()) {
        const TraceRow& last = p.trace.back();
        p.final_losses = {last.loss_sem, last.loss_spe, last.loss_eos};
        p.final_total = last.total;
    }
    return p;
}

inline Perturbation craft(const model::ToyVlmParams& params, const Tensor& features,
                          const dataprep::GuidingDataset& dataset, const AttackConfig& cfg) {
    return finish_craft(craft_steps(params, features, dataset, cfg, fresh_craft_state(features, cfg)), cfg);
}

// ------------------------------- craft-state IO -------------------------------

inline void write_craft_state(std::ostream& os, const CraftState& st) {
    nlohmann::json j;
    j["next_step"] = st.next_step;
    j["dwa_prev"] = st.dwa.prev;
    j["dwa_lambda"] = st.dwa.lambda;
    j["dwa_t"] = st.dwa.t;
    j["rng_state"] = st.rng_state;
    std::vector<std::string> ma;
    ma.reserve(st.max_abs_per_step.size());
    for (double v : st.max_abs_per_step) ma.push_back(fmt_double(v));
    j["max_abs_per_step"] = ma;
    os << "HTCR1\n" << j.dump() << "\n";
    write_tensor(os, st.delta);
    write_trace_csv(os, st.trace);
    if (!os) throw IoError("write_craft_state: stream write failed");
}

inline CraftState read_craft_state(std::istream& is) {
    std::string magic;
    if (!std::getline(is, magic) || magic != "HTCR1") throw IoError("read_craft_state: bad magic '" + magic + "'");
    std::string meta_line;
    if (!std::getline(is, meta_line)) throw IoError("read_craft_state: missing metadata");
    nlohmann::json j = nlohmann::json::parse(meta_line, nullptr, false);
    if (j.is_discarded()) throw IoError("read_craft_state: metadata is not valid JSON");
    CraftState st;
    st.next_step = j.at("next_step").get<int>();
    st.dwa.prev = j.at("dwa_prev").get<std::array<double, 3>>();
    st.dwa.lambda = j.at("dwa_lambda").get<std::array<double, 3>>();
    st.dwa.t = j.at("dwa_t").get<int>();
    st.rng_state = j.at("rng_state").get<std::string>();
    for (const auto& s : j.at("max_abs_per_step").get<std::vector<std::string>>())
        st.max_abs_per_step.push_back(std::strtod(s.c_str(), nullptr));
    st.delta = read_tensor(is);
    st.trace = read_trace_csv(is);
    return st;
}

// ------------------------------- pixel inversion -------------------------------

struct InvertResult {
    model::ImageSpec image;
    Tensor features;  // re-processed from the quantized pixels
};

// Map adversarial features back to an 8-bit image: un-normalize, undo the
// patch layout, clamp, quantize, then re-run the processor so callers can
// evaluate on exactly what the saved image would produce.
inline InvertResult invert_to_pixels(const Tensor& x_clean, const Tensor& delta,
                                     const model::ModelDims& dims = model::ModelDims{}) {
    if (!x_clean.same_shape(delta))
        throw ShapeError("invert_to_pixels: features " + Tensor::shape_str(x_clean.shape) + " vs delta " +
                         Tensor::shape_str(delta.shape));
    if (x_clean.shape != std::vector<int>{dims.n_visual_tokens, dims.patch_dim()})
        throw ShapeError("invert_to_pixels: unexpected feature shape " + Tensor::shape_str(x_clean.shape));
    Tensor px = Tensor::zeros({16, 16});
    const int side = 4, grid = 4;
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const int row = pr * grid + pc;
            for (int i = 0; i < side; ++i)
                for (int j = 0; j < side; ++j) {
                    double f = x_clean.at(row, i * side + j) + delta.at(row, i * side + j);
                    double p = f * 0.5 + 0.5;
                    p = std::min(1.0, std::max(0.0, p));
                    px.at(pr * side + i, pc * side + j) = std::round(p * 255.0) / 255.0;
                }
        }
    InvertResult res;
    res.image = model::ImageSpec{std::move(px)};
    res.features = model::process_image(res.image, dims);
    return res;
}

// ------------------------------- artifact IO -------------------------------

struct Artifact {
    AttackConfig cfg;
    int image_id = 0;
    std::array<double, 3> final_losses{0, 0, 0};
    double final_total = 0;
    double asr_on_train = -1.0;  // negative = not measured
    Tensor delta;
    model::ImageSpec image;  // inverted adversarial image
};

inline void write_artifact(std::ostream& os, const Artifact& a) {
    nlohmann::json j;
    j["config"] = a.cfg;
    j["image_id"] = a.image_id;
    j["final_losses"] = {{"sem", a.final_losses[0]}, {"spe", a.final_losses[1]}, {"eos", a.final_losses[2]},
                         {"total", a.final_total}};
    j["asr_on_train"] = a.asr_on_train;
    os << "HTADV1\n" << j.dump() << "\n";
    write_tensor(os, a.delta);
    a.image.validate();
    unsigned char buf[256];
    for (int i = 0; i < 16; ++i)
        for (int k = 0; k < 16; ++k)
            buf[i * 16 + k] = static_cast<unsigned char>(std::lround(a.image.pixels.at(i, k) * 255.0));
    os.write(reinterpret_cast<const char*>(buf), 256);
    if (!os) throw IoError("write_artifact: stream write failed");
}

inline Artifact read_artifact(std::istream& is) {
    std::string magic;
    if (!std::getline(is, magic) || magic != "HTADV1") throw IoError("read_artifact: bad magic '" + magic + "'");
    std::string meta_line;
    if (!std::getline(is, meta_line)) throw IoError("read_artifact: missing metadata");
    nlohmann::json j = nlohmann::json::parse(meta_line, nullptr, false);
    if (j.is_discarded()) throw IoError("read_artifact: metadata is not valid JSON");
    Artifact a;
    a.cfg = j.at("config").get<AttackConfig>();
    a.image_id = j.at("image_id").get<int>();
    a.final_losses = {j.at("final_losses").at("sem").get<double>(), j.at("final_losses").at("spe").get<double>(),
                      j.at("final_losses").at("eos").get<double>()};
    a.final_total = j.at("final_losses").at("total").get<double>();
    a.asr_on_train = j.at("asr_on_train").get<double>();
    a.delta = read_tensor(is);
    unsigned char buf[256];
    is.read(reinterpret_cast<char*>(buf), 256);
    if (is.gcount() != 256) throw IoError("read_artifact: truncated pixel block");
    Tensor px = Tensor::zeros({16, 16});
    for (int i = 0; i < 16; ++i)
        for (int k = 0; k < 16; ++k) px.at(i, k) = buf[i * 16 + k] / 255.0;
    a.image = model::ImageSpec{std::move(px)};
    return a;
}

}  // namespace htf::attack
