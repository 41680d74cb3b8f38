// Acceptance runner: one line per criterion, exit 0 iff everything passed.
//
// The heavy state (pretrained checkpoint, default-scale crafted perturbation)
// is computed once and shared across criteria, so the numbered checks below
// all see the same run the way a user of the CLI would.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "htf/pipeline.hpp"

namespace cfg = htf::config;
namespace pl = htf::pipeline;
namespace att = htf::attack;
namespace hrn = htf::harness;
namespace dp = htf::dataprep;
namespace md = htf::model;
namespace fs = std::filesystem;
using htf::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

struct Runner {
    int failures = 0;

    void line(const std::string& id, const std::string& name, bool ok, const std::string& detail) {
        std::cout << (ok ? "PASS" : "FAIL") << " " << id << " " << name << ": " << detail << "\n";
        std::cout.flush();
        if (!ok) ++failures;
    }
};

// Fraction of consecutive W-sized window-mean pairs that are non-increasing,
// up to an absolute tolerance: noise at a converged floor should not count
// against an otherwise monotone trend.
double nonincreasing_window_frac(const std::vector<double>& xs, std::size_t W, int* good_out = nullptr,
                                 int* pairs_out = nullptr, double tol = 0.0) {
    int good = 0, pairs = 0;
    double prev = 0;
    bool have_prev = false;
    for (std::size_t w = 0; w + W <= xs.size(); w += W) {
        double m = 0;
        for (std::size_t i = w; i < w + W; ++i) m += xs[i];
        m /= static_cast<double>(W);
        if (have_prev) {
            ++pairs;
            if (m <= prev + tol) ++good;
        }
        prev = m;
        have_prev = true;
    }
    if (good_out) *good_out = good;
    if (pairs_out) *pairs_out = pairs;
    return pairs == 0 ? 1.0 : static_cast<double>(good) / static_cast<double>(pairs);
}

double mean_quality_on_successes(const std::vector<hrn::PromptResult>& rows, int* n_out = nullptr) {
    double acc = 0;
    int n = 0;
    for (const auto& r : rows)
        if (!r.error && r.reached_limit) {
            acc += r.quality;
            ++n;
        }
    if (n_out) *n_out = n;
    return n == 0 ? 0.0 : acc / n;
}

// Craft a perturbation for image 0 under a modified attack config but the
// same seed as the main run, then report the adversarial evaluation rows.
struct ComboResult {
    att::Perturbation pert;
    std::vector<hrn::PromptResult> adv;
    hrn::Aggregates agg;
};

ComboResult craft_and_eval(const pl::Prepared& p, const cfg::RunConfig& rc, const att::AttackConfig& ac) {
    ComboResult out;
    out.pert = att::craft(p.params, p.features[0], p.datasets[0], ac);
    const Tensor adv = pl::apply_delta(p.features[0], out.pert.delta);
    out.adv = hrn::evaluate(p.params, adv, p.datasets[0], rc.generation);
    out.agg = hrn::aggregate(out.adv);
    return out;
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[e.path().lexically_relative(dir).string()] = pl::read_file(e.path());
    return out;
}

}  // namespace

int main() {
    Runner run;
    const auto t_start = Clock::now();
    std::cout.setf(std::ios::unitbuf);  // line-by-line progress under redirection

    const fs::path scratch = fs::temp_directory_path() / "htf-acceptance";
    fs::remove_all(scratch);
    cfg::RunConfig rc;
    rc.output_dir = scratch.string();
    rc = cfg::finalize(rc);
    const fs::path dir = pl::run_dir(rc);

    std::ostringstream log;  // command chatter stays out of the pass/fail feed

    // Shared heavy state: pretrain + dataset capture, written into the run dir
    // so the later file-level commands reuse instead of recomputing.
    std::cout << "[setup] preparing default run (pretrain " << rc.pretrain.steps << " steps)...\n";
    pl::Prepared p = pl::ensure_prepared(rc, dir, log);
    std::cout << "[setup] prepared in " << fmt(secs_since(t_start)) << " s\n";

    // ---- criterion 1: gradient integrity of the composite loss ----
    {
        const auto t0 = Clock::now();
        const auto& pair0 = p.datasets[0].pairs[static_cast<std::size_t>(p.datasets[0].opt_idx[0])];
        const std::vector<int> prompt = pair0.prompt_tokens;
        std::vector<int> response = htf::vocab::encode("ok");  // K = 3 with the terminal EOS
        response.push_back(htf::vocab::EOS);
        const int M = 3;  // K + M = 6 supervised positions
        att::AttackConfig ac = rc.attack;
        att::DwaState frozen;
        frozen.lambda = {0.2, 0.5, 0.3};
        frozen.t = 3;

        auto f = [&](htf::Tape& tape, htf::Var delta) {
            md::BoundParams bp = md::bind(tape, p.params, false);
            htf::Var x = htf::add(tape.constant(p.features[0]), delta);
            std::vector<int> teacher = response;
            teacher.insert(teacher.end(), static_cast<std::size_t>(M), ac.tail_token);
            htf::Var logits = md::forward_logits(tape, bp, x, prompt, teacher);
            htf::Var l_sem = att::loss_sem(logits, response);
            htf::Var l_spe = att::loss_spe(logits, static_cast<int>(response.size()), M, ac.tail_token);
            htf::Var l_eos = att::loss_eos(logits);
            return att::total_loss(l_sem, l_spe, l_eos, frozen, ac);
        };
        htf::Rng rng(1234);
        Tensor delta0 = Tensor::zeros(p.features[0].shape);
        for (std::size_t i = 0; i < delta0.numel(); ++i)
            delta0[i] = (rng.uniform() * 2.0 - 1.0) * ac.epsilon * 0.5;
        const double err = htf::check_gradient(f, delta0);
        const double dt = secs_since(t0);
        run.line("1 ", "gradient-integrity", err < 1e-4 && dt < 60.0,
                 "max rel err " + fmt(err) + " over " + std::to_string(delta0.numel()) + " coords in " + fmt(dt) + " s");
    }

    // ---- criterion 2: DWA unit suite ----
    {
        std::string detail;
        bool ok = true;
        att::AttackConfig ac = rc.attack;

        att::DwaState st;  // t = 1
        att::DwaState first = att::dwa_update(st, {3.0, 0.5, -2.0}, ac);
        ok &= first.lambda[0] == 1.0 / 3.0 && first.lambda[1] == 1.0 / 3.0 && first.lambda[2] == 1.0 / 3.0;
        detail += "t=1 uniform " + std::string(ok ? "yes" : "NO");

        att::DwaState eq;
        eq.t = 2;
        eq.prev = {2.0, 2.0, 2.0};
        att::DwaState eqr = att::dwa_update(eq, {1.0, 1.0, 1.0}, ac);
        bool eq_ok = true;
        for (double l : eqr.lambda) eq_ok &= std::abs(l - 1.0 / 3.0) < 1e-12;
        ok &= eq_ok;
        detail += ", equal-ratios uniform " + std::string(eq_ok ? "yes" : "NO");

        att::AttackConfig cold = ac;
        cold.dwa_temperature = 0.5;
        att::DwaState fl;
        fl.t = 2;
        fl.prev = {1.0, 1.0, 1.0};
        att::DwaState flr = att::dwa_update(fl, {10.0, 0.0, 0.0}, cold);
        const bool fl_ok = std::abs(flr.lambda[0] - 0.769230768498998715) < 1e-3 &&
                           std::abs(flr.lambda[1] - 0.115384615750500643) < 1e-3 &&
                           std::abs(flr.lambda[2] - 0.115384615750500643) < 1e-3;
        ok &= fl_ok;
        detail += ", floor case " + std::string(fl_ok ? "yes" : "NO");

        htf::Rng rng(99);
        att::DwaState sim;
        bool sim_ok = true;
        const double lower = ac.dwa_floor / (1.0 + 2.0 * ac.dwa_floor) - 1e-12;
        for (int i = 0; i < 10000; ++i) {
            const std::array<double, 3> cur = {rng.uniform() * 10.0, rng.uniform() * 10.0,
                                               rng.uniform() * 10.0 - 5.0};  // L_eos can be negative
            sim = att::dwa_update(sim, cur, ac);
            double sum = 0;
            for (double l : sim.lambda) {
                sim_ok &= std::isfinite(l) && l > 0.0 && l < 1.0;
                if (sim.t > 2) sim_ok &= l >= lower;
                sum += l;
            }
            sim_ok &= std::abs(sum - 1.0) < 1e-9;
            if (!sim_ok) break;
        }
        ok &= sim_ok;
        detail += ", 1e4-update simplex " + std::string(sim_ok ? "yes" : "NO");
        run.line("2 ", "dwa-suite", ok, detail);
    }

    // ---- the default-scale craft on image 0 (shared by criteria 3-10) ----
    std::cout << "[setup] crafting image 0 at T=" << rc.attack.iterations << "...\n";
    const auto t_craft = Clock::now();
    att::AttackConfig ac0 = rc.attack;
    ac0.seed = pl::craft_seed(rc, 0);
    const att::Perturbation pert = att::craft(p.params, p.features[0], p.datasets[0], ac0);
    const double craft_secs = secs_since(t_craft);
    std::cout << "[setup] craft took " << fmt(craft_secs) << " s\n";

    // ---- criterion 3: L-inf budget at every recorded step ----
    {
        double worst = 0;
        for (double v : pert.max_abs_per_step) worst = std::max(worst, v);
        const bool ok = pert.max_abs_per_step.size() == static_cast<std::size_t>(rc.attack.iterations) &&
                        worst <= rc.attack.epsilon;
        run.line("3 ", "pgd-budget", ok,
                 "max|delta| " + fmt(worst) + " <= eps " + fmt(rc.attack.epsilon) + " over " +
                     std::to_string(pert.max_abs_per_step.size()) + " steps");
    }

    // ---- criteria 4 + 5: effectiveness and stealth on the held-out split ----
    const Tensor adv0 = pl::apply_delta(p.features[0], pert.delta);
    std::cout << "[setup] evaluating clean vs adversarial on the test split...\n";
    const hrn::AttackReport rep = hrn::make_report(p.params, p.features[0], adv0, p.datasets[0], rc.generation);
    {
        const bool ok = rep.adv_agg.asr >= 0.5 && rep.adv_agg.mean_total >= 3.0 * rep.clean_agg.mean_total &&
                        rep.clean_agg.asr == 0.0 && craft_secs <= 1800.0;
        run.line("4 ", "attack-effectiveness", ok,
                 "adv asr " + fmt(rep.adv_agg.asr) + ", mean total " + fmt(rep.adv_agg.mean_total) + " vs clean " +
                     fmt(rep.clean_agg.mean_total) + " (x" + fmt(rep.mult_total) + "), clean asr " +
                     fmt(rep.clean_agg.asr) + ", craft " + fmt(craft_secs) + " s/image");
    }
    {
        int nsucc = 0;
        const double f1 = mean_quality_on_successes(rep.adversarial, &nsucc);
        const bool ok = rep.adv_agg.mean_visible <= 2.0 * rep.clean_agg.mean_visible && nsucc > 0 && f1 >= 0.6;
        run.line("5 ", "stealth", ok,
                 "adv visible " + fmt(rep.adv_agg.mean_visible) + " vs clean " + fmt(rep.clean_agg.mean_visible) +
                     " (x" + fmt(rep.mult_visible) + "), F1 on " + std::to_string(nsucc) + " successes " + fmt(f1));
    }

    // ---- criterion 6: loss-ablation qualitative ordering ----
    {
        std::cout << "[setup] crafting loss-ablation rows (sem / sem+spe / spe+eos)...\n";
        att::AttackConfig sem_only = ac0, sem_spe = ac0, spe_eos = ac0;
        sem_only.mu_spe = 0.0;
        sem_only.mu_eos = 0.0;
        sem_spe.mu_eos = 0.0;
        spe_eos.mu_sem = 0.0;
        const ComboResult r_sem = craft_and_eval(p, rc, sem_only);
        const ComboResult r_ss = craft_and_eval(p, rc, sem_spe);
        const ComboResult r_se = craft_and_eval(p, rc, spe_eos);
        const bool ok = r_sem.agg.asr == 0.0 && r_ss.agg.mean_total < rep.adv_agg.mean_total &&
                        r_se.agg.mean_quality < 0.5 * rep.adv_agg.mean_quality;
        run.line("6 ", "loss-ablation", ok,
                 "{sem} asr " + fmt(r_sem.agg.asr) + "; {sem,spe} total " + fmt(r_ss.agg.mean_total) + " < full " +
                     fmt(rep.adv_agg.mean_total) + "; {spe,eos} quality " + fmt(r_se.agg.mean_quality) +
                     " < 0.5*full " + fmt(0.5 * rep.adv_agg.mean_quality));
    }

    // ---- criterion 7: special-token generality ----
    {
        std::cout << "[setup] crafting per tail token (" << htf::vocab::special_name(htf::vocab::IM_START) << ", "
                  << htf::vocab::special_name(htf::vocab::BOX_START) << ")...\n";
        att::AttackConfig im = ac0, box = ac0;
        im.tail_token = htf::vocab::IM_START;
        box.tail_token = htf::vocab::BOX_START;
        const ComboResult r_im = craft_and_eval(p, rc, im);
        const ComboResult r_box = craft_and_eval(p, rc, box);
        const double asr_bos = rep.adv_agg.asr;  // default tail token is BOS
        const bool ok = asr_bos >= 0.5 && r_im.agg.asr >= 0.5 && r_box.agg.asr >= 0.5;
        run.line("7 ", "token-generality", ok,
                 "asr bos " + fmt(asr_bos) + ", im_start " + fmt(r_im.agg.asr) + ", box_start " + fmt(r_box.agg.asr));
    }

    // ---- criterion 8: decoding strategy and token-limit studies ----
    {
        md::GenerationConfig nuc = rc.generation;
        nuc.strategy = md::GenerationConfig::Strategy::nucleus;
        nuc.top_p = 1.0;
        nuc.temperature = 1.0;
        const double asr_nuc = pl::asr_over(p.params, adv0, p.datasets[0], p.datasets[0].test_idx, nuc);
        const bool nuc_ok = std::abs(asr_nuc - rep.adv_agg.asr) <= 0.3;

        md::GenerationConfig doubled = rc.generation;
        doubled.max_new_tokens = 2 * rc.generation.max_new_tokens;
        const auto adv_rows = hrn::evaluate(p.params, adv0, p.datasets[0], doubled);
        const auto clean_rows = hrn::evaluate(p.params, p.features[0], p.datasets[0], doubled);
        const double adv_total_2x = hrn::aggregate(adv_rows).mean_total;
        const double clean_total_2x = hrn::aggregate(clean_rows).mean_total;
        const bool dbl_ok =
            adv_total_2x > rep.adv_agg.mean_total && std::abs(clean_total_2x - rep.clean_agg.mean_total) <= 1.0;
        run.line("8 ", "decode-and-limit", nuc_ok && dbl_ok,
                 "nucleus asr " + fmt(asr_nuc) + " vs greedy " + fmt(rep.adv_agg.asr) + "; 320-token adv total " +
                     fmt(adv_total_2x) + " > " + fmt(rep.adv_agg.mean_total) + ", clean " + fmt(clean_total_2x) +
                     " vs " + fmt(rep.clean_agg.mean_total));
    }

    // ---- criterion 9: transferability to an independently pretrained model ----
    {
        std::cout << "[setup] pretraining the transfer model (seed 8)...\n";
        cfg::RunConfig rt = rc;
        rt.transfer_model_seed = 8;
        const pl::Prepared pb = pl::prepare_transfer_model(rt, p);
        const hrn::AttackReport trep = hrn::run_transfer(p.features[0], pert.delta, pb.params, pb.datasets[0],
                                                         rc.generation);
        const bool ok = trep.adv_agg.asr <= 0.1;
        run.line("9 ", "transfer", ok, "foreign-model adv asr " + fmt(trep.adv_agg.asr) + " (clean " +
                                           fmt(trep.clean_agg.asr) + ")");
    }

    // ---- criterion 10: pixel-inversion fidelity ----
    {
        const att::InvertResult inv = att::invert_to_pixels(p.features[0], pert.delta, p.params.dims);
        const double asr_pix =
            pl::asr_over(p.params, inv.features, p.datasets[0], p.datasets[0].test_idx, rc.generation);
        const double gap = std::abs(asr_pix - rep.adv_agg.asr);
        run.line("10", "pixel-inversion", gap <= 0.1,
                 "pixel-path asr " + fmt(asr_pix) + " vs feature-path " + fmt(rep.adv_agg.asr) + ", gap " + fmt(gap));
    }

    // ---- criterion 11: byte-identical end-to-end reruns ----
    {
        std::cout << "[setup] full file-level run (craft both images + eval)...\n";
        bool mech_ok = pl::cmd_prepare(rc, log) == 0 && pl::cmd_craft(rc, log) == 0 &&
                       pl::cmd_eval(rc, {}, log) == 0;
        const auto first = dir_bytes(dir);
        std::cout << "[setup] rerunning from scratch for the determinism check...\n";
        fs::remove_all(dir);
        mech_ok = mech_ok && pl::cmd_prepare(rc, log) == 0 && pl::cmd_craft(rc, log) == 0 &&
                  pl::cmd_eval(rc, {}, log) == 0;
        const auto second = dir_bytes(dir);

        std::size_t mismatches = 0;
        std::string first_bad;
        for (const auto& [name, bytes] : first)
            if (!second.count(name) || second.at(name) != bytes) {
                if (!mismatches) first_bad = name;
                ++mismatches;
            }
        const bool ok = mech_ok && first.size() == second.size() && mismatches == 0 && !first.empty();
        run.line("11", "determinism", ok,
                 std::to_string(first.size()) + " files compared, " +
                     (mismatches ? std::to_string(mismatches) + " mismatched (first: " + first_bad + ")"
                                 : std::string("all byte-identical")));
    }

    // ---- supplementary trend properties ----
    {
        int good = 0, pairs = 0;
        std::vector<double> spe;
        spe.reserve(pert.trace.size());
        for (const auto& row : pert.trace) spe.push_back(row.loss_spe);
        const double frac = nonincreasing_window_frac(spe, 200, &good, &pairs);
        run.line("S1", "tail-pressure-trend", frac >= 0.8,
                 "windowed mean raw L_spe non-increasing in " + std::to_string(good) + "/" + std::to_string(pairs) +
                     " consecutive 200-iter windows");
    }
    {
        // Per-step losses are single-example CEs, so window means still jitter
        // once the model reaches its floor; the trend check allows 2% of the
        // overall drop as slack per window comparison.
        const auto& curve = p.pretrain_curve;
        int good = 0, pairs = 0;
        const double drop = curve.empty() ? 0.0 : curve.front() - curve.back();
        const double frac = nonincreasing_window_frac(curve, 50, &good, &pairs, 0.02 * std::max(0.0, drop));
        const bool ok = curve.size() > 500 && curve[500] < curve[0] && frac >= 0.8;
        run.line("S2", "pretrain-trend", ok,
                 "loss " + fmt(curve.front()) + " -> " + fmt(curve.back()) + ", 50-step windows trending down " +
                     std::to_string(good) + "/" + std::to_string(pairs));
    }
    {
        double mean_k = 0;
        std::size_t n = 0;
        for (const auto& ds : p.datasets)
            for (const auto& pr : ds.pairs) {
                mean_k += pr.K;
                ++n;
            }
        mean_k /= static_cast<double>(n);
        run.line("S3", "clean-response-length", mean_k >= 8.0 && mean_k <= 48.0,
                 "mean K " + fmt(mean_k) + " over " + std::to_string(n) + " captured pairs (target [8, 48])");
    }
    {
        // Greedy reproduction of the plain caption lines of the training
        // corpus (the stream/grounding lines stop at their first document
        // boundary by construction, so they are excluded from the measure).
        double frac_sum = 0;
        std::size_t n = 0;
        for (const auto& ex : dp::synthesize_corpus(p.images)) {
            bool plain = true;
            for (std::size_t i = 0; i + 1 < ex.target_ids.size(); ++i)
                plain &= !htf::vocab::is_special(ex.target_ids[i]);
            if (!plain || ex.prompt_ids.size() < 2 || htf::vocab::is_special(ex.prompt_ids[1])) continue;
            const md::GenResult g =
                md::generate(p.params, p.features[static_cast<std::size_t>(ex.image_id)], ex.prompt_ids, rc.generation);
            std::size_t match = 0;
            for (std::size_t i = 0; i < g.tokens.size() && i < ex.target_ids.size(); ++i)
                if (g.tokens[i] == ex.target_ids[i]) ++match;
            frac_sum += static_cast<double>(match) / static_cast<double>(ex.target_ids.size());
            ++n;
        }
        const double mean_frac = n == 0 ? 0.0 : frac_sum / static_cast<double>(n);
        run.line("S4", "caption-reproduction", mean_frac >= 0.8,
                 "mean greedy match " + fmt(mean_frac) + " over " + std::to_string(n) + " caption lines (target >= 0.8)");
    }

    std::cout << (run.failures == 0 ? "acceptance: all criteria passed" : "acceptance: FAILED") << " ("
              << fmt(secs_since(t_start)) << " s total)\n";
    return run.failures == 0 ? 0 : 1;
}
