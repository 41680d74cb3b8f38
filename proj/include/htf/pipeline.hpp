#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "htf/attack.hpp"
#include "htf/config.hpp"
#include "htf/harness.hpp"
#include "htf/pretrain.hpp"

namespace htf::pipeline {

namespace fs = std::filesystem;

// ------------------------------- prepared state -------------------------------

// Everything the downstream commands need, fully determined by the config.
struct Prepared {
    std::vector<std::pair<model::ImageSpec, dataprep::ImageDescriptor>> images;
    std::vector<Tensor> features;  // per image, processed clean features
    model::ToyVlmParams params;
    std::vector<dataprep::GuidingDataset> datasets;  // per image
    std::vector<double> pretrain_curve;
};

inline std::uint64_t image_seed(const config::RunConfig& rc, int image_id) {
    return mix_seed(rc.data_seed, static_cast<std::uint64_t>(image_id));
}

inline std::uint64_t craft_seed(const config::RunConfig& rc, int image_id) {
    return mix_seed(rc.attack_seed, static_cast<std::uint64_t>(image_id));
}

// Pure compute: images -> corpus -> pretrained params -> guiding datasets.
inline Prepared prepare(const config::RunConfig& rc) {
    rc.validate();
    Prepared p;
    p.images = dataprep::synthesize_images(rc.n_images, rc.data_seed);
    p.features.reserve(p.images.size());
    for (const auto& [img, desc] : p.images) p.features.push_back(model::process_image(img, rc.dims));

    const std::vector<dataprep::CorpusExample> corpus = dataprep::synthesize_corpus(p.images);
    model::ToyVlmParams params = model::ToyVlmParams::init(rc.dims, rc.model_seed);
    pretrain::PretrainResult tr = pretrain::pretrain_toy(std::move(params), corpus, p.features, rc.pretrain);
    p.params = std::move(tr.params);
    p.pretrain_curve = std::move(tr.loss_curve);

    for (int i = 0; i < rc.n_images; ++i) {
        const std::uint64_t seed = image_seed(rc, i);
        const auto prompts = dataprep::generate_prompts(p.images[static_cast<std::size_t>(i)].second,
                                                        rc.prompts_per_image, seed);
        auto pairs = dataprep::capture_responses(p.params, p.features[static_cast<std::size_t>(i)], prompts,
                                                 rc.response_cap);
        p.datasets.push_back(dataprep::split_dataset(i, std::move(pairs), seed));
    }
    return p;
}

// The same pipeline with an independently seeded and pretrained model; the
// prompt sets are shared (data seed) but responses are the second model's own.
inline Prepared prepare_transfer_model(const config::RunConfig& rc, const Prepared& base) {
    Prepared p;
    p.images = base.images;
    p.features = base.features;
    const std::vector<dataprep::CorpusExample> corpus = dataprep::synthesize_corpus(p.images);
    model::ToyVlmParams params = model::ToyVlmParams::init(rc.dims, rc.transfer_model_seed);
    pretrain::PretrainConfig pc = rc.pretrain;
    pc.seed = rc.transfer_model_seed;
    pretrain::PretrainResult tr = pretrain::pretrain_toy(std::move(params), corpus, p.features, pc);
    p.params = std::move(tr.params);
    p.pretrain_curve = std::move(tr.loss_curve);
    for (int i = 0; i < rc.n_images; ++i) {
        const std::uint64_t seed = image_seed(rc, i);
        const auto prompts = dataprep::generate_prompts(p.images[static_cast<std::size_t>(i)].second,
                                                        rc.prompts_per_image, seed);
        auto pairs = dataprep::capture_responses(p.params, p.features[static_cast<std::size_t>(i)], prompts,
                                                 rc.response_cap);
        p.datasets.push_back(dataprep::split_dataset(i, std::move(pairs), seed));
    }
    return p;
}

// ------------------------------- output directory -------------------------------

inline fs::path run_dir(const config::RunConfig& rc) {
    return fs::path(rc.output_dir) / ("ht-" + hex16(config::config_hash(rc)));
}

inline std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_file: cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Write-once: identical rewrites are silent no-ops, conflicting rewrites are
// errors — reruns with the same config must be byte-identical.
inline bool write_file_once(const fs::path& path, const std::string& bytes) {
    if (fs::exists(path)) {
        if (read_file(path) == bytes) return false;
        throw IoError("write_file_once: " + path.string() + " already exists with different content");
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("write_file_once: cannot open " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IoError("write_file_once: write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
    return true;
}

inline std::string to_pgm(const model::ImageSpec& img) {
    img.validate();
    std::string s = "P5\n16 16\n255\n";
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j)
            s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(img.pixels.at(i, j) * 255.0))));
    return s;
}

inline fs::path artifact_path(const fs::path& dir, int image_id) {
    return dir / ("artifact_" + std::to_string(image_id) + ".htadv");
}

inline fs::path state_path(const fs::path& dir, int image_id) {
    return dir / ("state_" + std::to_string(image_id) + ".htcr");
}

// ------------------------------- prepare outputs -------------------------------

inline nlohmann::json prepare_summary(const config::RunConfig& rc, const Prepared& p) {
    nlohmann::json per_image = nlohmann::json::array();
    double grand_k = 0.0;
    int grand_n = 0;
    for (const auto& ds : p.datasets) {
        double mean_k = 0.0;
        for (const auto& pr : ds.pairs) mean_k += pr.K;
        grand_k += mean_k;
        grand_n += static_cast<int>(ds.pairs.size());
        mean_k /= static_cast<double>(ds.pairs.size());
        const auto& desc = p.images[static_cast<std::size_t>(ds.image_id)].second;
        per_image.push_back({{"image_id", ds.image_id},
                             {"kind", desc.kind},
                             {"pairs", ds.pairs.size()},
                             {"opt", ds.opt_idx.size()},
                             {"test", ds.test_idx.size()},
                             {"mean_k", mean_k}});
    }
    return nlohmann::json{{"config_hash", hex16(config::config_hash(rc))},
                          {"params_hash", hex16(p.params.content_hash())},
                          {"pairs_total", grand_n},
                          {"mean_k", grand_n ? grand_k / grand_n : 0.0},
                          {"final_pretrain_loss", p.pretrain_curve.empty() ? -1.0 : p.pretrain_curve.back()},
                          {"images", per_image}};
}

inline void write_prepare_outputs(const fs::path& dir, const config::RunConfig& rc, const Prepared& p) {
    fs::create_directories(dir);
    write_file_once(dir / "config.json", config::to_json(rc).dump(2) + "\n");
    {
        std::ostringstream os;
        model::save_checkpoint(os, p.params);
        write_file_once(dir / "model.htvlm", os.str());
    }
    {
        std::ostringstream os;
        dataprep::write_datasets(os, p.datasets);
        write_file_once(dir / "dataset.jsonl", os.str());
    }
    {
        std::ostringstream os;
        os << "step,loss\n";
        for (std::size_t i = 0; i < p.pretrain_curve.size(); ++i)
            os << (i + 1) << ',' << fmt_double(p.pretrain_curve[i]) << "\n";
        write_file_once(dir / "pretrain_curve.csv", os.str());
    }
    for (const auto& [img, desc] : p.images)
        write_file_once(dir / ("image_" + std::to_string(desc.image_id) + "_clean.pgm"), to_pgm(img));
    write_file_once(dir / "prepare_summary.json", prepare_summary(rc, p).dump(2) + "\n");
}

// Load the prepared state back from a run directory, recomputing the cheap
// deterministic parts (images, features) and validating consistency.
inline std::optional<Prepared> try_load_prepared(const fs::path& dir, const config::RunConfig& rc) {
    if (!fs::exists(dir / "model.htvlm") || !fs::exists(dir / "dataset.jsonl")) return std::nullopt;
    Prepared p;
    p.images = dataprep::synthesize_images(rc.n_images, rc.data_seed);
    for (const auto& [img, desc] : p.images) p.features.push_back(model::process_image(img, rc.dims));
    {
        std::istringstream is(read_file(dir / "model.htvlm"));
        p.params = model::load_checkpoint(is);
    }
    {
        std::istringstream is(read_file(dir / "dataset.jsonl"));
        p.datasets = dataprep::read_datasets(is);
    }
    if (fs::exists(dir / "pretrain_curve.csv")) {
        std::istringstream is(read_file(dir / "pretrain_curve.csv"));
        std::string line;
        std::getline(is, line);  // header
        while (std::getline(is, line)) {
            const auto comma = line.find(',');
            if (comma == std::string::npos) continue;
            p.pretrain_curve.push_back(std::strtod(line.c_str() + comma + 1, nullptr));
        }
    }
    if (static_cast<int>(p.datasets.size()) != rc.n_images)
        throw ContractError("load_prepared: dataset.jsonl covers " + std::to_string(p.datasets.size()) +
                            " images but config requests " + std::to_string(rc.n_images));
    if (p.params.dims.d_model != rc.dims.d_model || p.params.dims.n_layers != rc.dims.n_layers ||
        p.params.dims.context_len != rc.dims.context_len)
        throw ContractError("load_prepared: checkpoint dims do not match the config");
    return p;
}

// Reuse a prior prepare if its outputs are on disk, otherwise compute and
// persist them — every command is self-sufficient on an empty directory.
inline Prepared ensure_prepared(const config::RunConfig& rc, const fs::path& dir, std::ostream& log) {
    if (auto loaded = try_load_prepared(dir, rc)) {
        log << "prepare: reusing outputs in " << dir.string() << "\n";
        return std::move(*loaded);
    }
    log << "prepare: pretraining " << rc.pretrain.steps << " steps over " << rc.n_images << " image(s)\n";
    Prepared p = prepare(rc);
    write_prepare_outputs(dir, rc, p);
    return p;
}

// ------------------------------- small shared helpers -------------------------------

inline Tensor apply_delta(const Tensor& clean, const Tensor& delta) {
    if (!clean.same_shape(delta)) throw ShapeError("apply_delta: shape mismatch");
    Tensor adv = clean;
    for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] += delta[i];
    return adv;
}

inline double asr_over(const model::ToyVlmParams& params, const Tensor& feats, const dataprep::GuidingDataset& ds,
                       const std::vector<int>& idx, const model::GenerationConfig& gc) {
    if (idx.empty()) return 0.0;
    int hits = 0;
    for (int i : idx) {
        model::GenResult g = model::generate(params, feats, ds.pairs[static_cast<std::size_t>(i)].prompt_tokens, gc);
        if (g.reached_limit) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

// Run fn(i) for i in [0, n) across up to `jobs` threads. Outputs must be
// per-index; ordering of side effects inside fn is the caller's problem.
template <typename Fn>
inline void for_each_image(int n, int jobs, Fn&& fn) {
    const int workers = std::max(1, std::min(jobs, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            try {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errs[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

// ------------------------------- commands -------------------------------

inline int cmd_prepare(const config::RunConfig& rc, std::ostream& log) {
    config::print_banner(log, rc);
    const fs::path dir = run_dir(rc);
    fs::create_directories(dir);
    Prepared p = prepare(rc);
    write_prepare_outputs(dir, rc, p);
    const nlohmann::json s = prepare_summary(rc, p);
    log << "prepare: wrote " << dir.string() << "\n";
    for (const auto& row : s.at("images"))
        log << "  image " << row.at("image_id").get<int>() << " (" << row.at("kind").get<std::string>() << "): "
            << row.at("pairs").get<int>() << " pairs, split " << row.at("opt").get<int>() << "/"
            << row.at("test").get<int>() << ", mean K " << fmt_double(row.at("mean_k").get<double>()) << "\n";
    log << "  total pairs " << s.at("pairs_total").get<int>() << ", mean K "
        << fmt_double(s.at("mean_k").get<double>()) << ", final pretrain loss "
        << fmt_double(s.at("final_pretrain_loss").get<double>()) << "\n";
    return 0;
}

struct CraftOutcome {
    int image_id = 0;
    bool aborted = false;
    std::string message;
};

// Craft one image: resumes from a state snapshot when present, checkpoints
// every `checkpoint_every` steps when requested, writes artifact + trace.
inline CraftOutcome craft_one(const config::RunConfig& rc, const fs::path& dir, const Prepared& p, int image_id,
                              int checkpoint_every) {
    CraftOutcome out;
    out.image_id = image_id;
    attack::AttackConfig cfg = rc.attack;
    cfg.seed = craft_seed(rc, image_id);
    const Tensor& clean = p.features[static_cast<std::size_t>(image_id)];
    const dataprep::GuidingDataset& ds = p.datasets[static_cast<std::size_t>(image_id)];
    const fs::path spath = state_path(dir, image_id);
    try {
        attack::CraftState st;
        if (fs::exists(spath)) {
            std::istringstream is(read_file(spath));
            st = attack::read_craft_state(is);
            out.message = "resumed from step " + std::to_string(st.next_step) + "; ";
        } else {
            st = attack::fresh_craft_state(clean, cfg);
        }
        if (checkpoint_every > 0) {
            while (st.next_step <= cfg.iterations) {
                st = attack::craft_steps(p.params, clean, ds, cfg, std::move(st),
                                         st.next_step + checkpoint_every - 1);
                std::ostringstream os;
                attack::write_craft_state(os, st);
                std::ofstream f(spath, std::ios::binary | std::ios::trunc);
                f << os.str();
                if (!f) throw IoError("craft: cannot write state snapshot " + spath.string());
            }
        } else {
            st = attack::craft_steps(p.params, clean, ds, cfg, std::move(st));
        }
        attack::Perturbation pert = attack::finish_craft(std::move(st), cfg);

        attack::InvertResult inv = attack::invert_to_pixels(clean, pert.delta, rc.dims);
        attack::Artifact art;
        art.cfg = cfg;
        art.image_id = image_id;
        art.final_losses = pert.final_losses;
        art.final_total = pert.final_total;
        art.delta = pert.delta;
        art.image = inv.image;
        art.asr_on_train = asr_over(p.params, apply_delta(clean, pert.delta), ds, ds.opt_idx, rc.generation);

        {
            std::ostringstream os;
            attack::write_artifact(os, art);
            write_file_once(artifact_path(dir, image_id), os.str());
        }
        {
            std::ostringstream os;
            attack::write_trace_csv(os, pert.trace);
            write_file_once(dir / ("trace_" + std::to_string(image_id) + ".csv"), os.str());
        }
        if (fs::exists(spath)) fs::remove(spath);
        double mab = 0.0;
        for (double v : pert.max_abs_per_step) mab = std::max(mab, v);
        out.message += "T=" + std::to_string(pert.iterations) + ", max|delta|=" + fmt_double(mab) +
                       ", asr_on_train=" + fmt_double(art.asr_on_train) + ", final losses sem/spe/eos " +
                       fmt_double(pert.final_losses[0]) + "/" + fmt_double(pert.final_losses[1]) + "/" +
                       fmt_double(pert.final_losses[2]);
    } catch (const attack::CraftAborted& e) {
        out.aborted = true;
        out.message = e.what();
        std::ostringstream os;
        attack::write_trace_csv(os, e.partial.trace);
        write_file_once(dir / ("trace_" + std::to_string(image_id) + ".partial.csv"), os.str());
    }
    return out;
}

inline int cmd_craft(const config::RunConfig& rc, std::ostream& log, int checkpoint_every = 0) {
    config::print_banner(log, rc);
    const fs::path dir = run_dir(rc);
    fs::create_directories(dir);
    Prepared p = ensure_prepared(rc, dir, log);
    std::vector<CraftOutcome> outcomes(static_cast<std::size_t>(rc.n_images));
    for_each_image(rc.n_images, rc.jobs, [&](int i) { outcomes[static_cast<std::size_t>(i)] = craft_one(rc, dir, p, i, checkpoint_every); });
    bool any_aborted = false;
    for (const CraftOutcome& o : outcomes) {
        log << "craft: image " << o.image_id << (o.aborted ? " ABORTED: " : ": ") << o.message << "\n";
        any_aborted = any_aborted || o.aborted;
    }
    return any_aborted ? 1 : 0;
}

inline int cmd_eval(const config::RunConfig& rc, const std::vector<std::string>& artifact_args, std::ostream& log) {
    config::print_banner(log, rc);
    const fs::path dir = run_dir(rc);
    fs::create_directories(dir);

    // Resolve artifacts strictly before any model work: explicit paths must
    // all exist; with none given, fall back to this run's own artifacts and
    // run clean-only if there are none at all.
    std::vector<fs::path> apaths;
    if (!artifact_args.empty()) {
        for (const std::string& a : artifact_args) {
            fs::path ap(a);
            if (!fs::exists(ap)) throw ConfigError("eval: artifact path does not exist: " + a);
            apaths.push_back(ap);
        }
    } else {
        for (int i = 0; i < rc.n_images; ++i)
            if (fs::exists(artifact_path(dir, i))) apaths.push_back(artifact_path(dir, i));
    }

    Prepared p = ensure_prepared(rc, dir, log);
    std::vector<attack::Artifact> artifacts;
    for (const fs::path& ap : apaths) {
        std::istringstream is(read_file(ap));
        artifacts.push_back(attack::read_artifact(is));
        const int id = artifacts.back().image_id;
        if (id < 0 || id >= rc.n_images)
            throw ConfigError("eval: artifact " + ap.string() + " references image " + std::to_string(id) +
                              " outside this run");
    }

    nlohmann::json combined = nlohmann::json::array();
    double sum_clean_asr = 0.0, sum_adv_asr = 0.0;
    const std::string suffix = artifacts.empty() ? "_clean" : "";

    if (artifacts.empty()) {
        log << "eval: no artifacts found; running clean-only evaluation\n";
        for (int i = 0; i < rc.n_images; ++i) {
            const auto rows = harness::evaluate(p.params, p.features[static_cast<std::size_t>(i)],
                                                p.datasets[static_cast<std::size_t>(i)], rc.generation);
            const harness::Aggregates agg = harness::aggregate(rows);
            std::ostringstream os;
            os << "condition,prompt_idx,total_tokens,visible_tokens,reached_limit,latency_proxy,quality\n";
            for (const harness::PromptResult& r : rows) {
                if (r.error) continue;
                os << "clean," << r.prompt_idx << ',' << r.total_tokens << ',' << r.visible_tokens << ','
                   << (r.reached_limit ? 1 : 0) << ',' << r.latency_proxy << ',' << fmt_double(r.quality) << "\n";
            }
            write_file_once(dir / ("report_" + std::to_string(i) + suffix + ".csv"), os.str());
            combined.push_back({{"image_id", i}, {"clean", harness::aggregates_json(agg)}});
            sum_clean_asr += agg.asr;
            log << "eval: image " << i << " clean asr " << fmt_double(agg.asr) << ", mean total "
                << fmt_double(agg.mean_total) << "\n";
        }
    } else {
        for (const attack::Artifact& art : artifacts) {
            const int i = art.image_id;
            const Tensor& clean = p.features[static_cast<std::size_t>(i)];
            const dataprep::GuidingDataset& ds = p.datasets[static_cast<std::size_t>(i)];
            const Tensor adv = apply_delta(clean, art.delta);
            harness::AttackReport rep = harness::make_report(p.params, clean, adv, ds, rc.generation);

            // Quantized-pixel path: evaluate on what the saved image yields.
            const Tensor pixel_feats = model::process_image(art.image, rc.dims);
            const double pixel_asr = harness::aggregate(harness::evaluate(p.params, pixel_feats, ds, rc.generation)).asr;

            {
                std::ostringstream os;
                harness::write_report_csv(os, rep);
                write_file_once(dir / ("report_" + std::to_string(i) + ".csv"), os.str());
            }
            {
                std::ostringstream os;
                harness::write_histogram_csv(os, harness::length_distributions(rep, rc.generation.max_new_tokens));
                write_file_once(dir / ("histogram_" + std::to_string(i) + ".csv"), os.str());
            }
            nlohmann::json s = harness::summary_json(rep);
            s["image_id"] = i;
            s["pixel_path"] = {{"asr", pixel_asr},
                               {"asr_gap", std::abs(pixel_asr - rep.adv_agg.asr)}};
            s["delta_max_abs"] = art.delta.max_abs();
            write_file_once(dir / ("summary_" + std::to_string(i) + ".json"), s.dump(2) + "\n");
            combined.push_back(s);
            sum_clean_asr += rep.clean_agg.asr;
            sum_adv_asr += rep.adv_agg.asr;
            log << "eval: image " << i << " clean asr " << fmt_double(rep.clean_agg.asr) << ", adv asr "
                << fmt_double(rep.adv_agg.asr) << " (pixel path " << fmt_double(pixel_asr) << "), length x"
                << fmt_double(rep.mult_total) << ", visible x" << fmt_double(rep.mult_visible) << ", quality "
                << fmt_double(rep.adv_agg.mean_quality) << "\n";
        }
    }

    const double n = combined.empty() ? 1.0 : static_cast<double>(combined.size());
    nlohmann::json top{{"images", combined},
                       {"mean_clean_asr", sum_clean_asr / n},
                       {"mean_adv_asr", sum_adv_asr / n},
                       {"mode", artifacts.empty() ? "clean_only" : "clean_vs_adversarial"}};
    write_file_once(dir / ("eval_summary" + suffix + ".json"), top.dump(2) + "\n");
    log << "eval: wrote " << (dir / ("eval_summary" + suffix + ".json")).string() << "\n";
    return 0;
}

// Obtain image-0's crafted delta for the fixed-perturbation studies: load
// this run's artifact when present, otherwise craft it now.
inline Tensor obtain_delta(const config::RunConfig& rc, const fs::path& dir, const Prepared& p, std::ostream& log) {
    const fs::path ap = artifact_path(dir, 0);
    if (fs::exists(ap)) {
        std::istringstream is(read_file(ap));
        attack::Artifact art = attack::read_artifact(is);
        log << "ablate: using crafted artifact " << ap.string() << "\n";
        return art.delta;
    }
    log << "ablate: no artifact on disk; crafting image 0 (" << rc.attack.iterations << " iterations)\n";
    attack::AttackConfig cfg = rc.attack;
    cfg.seed = craft_seed(rc, 0);
    return attack::craft(p.params, p.features[0], p.datasets[0], cfg).delta;
}

inline void ablation_csv(std::ostream& os, const std::vector<harness::AblationRow>& rows) {
    os << "row,failed,clean_asr,adv_asr,clean_total_mean,adv_total_mean,adv_visible_mean,adv_quality_mean,"
          "mult_total,mult_visible,error\n";
    for (const harness::AblationRow& r : rows) {
        if (r.failed) {
            os << r.name << ",1,,,,,,,,," << r.error << "\n";
            continue;
        }
        os << r.name << ",0," << fmt_double(r.report.clean_agg.asr) << ',' << fmt_double(r.report.adv_agg.asr) << ','
           << fmt_double(r.report.clean_agg.mean_total) << ',' << fmt_double(r.report.adv_agg.mean_total) << ','
           << fmt_double(r.report.adv_agg.mean_visible) << ',' << fmt_double(r.report.adv_agg.mean_quality) << ','
           << fmt_double(r.report.mult_total) << ',' << fmt_double(r.report.mult_visible) << ",\n";
    }
}

inline int cmd_ablate(const config::RunConfig& rc, const std::string& study, std::ostream& log) {
    config::print_banner(log, rc);
    const fs::path dir = run_dir(rc);
    fs::create_directories(dir);
    if (study == "transfer" && (rc.transfer_model_seed == 0 || rc.transfer_model_seed == rc.model_seed))
        throw ConfigError("ablate transfer: config must set a second model seed distinct from the primary one");
    Prepared p = ensure_prepared(rc, dir, log);
    attack::AttackConfig cfg = rc.attack;
    cfg.seed = craft_seed(rc, 0);

    if (study == "losses") {
        log << "ablate: crafting all 7 loss-term subsets on image 0\n";
        const auto rows = harness::run_ablation_losses(p.params, p.features[0], p.datasets[0], cfg, rc.generation);
        std::ostringstream os;
        ablation_csv(os, rows);
        write_file_once(dir / "ablate_losses.csv", os.str());
        for (const auto& r : rows)
            log << "  " << r.name << ": "
                << (r.failed ? "FAILED " + r.error
                             : "asr " + fmt_double(r.report.adv_agg.asr) + ", total " +
                                   fmt_double(r.report.adv_agg.mean_total) + ", quality " +
                                   fmt_double(r.report.adv_agg.mean_quality))
                << "\n";
    } else if (study == "tokens") {
        log << "ablate: crafting per candidate tail token on image 0\n";
        const auto rows =
            harness::run_ablation_token(p.params, p.features[0], p.datasets[0], cfg, rc.generation, rc.ablation_tokens);
        std::ostringstream os;
        ablation_csv(os, rows);
        write_file_once(dir / "ablate_tokens.csv", os.str());
        for (const auto& r : rows)
            log << "  " << r.name << ": "
                << (r.failed ? "FAILED " + r.error : "asr " + fmt_double(r.report.adv_agg.asr)) << "\n";
    } else if (study == "decode") {
        const Tensor delta = obtain_delta(rc, dir, p, log);
        const Tensor adv = apply_delta(p.features[0], delta);
        harness::DecodeStudy st = harness::run_ablation_decode(p.params, p.features[0], adv, p.datasets[0], rc.generation);
        std::vector<harness::AblationRow> rows(3);
        rows[0].name = "greedy";
        rows[0].report = std::move(st.greedy);
        rows[1].name = "nucleus";
        rows[1].report = std::move(st.nucleus);
        rows[2].name = "max_new_x2";
        rows[2].report = std::move(st.doubled);
        std::ostringstream os;
        ablation_csv(os, rows);
        write_file_once(dir / "ablate_decode.csv", os.str());
        for (const auto& r : rows)
            log << "  " << r.name << ": adv asr " << fmt_double(r.report.adv_agg.asr) << ", adv total "
                << fmt_double(r.report.adv_agg.mean_total) << ", clean total "
                << fmt_double(r.report.clean_agg.mean_total) << "\n";
    } else if (study == "transfer") {
        const Tensor delta = obtain_delta(rc, dir, p, log);
        log << "ablate: pretraining transfer model (seed " << rc.transfer_model_seed << ")\n";
        Prepared pb = prepare_transfer_model(rc, p);
        harness::AttackReport rep = harness::run_transfer(p.features[0], delta, pb.params, pb.datasets[0], rc.generation);
        std::vector<harness::AblationRow> rows(1);
        rows[0].name = "transfer";
        rows[0].report = std::move(rep);
        std::ostringstream os;
        ablation_csv(os, rows);
        write_file_once(dir / "ablate_transfer.csv", os.str());
        log << "  transfer: adv asr " << fmt_double(rows[0].report.adv_agg.asr) << " (clean "
            << fmt_double(rows[0].report.clean_agg.asr) << ")\n";
    } else {
        throw ConfigError("ablate: unknown study '" + study + "' (expected losses|tokens|decode|transfer)");
    }
    log << "ablate: wrote " << (dir / ("ablate_" + study + ".csv")).string() << "\n";
    return 0;
}

}  // namespace htf::pipeline
