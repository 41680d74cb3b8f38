// htlab: deterministic end-to-end driver for the hidden-tail laboratory.
//
//   htlab prepare --config cfg.json            synthesize, pretrain, capture
//   htlab craft   --config cfg.json            craft one perturbation per image
//   htlab eval    --config cfg.json [paths]    clean vs adversarial report
//   htlab ablate  --config cfg.json --study s  losses|tokens|decode|transfer
//
// All outputs land in <output_dir>/ht-<config-hash>/ and are write-once.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "htf/pipeline.hpp"

namespace {

htf::config::RunConfig load(const std::string& cfg_path, const std::string& out_override, int jobs_override) {
    htf::config::RunConfig rc =
        cfg_path.empty() ? htf::config::finalize(htf::config::RunConfig{}) : htf::config::load_file(cfg_path);
    if (!out_override.empty()) rc.output_dir = out_override;
    if (jobs_override > 0) rc.jobs = jobs_override;
    rc.validate();
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hidden-tail laboratory: craft and measure resource-consumption perturbations"};
    app.require_subcommand(1);

    std::string cfg_path;
    std::string out_override;
    int jobs_override = 0;
    int checkpoint_every = 0;
    std::string study = "losses";
    std::vector<std::string> artifact_args;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", cfg_path, "JSON run configuration (defaults used when omitted)");
        sub->add_option("--out", out_override, "override output directory");
        sub->add_option("--jobs", jobs_override, "parallel image workers")->check(CLI::PositiveNumber);
    };

    CLI::App* prep = app.add_subcommand("prepare", "synthesize images, pretrain, capture the guiding datasets");
    add_common(prep);

    CLI::App* craft = app.add_subcommand("craft", "run PGD crafting for every image");
    add_common(craft);
    craft->add_option("--checkpoint-every", checkpoint_every,
                      "snapshot craft state every N steps (resumable)")->check(CLI::NonNegativeNumber);

    CLI::App* ev = app.add_subcommand("eval", "evaluate clean vs adversarial features on the held-out split");
    add_common(ev);
    ev->add_option("artifacts", artifact_args, "explicit artifact files (default: this run's own)");

    CLI::App* abl = app.add_subcommand("ablate", "run one comparison study");
    add_common(abl);
    abl->add_option("--study", study, "losses|tokens|decode|transfer")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const htf::config::RunConfig rc = load(cfg_path, out_override, jobs_override);
        if (prep->parsed()) return htf::pipeline::cmd_prepare(rc, std::cout);
        if (craft->parsed()) return htf::pipeline::cmd_craft(rc, std::cout, checkpoint_every);
        if (ev->parsed()) return htf::pipeline::cmd_eval(rc, artifact_args, std::cout);
        if (abl->parsed()) return htf::pipeline::cmd_ablate(rc, study, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
