#include "flexdiff/flexdiff.h"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace {

struct ConfigArgs {
    std::string file;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> flags;  // applied after file and --set
};

void print_line(void*, const char* line) {
    std::fputs(line, stdout);
    std::fputc('\n', stdout);
    std::fflush(stdout);
}

int report(flexdiff_status st) {
    if (st == FLEXDIFF_OK) return 0;
    std::fprintf(stderr, "error (%s): %s\n", flexdiff_status_name(st), flexdiff_last_error());
    return flexdiff_exit_code(st);
}

class Config {
public:
    ~Config() { flexdiff_config_free(cfg_); }

    flexdiff_status build(const ConfigArgs& args) {
        flexdiff_status st = args.file.empty() ? flexdiff_config_default(&cfg_)
                                               : flexdiff_config_load(args.file.c_str(), &cfg_);
        if (st != FLEXDIFF_OK) return st;
        for (const auto& s : args.sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                std::fprintf(stderr, "error (usage): --set expects key=value, got '%s'\n", s.c_str());
                return FLEXDIFF_ERR_USAGE;
            }
            st = flexdiff_config_set(cfg_, s.substr(0, eq).c_str(), s.substr(eq + 1).c_str());
            if (st != FLEXDIFF_OK) return st;
        }
        for (const auto& [k, v] : args.flags) {
            st = flexdiff_config_set(cfg_, k.c_str(), v.c_str());
            if (st != FLEXDIFF_OK) return st;
        }
        return FLEXDIFF_OK;
    }

    const flexdiff_config* get() const { return cfg_; }

private:
    flexdiff_config* cfg_ = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flexdiff: residual velocity diffusion for 2D turbulence fields"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", flexdiff_version());

    ConfigArgs cargs;
    app.add_option("-c,--config", cargs.file, "run configuration file (JSON)")->check(CLI::ExistingFile);
    app.add_option("--set", cargs.sets, "override a config value, e.g. --set train.steps=200");

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate one vorticity trajectory");
    std::string sim_out;
    std::optional<int> sim_n, sim_steps, sim_save;
    std::optional<uint64_t> sim_seed;
    std::optional<double> sim_nu, sim_dt;
    bool inviscid = false;
    sim->add_option("-o,--out", sim_out, "output dataset file")->required();
    sim->add_option("--n", sim_n, "grid size");
    sim->add_option("--steps", sim_steps, "number of saved intervals");
    sim->add_option("--save-every", sim_save, "solver steps per saved snapshot");
    sim->add_option("--seed", sim_seed, "initial-condition seed");
    sim->add_option("--viscosity", sim_nu, "kinematic viscosity");
    sim->add_option("--dt", sim_dt, "solver time step");
    sim->add_flag("--inviscid", inviscid, "set the viscosity to zero");

    // make-dataset
    auto* mk = app.add_subcommand("make-dataset", "split trajectories into train/test files");
    std::string mk_out;
    std::vector<std::string> mk_inputs;
    mk->add_option("-o,--out", mk_out, "output dataset directory")->required();
    mk->add_option("trajectories", mk_inputs, "trajectory files; the last one is held out when several are given")
        ->required()
        ->check(CLI::ExistingFile);

    // train
    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_data, tr_out, tr_resume, tr_preset;
    int64_t tr_stop = 0;
    std::optional<int> tr_steps;
    std::optional<uint64_t> tr_seed;
    tr->add_option("-d,--data", tr_data, "dataset directory")->required();
    tr->add_option("-o,--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    tr->add_option("--stop-after", tr_stop, "save and stop once this step is reached");
    tr->add_option("--steps", tr_steps, "optimizer steps");
    tr->add_option("--seed", tr_seed, "training seed");
    tr->add_option("--preset", tr_preset, "model preset");

    // sample
    auto* sa = app.add_subcommand("sample", "sample predictions for the test split");
    std::string sa_ckpt, sa_data, sa_out, sa_task = "sr";
    bool sa_rollout = false;
    std::optional<int> sa_steps, sa_ens;
    std::optional<uint64_t> sa_seed;
    sa->add_option("--checkpoint", sa_ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
    sa->add_option("-d,--data", sa_data, "dataset directory")->required();
    sa->add_option("-o,--out", sa_out, "output directory")->required();
    sa->add_option("--task", sa_task, "sr or fc")->check(CLI::IsMember({"sr", "fc"}));
    sa->add_flag("--rollout", sa_rollout, "autoregressive forecast rollout (fc)");
    sa->add_option("--steps", sa_steps, "DDIM steps");
    sa->add_option("--ensemble", sa_ens, "ensemble members");
    sa->add_option("--seed", sa_seed, "sampling seed");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "compute metrics for predictions");
    std::string ev_pred, ev_truth, ev_std, ev_base, ev_out;
    ev->add_option("--pred", ev_pred, "predicted fields")->required()->check(CLI::ExistingFile);
    ev->add_option("--truth", ev_truth, "ground truth fields")->required()->check(CLI::ExistingFile);
    ev->add_option("--std", ev_std, "ensemble std fields")->check(CLI::ExistingFile);
    ev->add_option("--baseline", ev_base, "baseline fields")->check(CLI::ExistingFile);
    ev->add_option("-o,--out", ev_out, "output directory")->required();

    // theory
    auto* th = app.add_subcommand("theory", "Fisher-divergence curves and Gaussian identity checks");
    std::string th_data, th_out;
    th->add_option("-d,--data", th_data, "dataset directory")->required();
    th->add_option("-o,--out", th_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    int threads = 1;
    if (const int rc = report(flexdiff_apply_thread_limit(&threads))) return rc;

    auto flag = [&](const std::string& key, const auto& opt) {
        if (!opt) return;
        std::ostringstream v;
        v.precision(17);
        v << *opt;
        cargs.flags.emplace_back(key, v.str());
    };
    if (*sim) {
        flag("sim.n", sim_n);
        flag("sim.steps", sim_steps);
        flag("sim.save_every", sim_save);
        flag("sim.seed", sim_seed);
        flag("sim.dt", sim_dt);
        flag("sim.viscosity", sim_nu);
        if (inviscid) cargs.flags.emplace_back("sim.viscosity", "0");
    } else if (*tr) {
        if (!tr_preset.empty()) cargs.flags.emplace_back("model.preset", "\"" + tr_preset + "\"");
        flag("train.steps", tr_steps);
        flag("train.seed", tr_seed);
    } else if (*sa) {
        flag("sample.n_steps", sa_steps);
        flag("sample.ensemble", sa_ens);
        flag("sample.seed", sa_seed);
    }

    Config cfg;
    if (const int rc = report(cfg.build(cargs))) return rc;

    flexdiff_status st = FLEXDIFF_OK;
    if (*sim) {
        st = flexdiff_simulate(cfg.get(), sim_out.c_str(), print_line, nullptr);
    } else if (*mk) {
        std::vector<const char*> paths;
        for (const auto& p : mk_inputs) paths.push_back(p.c_str());
        st = flexdiff_make_dataset(cfg.get(), paths.data(), paths.size(), mk_out.c_str(), print_line, nullptr);
    } else if (*tr) {
        st = flexdiff_train(cfg.get(), tr_data.c_str(), tr_out.c_str(), tr_resume.empty() ? nullptr : tr_resume.c_str(),
                            tr_stop, print_line, nullptr);
    } else if (*sa) {
        st = flexdiff_sample(cfg.get(), sa_ckpt.c_str(), sa_data.c_str(), sa_out.c_str(),
                             sa_task == "fc" ? FLEXDIFF_TASK_FC : FLEXDIFF_TASK_SR, sa_rollout ? 1 : 0, print_line,
                             nullptr);
    } else if (*ev) {
        st = flexdiff_evaluate(cfg.get(), ev_pred.c_str(), ev_truth.c_str(), ev_std.empty() ? nullptr : ev_std.c_str(),
                               ev_base.empty() ? nullptr : ev_base.c_str(), ev_out.c_str(), print_line, nullptr);
    } else if (*th) {
        st = flexdiff_theory(cfg.get(), th_data.c_str(), th_out.c_str(), print_line, nullptr);
    }
    return report(st);
}
