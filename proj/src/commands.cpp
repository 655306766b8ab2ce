#include "flexdiff/commands.hpp"

#include "binio.hpp"
#include "flexdiff/dataio.hpp"
#include "flexdiff/error.hpp"
#include "flexdiff/metrics.hpp"
#include "flexdiff/simulator.hpp"
#include "flexdiff/theory.hpp"
#include "flexdiff/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

extern "C" void openblas_set_num_threads(int);

namespace flexdiff {

using nlohmann::json;
namespace fs = std::filesystem;

int apply_thread_limit() {
    int n = 1;
    if (const char* env = std::getenv("FLEXDIFF_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        require(end != env && *end == '\0' && v >= 1 && v <= 1024, ErrorKind::Usage,
                std::string("FLEXDIFF_THREADS must be a positive integer, got '") + env + "'");
        n = static_cast<int>(v);
    }
    openblas_set_num_threads(n);
    return n;
}

namespace {

void say(const LogFn& log, const std::string& line) {
    if (log) log(line);
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

void ensure_dir(const std::string& dir) {
    require(!dir.empty(), ErrorKind::Usage, "output directory must be given");
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::Io, "cannot create directory '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    detail::write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

json file_entry(const std::string& path) {
    const std::vector<uint8_t> bytes = detail::read_file(path);
    return json{{"path", path},
                {"bytes", bytes.size()},
                {"fnv1a", config_hash(std::string(bytes.begin(), bytes.end()))}};
}

void write_manifest(const std::string& path, const std::string& command, const RunConfig& config,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    json extra = json::object()) {
    const std::string text = run_config_to_text(config);
    json m{{"command", command},
           {"version", kVersion},
           {"config_hash", config_hash(text)},
           {"config", json::parse(text)},
           {"inputs", json::array()},
           {"outputs", json::array()}};
    for (const auto& p : inputs) m["inputs"].push_back(file_entry(p));
    for (const auto& p : outputs) m["outputs"].push_back(file_entry(p));
    if (!extra.empty()) m["results"] = std::move(extra);
    write_text(path, m.dump(2) + "\n");
}

struct DatasetIndex {
    std::string dir;
    std::vector<std::string> train;
    std::string test;
    double norm_std = 1.0;
    int factor = 4;
    int horizon = 1;

    std::string index_path() const { return join(dir, "dataset.json"); }
};

DatasetIndex read_index(const std::string& dir) {
    DatasetIndex idx;
    idx.dir = dir;
    const std::vector<uint8_t> bytes = detail::read_file(idx.index_path());
    try {
        const json j = json::parse(bytes.begin(), bytes.end());
        for (const auto& name : j.at("train")) idx.train.push_back(join(dir, name.get<std::string>()));
        idx.test = join(dir, j.at("test").get<std::string>());
        idx.norm_std = j.at("norm_std").get<double>();
        idx.factor = j.at("factor").get<int>();
        idx.horizon = j.at("horizon").get<int>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, "malformed dataset index '" + idx.index_path() + "': " + e.what());
    }
    require(idx.norm_std > 0.0, ErrorKind::Data, "dataset norm_std must be > 0");
    return idx;
}

Dataset slice(const Dataset& src, size_t begin, size_t end) {
    Dataset out;
    out.header = src.header;
    out.snapshots.assign(src.snapshots.begin() + static_cast<std::ptrdiff_t>(begin),
                         src.snapshots.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

Dataset with_snapshots(const DatasetHeader& header, std::vector<Tensor> snapshots) {
    Dataset out;
    out.header = header;
    out.snapshots = std::move(snapshots);
    return out;
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * b;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::vector<Dataset> read_all(const std::vector<std::string>& paths) {
    std::vector<Dataset> out;
    for (const auto& p : paths) out.push_back(read_dataset(p));
    return out;
}

} // namespace

void cmd_simulate(const RunConfig& config, const std::string& output, const LogFn& log) {
    require(!output.empty(), ErrorKind::Usage, "simulate needs an output path");
    config.sim.validate();
    double e0 = 0.0, z0 = 0.0, e1 = 0.0, z1 = 0.0;
    bool first = true;
    const Dataset ds = simulate(config.sim, [&](const SimState& s) {
        if (first) {
            e0 = s.energy;
            z0 = s.enstrophy;
            first = false;
        }
        e1 = s.energy;
        z1 = s.enstrophy;
    });
    write_dataset(output, ds);
    const double de = e0 > 0.0 ? (e1 - e0) / e0 : 0.0;
    const double dz = z0 > 0.0 ? (z1 - z0) / z0 : 0.0;
    say(log, "snapshots " + std::to_string(ds.snapshots.size()) + ", re_tag " + fmt(ds.header.re_tag));
    say(log, "energy " + fmt(e0) + " -> " + fmt(e1) + " (relative change " + fmt(de) + ")");
    say(log, "enstrophy " + fmt(z0) + " -> " + fmt(z1) + " (relative change " + fmt(dz) + ")");
    write_manifest(output + ".manifest.json", "simulate", config, {}, {output},
                   json{{"snapshots", ds.snapshots.size()},
                        {"re_tag", ds.header.re_tag},
                        {"energy_initial", e0},
                        {"energy_final", e1},
                        {"enstrophy_initial", z0},
                        {"enstrophy_final", z1}});
}

void cmd_make_dataset(const RunConfig& config, const std::vector<std::string>& trajectories,
                      const std::string& out_dir, const LogFn& log) {
    require(!trajectories.empty(), ErrorKind::Usage, "make-dataset needs at least one trajectory");
    const DataConfig& dc = config.data;
    require(dc.factor == 2 || dc.factor == 4 || dc.factor == 8, ErrorKind::Config,
            "data.factor must be 2, 4 or 8");
    require(dc.horizon >= 1, ErrorKind::Config, "data.horizon must be >= 1");
    require(dc.test_snapshots >= 1 && dc.skip_initial >= 0, ErrorKind::Config,
            "data.test_snapshots must be >= 1 and data.skip_initial >= 0");
    ensure_dir(out_dir);

    std::vector<Dataset> all = read_all(trajectories);
    for (Dataset& d : all) {
        require(d.header.nx == all.front().header.nx && d.header.ny == all.front().header.ny,
                ErrorKind::Data, "trajectories have different grid sizes");
        require(d.snapshots.size() > static_cast<size_t>(dc.skip_initial), ErrorKind::Data,
                "trajectory shorter than data.skip_initial");
        d = slice(d, static_cast<size_t>(dc.skip_initial), d.snapshots.size());
    }

    std::vector<Dataset> train;
    Dataset test;
    const auto hold = static_cast<size_t>(dc.test_snapshots);
    if (all.size() >= 2) {
        train.assign(all.begin(), all.end() - 1);
        const Dataset& last = all.back();
        require(last.snapshots.size() >= hold, ErrorKind::Data,
                "test trajectory has fewer than data.test_snapshots snapshots");
        test = slice(last, last.snapshots.size() - hold, last.snapshots.size());
    } else {
        const Dataset& only = all.front();
        require(only.snapshots.size() >= hold + static_cast<size_t>(dc.horizon) + 2, ErrorKind::Data,
                "a single trajectory needs more than data.test_snapshots + horizon + 1 snapshots");
        train.push_back(slice(only, 0, only.snapshots.size() - hold));
        test = slice(only, only.snapshots.size() - hold, only.snapshots.size());
    }

    double norm_std = dc.norm_std;
    if (norm_std <= 0.0) {
        double ss = 0.0;
        int64_t count = 0;
        for (const Dataset& d : train) {
            for (size_t i = 0; i < d.snapshots.size(); ++i) {
                const ResidualSample sr = make_sr_residual(d.field(i), dc.factor, {}, {dc.prefilter});
                for (float v : sr.residual.values()) ss += static_cast<double>(v) * v;
                count += sr.residual.numel();
                if (i >= 1 && i + static_cast<size_t>(dc.horizon) < d.snapshots.size()) {
                    const ResidualSample fc = make_fc_residual(
                        d.field(i - 1), d.field(i), d.field(i + static_cast<size_t>(dc.horizon)), dc.horizon);
                    for (float v : fc.residual.values()) ss += static_cast<double>(v) * v;
                    count += fc.residual.numel();
                }
            }
        }
        require(count > 0, ErrorKind::Data, "no training residuals");
        norm_std = std::sqrt(ss / static_cast<double>(count));
        require(norm_std > 0.0, ErrorKind::Data, "training residuals are identically zero");
    }

    json index{{"train", json::array()},
               {"test", "test.flexds"},
               {"norm_std", norm_std},
               {"factor", dc.factor},
               {"horizon", dc.horizon}};
    std::vector<std::string> outputs;
    for (size_t k = 0; k < train.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "train_%03zu.flexds", k);
        train[k].header.norm_std = norm_std;
        write_dataset(join(out_dir, name), train[k]);
        index["train"].push_back(name);
        outputs.push_back(join(out_dir, name));
    }
    test.header.norm_std = norm_std;
    write_dataset(join(out_dir, "test.flexds"), test);
    outputs.push_back(join(out_dir, "test.flexds"));
    write_text(join(out_dir, "dataset.json"), index.dump(2) + "\n");
    outputs.push_back(join(out_dir, "dataset.json"));

    size_t n_train = 0;
    for (const Dataset& d : train) n_train += d.snapshots.size();
    say(log, "train snapshots " + std::to_string(n_train) + " in " + std::to_string(train.size()) +
                 " file(s), test snapshots " + std::to_string(test.snapshots.size()));
    say(log, "residual norm_std " + fmt(norm_std));
    write_manifest(join(out_dir, "manifest.json"), "make-dataset", config, trajectories, outputs,
                   json{{"norm_std", norm_std}, {"train_snapshots", n_train},
                        {"test_snapshots", test.snapshots.size()}});
}

namespace {

void build_pools(const std::vector<Dataset>& train, const DatasetIndex& idx, const FlexConfig& flex,
                 bool prefilter, ResidualPool& sr, ResidualPool& fc) {
    const Normalization norm{0.0, idx.norm_std};
    for (const Dataset& d : train) {
        for (size_t i = 0; i < d.snapshots.size(); ++i) {
            if (flex.has_task(Task::SR)) sr.add(make_sr_residual(d.field(i), idx.factor, norm, {prefilter}));
            if (flex.has_task(Task::FC) && i >= 1 && i + static_cast<size_t>(idx.horizon) < d.snapshots.size()) {
                fc.add(make_fc_residual(d.field(i - 1), d.field(i),
                                        d.field(i + static_cast<size_t>(idx.horizon)), idx.horizon, norm));
            }
        }
    }
    require(!flex.has_task(Task::SR) || !sr.empty(), ErrorKind::Data, "no SR training samples");
    require(!flex.has_task(Task::FC) || !fc.empty(), ErrorKind::Data,
            "no FC training samples (trajectories too short for the horizon)");
}

} // namespace

void cmd_train(const RunConfig& config, const std::string& dataset_dir, const std::string& out_dir,
               const TrainRunOptions& options, const LogFn& log) {
    ensure_dir(out_dir);
    const DatasetIndex idx = read_index(dataset_dir);
    const FlexConfig& flex = config.model.flex;
    const bool both = flex.has_task(Task::SR) && flex.has_task(Task::FC);
    require(both == config.train.multitask, ErrorKind::Config,
            "train.multitask must be true exactly when the model has both SR and FC tasks");

    const std::vector<Dataset> train_sets = read_all(idx.train);
    ResidualPool sr, fc;
    build_pools(train_sets, idx, flex, config.data.prefilter, sr, fc);
    say(log, "pool sizes: sr " + std::to_string(sr.size()) + ", fc " + std::to_string(fc.size()));

    TrainConfig tc = config.train;
    std::optional<TrainState> state;
    std::vector<std::string> inputs = idx.train;
    inputs.push_back(idx.index_path());
    if (!options.resume.empty()) {
        TrainConfig stored;
        state.emplace(load_checkpoint(options.resume, flex, &stored));
        require(train_config_to_text(stored) == train_config_to_text(tc), ErrorKind::Config,
                "train section differs from the one stored in the checkpoint being resumed");
        inputs.push_back(options.resume);
        say(log, "resuming at step " + std::to_string(state->step));
    } else {
        state.emplace(TrainState::create(flex, tc));
    }
    say(log, "parameters " + std::to_string(state->model.parameter_count()));

    const int64_t until = options.stop_after > 0 ? std::min<int64_t>(options.stop_after, tc.steps) : tc.steps;
    const NoiseSchedule schedule = config.schedule.make();
    std::vector<StepReport> rows;
    double window = 0.0;
    int window_n = 0;
    train(*state, sr, fc, schedule, tc, until, [&](const StepReport& r) {
        rows.push_back(r);
        window += r.loss;
        ++window_n;
        if (r.step % tc.log_every == 0 || r.step == until) {
            say(log, "step " + std::to_string(r.step) + " loss " + fmt(window / window_n) + " lr " + fmt(r.lr));
            window = 0.0;
            window_n = 0;
        }
    });

    const std::string ckpt = join(out_dir, "checkpoint.bin");
    save_checkpoint(*state, tc, ckpt);
    const std::string log_path = join(out_dir, "train_log.csv");
    if (!options.resume.empty() && fs::exists(log_path)) {
        std::ofstream out(log_path, std::ios::app);
        require(static_cast<bool>(out), ErrorKind::Io, "cannot append to '" + log_path + "'");
        out.precision(9);
        for (const auto& r : rows) {
            out << r.step << ',' << r.task << ',' << r.loss << ',' << r.lr << ',' << r.ema_gap << '\n';
        }
    } else {
        write_train_log(log_path, rows);
    }
    write_manifest(join(out_dir, "manifest.json"), "train", config, inputs, {ckpt, log_path},
                   json{{"step", state->step}, {"last_loss", state->last_loss},
                        {"parameters", state->model.parameter_count()}});
}

namespace {

struct ResidualPrediction {
    Tensor mean;             // normalized units
    std::vector<double> std; // normalized units, empty for a single member
};

ResidualPrediction predict_whole(const VelocityPredictor& predictor, const ConditioningContext& ctx,
                                 const Shape& shape, const SampleConfig& sc,
                                 const NoiseSchedule& schedule, uint64_t seed) {
    ResidualPrediction out;
    if (sc.ensemble == 1) {
        out.mean = sample(predictor, ctx, shape, sc.n_steps, schedule, seed, sc.grid);
        return out;
    }
    EnsembleStats stats = ensemble(predictor, ctx, shape, sc.n_steps, sc.ensemble, schedule, seed, sc.grid);
    out.mean = Tensor(shape);
    for (int64_t i = 0; i < out.mean.numel(); ++i) {
        out.mean[i] = static_cast<float>(stats.mean[static_cast<size_t>(i)]);
    }
    out.std = std::move(stats.std);
    return out;
}

ResidualPrediction predict_residual(const VelocityPredictor& predictor, const ResidualSample& item,
                                    const SampleConfig& sc, const NoiseSchedule& schedule,
                                    uint64_t seed) {
    const Shape& shape = item.residual.shape();
    const int64_t H = shape[0], W = shape[1];
    if (sc.patch <= 0 || (sc.patch >= H && sc.patch >= W)) {
        return predict_whole(predictor, item.context, shape, sc, schedule, seed);
    }
    const int64_t stride = sc.stride > 0 ? sc.stride : std::max(1, sc.patch / 2);
    const std::vector<Patch> tiles = extract_patches(item.residual, sc.patch, stride);
    std::vector<Patch> means, stds;
    for (size_t k = 0; k < tiles.size(); ++k) {
        const ResidualSample crop = crop_sample(item, tiles[k].row, tiles[k].col, sc.patch);
        ResidualPrediction p = predict_whole(predictor, crop.context, crop.residual.shape(), sc, schedule,
                                             mix_seed(seed, k, 1));
        means.push_back({p.mean, tiles[k].row, tiles[k].col});
        if (!p.std.empty()) {
            Tensor s(p.mean.shape());
            for (int64_t i = 0; i < s.numel(); ++i) s[i] = static_cast<float>(p.std[static_cast<size_t>(i)]);
            stds.push_back({std::move(s), tiles[k].row, tiles[k].col});
        }
    }
    const StitchMode mode = stride < sc.patch ? StitchMode::CosineTaper : StitchMode::Direct;
    ResidualPrediction out;
    out.mean = stitch(means, H, W, mode);
    if (!stds.empty()) {
        const Tensor s = stitch(stds, H, W, mode);
        out.std.assign(s.values().begin(), s.values().end());
    }
    return out;
}

Tensor add_physical(const Tensor& base, const Tensor& normalized, double norm_std) {
    Tensor out(base.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<float>(base[i] + static_cast<double>(normalized[i]) * norm_std);
    }
    return out;
}

Tensor std_physical(const std::vector<double>& std, const Shape& shape, double norm_std) {
    Tensor out(shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<float>(std[static_cast<size_t>(i)] * norm_std);
    }
    return out;
}

void write_rollout_csv(const std::string& path, const std::vector<RolloutStep>& steps) {
    std::ostringstream s;
    s.precision(9);
    s << "step,pcc,rfne,persistence_pcc\n";
    for (const auto& r : steps) s << r.step << ',' << r.pcc << ',' << r.rfne << ',' << r.persistence_pcc << '\n';
    write_text(path, s.str());
}

} // namespace

void cmd_sample(const RunConfig& config, const std::string& checkpoint, const std::string& dataset_dir,
                const std::string& out_dir, const SampleRunOptions& options, const LogFn& log) {
    ensure_dir(out_dir);
    const DatasetIndex idx = read_index(dataset_dir);
    const Dataset test = read_dataset(idx.test);
    TrainState state = load_checkpoint(checkpoint, config.model.flex);
    const FlexModel model = config.sample.use_ema ? state.ema_model() : std::move(state.model);
    require(model.config().has_task(options.task), ErrorKind::Config,
            std::string("the checkpoint model was not trained for task ") + to_string(options.task));
    const VelocityPredictor predictor = model.predictor();
    const NoiseSchedule schedule = config.schedule.make();
    const SampleConfig& sc = config.sample;
    const Normalization norm{0.0, idx.norm_std};
    const size_t n = test.snapshots.size();

    std::vector<Tensor> preds, truths, baselines, stds;
    json results{{"task", to_string(options.task)}, {"ensemble", sc.ensemble}, {"n_steps", sc.n_steps}};
    std::vector<std::string> outputs;

    if (options.task == Task::SR) {
        for (size_t i = 0; i < n; ++i) {
            const Field f = test.field(i);
            const ResidualSample item = make_sr_residual(f, idx.factor, norm, {config.data.prefilter});
            const Tensor base = residual_base(item);
            const ResidualPrediction p = predict_residual(predictor, item, sc, schedule, mix_seed(sc.seed, i));
            preds.push_back(add_physical(base, p.mean, idx.norm_std));
            if (!p.std.empty()) stds.push_back(std_physical(p.std, base.shape(), idx.norm_std));
            truths.push_back(f.values);
            baselines.push_back(base);
        }
    } else if (!options.rollout) {
        const auto h = static_cast<size_t>(idx.horizon);
        require(n >= h + 2, ErrorKind::Data, "test set too short for single-step forecasts");
        for (size_t i = 1; i + h < n; ++i) {
            const ResidualSample item =
                make_fc_residual(test.field(i - 1), test.field(i), test.field(i + h), idx.horizon, norm);
            const Tensor& current = test.snapshots[i];
            const ResidualPrediction p = predict_residual(predictor, item, sc, schedule, mix_seed(sc.seed, i));
            preds.push_back(add_physical(current, p.mean, idx.norm_std));
            if (!p.std.empty()) stds.push_back(std_physical(p.std, current.shape(), idx.norm_std));
            truths.push_back(test.snapshots[i + h]);
            baselines.push_back(current);
        }
    } else {
        require(idx.horizon == 1, ErrorKind::Config, "rollouts need a dataset built with data.horizon = 1");
        require(n >= 3, ErrorKind::Data, "rollout needs at least 3 test snapshots");
        const int horizon = std::min<int>(config.eval.rollout_horizon, static_cast<int>(n) - 2);
        require(horizon >= 1, ErrorKind::Config, "eval.rollout_horizon must be >= 1");
        std::vector<Tensor> truth(test.snapshots.begin() + 2, test.snapshots.begin() + 2 + horizon);
        RolloutOptions ro;
        ro.horizon = horizon;
        ro.n_steps = sc.n_steps;
        ro.members = sc.ensemble;
        ro.step_size = 1;
        ro.norm_std = idx.norm_std;
        ro.re_tag = test.header.re_tag;
        ro.seed = sc.seed;
        ro.grid = sc.grid;
        const auto steps = autoregressive_rollout(predictor, test.snapshots[0], test.snapshots[1], truth,
                                                  schedule, ro);
        json per_step = json::array();
        for (const auto& s : steps) {
            preds.push_back(s.field);
            baselines.push_back(test.snapshots[1]);
            say(log, "rollout step " + std::to_string(s.step) + " pcc " + fmt(s.pcc) + " persistence " +
                         fmt(s.persistence_pcc));
            per_step.push_back(json{{"step", s.step}, {"pcc", s.pcc}, {"persistence_pcc", s.persistence_pcc}});
        }
        truths = truth;
        results["rollout"] = per_step;
        write_rollout_csv(join(out_dir, "rollout.csv"), steps);
        outputs.push_back(join(out_dir, "rollout.csv"));
    }

    DatasetHeader header = test.header;
    header.norm_std = idx.norm_std;
    const std::pair<const char*, std::vector<Tensor>*> files[] = {
        {"pred.flexds", &preds}, {"truth.flexds", &truths}, {"baseline.flexds", &baselines}, {"std.flexds", &stds}};
    for (const auto& [name, data] : files) {
        if (data->empty()) continue;
        write_dataset(join(out_dir, name), with_snapshots(header, *data));
        outputs.push_back(join(out_dir, name));
    }
    say(log, "wrote " + std::to_string(preds.size()) + " predicted field(s) to " + out_dir);
    write_manifest(join(out_dir, "manifest.json"), "sample", config,
                   {checkpoint, idx.test, idx.index_path()}, outputs, results);
}

void cmd_evaluate(const RunConfig& config, const EvaluateInputs& inputs, const std::string& out_dir,
                  const LogFn& log) {
    require(!inputs.predictions.empty() && !inputs.truth.empty(), ErrorKind::Usage,
            "evaluate needs predictions and truth");
    ensure_dir(out_dir);
    const Dataset pred = read_dataset(inputs.predictions);
    const Dataset truth = read_dataset(inputs.truth);
    require(pred.snapshots.size() == truth.snapshots.size() && !truth.snapshots.empty(), ErrorKind::Shape,
            "predictions and truth hold different numbers of snapshots");
    std::optional<Dataset> base;
    if (!inputs.baseline.empty()) {
        base = read_dataset(inputs.baseline);
        require(base->snapshots.size() == truth.snapshots.size(), ErrorKind::Shape,
                "baseline and truth hold different numbers of snapshots");
    }
    const size_t n = truth.snapshots.size();
    std::vector<std::string> in_paths{inputs.predictions, inputs.truth};
    if (base) in_paths.push_back(inputs.baseline);

    std::ostringstream csv;
    csv.precision(9);
    csv << "index,rfne,pcc" << (base ? ",baseline_rfne,baseline_pcc" : "") << '\n';
    double sum_r = 0.0, sum_p = 0.0, sum_br = 0.0, sum_bp = 0.0;
    std::vector<double> e_pred, e_truth;
    for (size_t i = 0; i < n; ++i) {
        const Tensor& p = pred.snapshots[i];
        const Tensor& t = truth.snapshots[i];
        check_same_shape(p, t, "evaluate");
        const double r = rfne(p, t), c = pcc(p, t);
        sum_r += r;
        sum_p += c;
        csv << i << ',' << r << ',' << c;
        if (base) {
            const double br = rfne(base->snapshots[i], t), bp = pcc(base->snapshots[i], t);
            sum_br += br;
            sum_bp += bp;
            csv << ',' << br << ',' << bp;
        }
        csv << '\n';
        const SpectrumBins sp = vorticity_spectrum(p), st = vorticity_spectrum(t);
        if (e_pred.empty()) {
            e_pred.assign(sp.energy.size(), 0.0);
            e_truth.assign(st.energy.size(), 0.0);
        }
        for (size_t k = 0; k < sp.energy.size(); ++k) {
            e_pred[k] += sp.energy[k] / static_cast<double>(n);
            e_truth[k] += st.energy[k] / static_cast<double>(n);
        }
    }
    const double dn = static_cast<double>(n);
    csv << "mean," << sum_r / dn << ',' << sum_p / dn;
    if (base) csv << ',' << sum_br / dn << ',' << sum_bp / dn;
    csv << '\n';
    std::vector<std::string> outputs{join(out_dir, "metrics.csv"), join(out_dir, "spectrum.csv")};
    write_text(outputs[0], csv.str());

    std::ostringstream spec;
    spec.precision(9);
    spec << "k,energy_pred,energy_truth\n";
    for (size_t k = 0; k < e_pred.size(); ++k) spec << k + 1 << ',' << e_pred[k] << ',' << e_truth[k] << '\n';
    write_text(outputs[1], spec.str());

    json results{{"snapshots", n}, {"rfne_mean", sum_r / dn}, {"pcc_mean", sum_p / dn}};
    say(log, "mean rfne " + fmt(sum_r / dn) + ", mean pcc " + fmt(sum_p / dn));
    if (base) {
        results["baseline_rfne_mean"] = sum_br / dn;
        results["baseline_pcc_mean"] = sum_bp / dn;
        say(log, "baseline rfne " + fmt(sum_br / dn) + ", baseline pcc " + fmt(sum_bp / dn));
    }

    if (!inputs.std.empty()) {
        require(config.sample.ensemble >= 2, ErrorKind::Config,
                "pull statistics need sample.ensemble >= 2 in the config");
        const Dataset sd = read_dataset(inputs.std);
        require(sd.snapshots.size() == n, ErrorKind::Shape, "std and truth hold different numbers of snapshots");
        in_paths.push_back(inputs.std);
        EnsembleStats stats;
        stats.members = config.sample.ensemble;
        Tensor all_truth({static_cast<int64_t>(n) * truth.snapshots[0].numel()});
        int64_t at = 0;
        for (size_t i = 0; i < n; ++i) {
            check_same_shape(sd.snapshots[i], truth.snapshots[i], "evaluate std");
            for (int64_t k = 0; k < truth.snapshots[i].numel(); ++k, ++at) {
                stats.mean.push_back(pred.snapshots[i][k]);
                stats.std.push_back(sd.snapshots[i][k]);
                all_truth[at] = truth.snapshots[i][k];
            }
        }
        const PullStats ps = pull_stats(stats, all_truth, config.eval.std_floor);
        std::ostringstream pull;
        pull.precision(9);
        pull << "pull_mean,pull_std,pull_std_corrected,used,excluded,members\n"
             << ps.pull_mean << ',' << ps.pull_std << ',' << ps.pull_std_corrected << ',' << ps.used << ','
             << ps.excluded << ',' << ps.members << '\n';
        outputs.push_back(join(out_dir, "pull.csv"));
        write_text(outputs.back(), pull.str());
        results["pull_mean"] = ps.pull_mean;
        results["pull_std"] = ps.pull_std;
        say(log, "pull mean " + fmt(ps.pull_mean) + ", pull std " + fmt(ps.pull_std) + " (" +
                     std::to_string(ps.excluded) + " pixel(s) below the std floor)");
    }
    write_manifest(join(out_dir, "manifest.json"), "evaluate", config, in_paths, outputs, results);
}

namespace {

struct PatchSet {
    std::vector<double> raw, sr, fc;  // N x patch^2, row-major
    int64_t count = 0;
};

void append_patch(std::vector<double>& dst, const Tensor& grid, int64_t row, int64_t col, int64_t patch) {
    const Tensor crop = crop_periodic(grid, row, col, patch);
    dst.insert(dst.end(), crop.values().begin(), crop.values().end());
}

PatchSet collect_patches(const std::vector<Dataset>& sets, const DatasetIndex& idx, const TheoryConfig& tc,
                         bool prefilter) {
    const Normalization norm{0.0, idx.norm_std};
    const auto h = static_cast<size_t>(idx.horizon);
    std::vector<std::pair<size_t, size_t>> usable;  // (trajectory, snapshot) with an FC target
    for (size_t k = 0; k < sets.size(); ++k) {
        for (size_t i = 1; i + h < sets[k].snapshots.size(); ++i) usable.emplace_back(k, i);
    }
    require(!usable.empty(), ErrorKind::Data, "dataset has no snapshots usable for the theory analysis");
    const int64_t n = sets.front().snapshots.front().dim(0);
    require(tc.patch >= 2 && tc.patch <= n, ErrorKind::Config, "theory.patch must lie in [2, grid size]");
    require(tc.max_patches >= 1, ErrorKind::Config, "theory.max_patches must be >= 1");

    std::map<std::pair<size_t, size_t>, std::pair<Tensor, Tensor>> cache;
    std::mt19937_64 rng(tc.seed);
    std::uniform_int_distribution<size_t> pick(0, usable.size() - 1);
    std::uniform_int_distribution<int64_t> offset(0, n - 1);
    PatchSet out;
    for (int p = 0; p < tc.max_patches; ++p) {
        const auto key = usable[pick(rng)];
        const Dataset& d = sets[key.first];
        auto it = cache.find(key);
        if (it == cache.end()) {
            const size_t i = key.second;
            Tensor sr = make_sr_residual(d.field(i), idx.factor, norm, {prefilter}).residual;
            Tensor fc = make_fc_residual(d.field(i - 1), d.field(i), d.field(i + h), idx.horizon, norm).residual;
            it = cache.emplace(key, std::make_pair(std::move(sr), std::move(fc))).first;
        }
        const int64_t r = offset(rng), c = offset(rng);
        append_patch(out.raw, normalize(d.snapshots[key.second], 0.0, idx.norm_std), r, c, tc.patch);
        append_patch(out.sr, it->second.first, r, c, tc.patch);
        append_patch(out.fc, it->second.second, r, c, tc.patch);
        ++out.count;
    }
    return out;
}

} // namespace

void cmd_theory(const RunConfig& config, const std::string& dataset_dir, const std::string& out_dir,
                const LogFn& log) {
    ensure_dir(out_dir);
    const TheoryConfig& tc = config.theory;
    const NoiseSchedule schedule = config.schedule.make();
    require(!tc.t_grid.empty(), ErrorKind::Config, "theory.t_grid must not be empty");

    // Gaussian self-test.
    const std::vector<double> hess_t{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    const std::vector<double> priors{0.5, 2.0, 4.0};
    const Prop1Report analytic = prop1_check_analytic(4.0, tc.t_grid, schedule);
    const Prop1Report mc = prop1_check_monte_carlo(4.0, tc.t_grid, tc.mc_samples, tc.seed, schedule);
    double hess_err = 0.0;
    bool bounds = true;
    std::ostringstream hess;
    hess.precision(12);
    hess << "prior_var,t,true_hessian,corrected_hessian,printed_hessian,identity_error,grad_v,first_bound,bound,"
            "bound_holds\n";
    for (double pv : priors) {
        for (double t : hess_t) {
            const HessianReport r = hessian_covariance_check(pv, t, schedule);
            hess_err = std::max(hess_err, r.identity_error);
            bounds = bounds && r.bound_holds;
            hess << pv << ',' << t << ',' << r.true_hessian << ',' << r.corrected_hessian << ','
                 << r.printed_hessian << ',' << r.identity_error << ',' << r.grad_v << ',' << r.first_bound
                 << ',' << r.bound << ',' << (r.bound_holds ? 1 : 0) << '\n';
        }
    }
    std::ostringstream prop;
    prop.precision(12);
    prop << "t,lhs_analytic,rhs,discrepancy_analytic,lhs_monte_carlo,discrepancy_monte_carlo\n";
    for (size_t k = 0; k < analytic.rows.size(); ++k) {
        prop << analytic.rows[k].t << ',' << analytic.rows[k].lhs << ',' << analytic.rows[k].rhs << ','
             << analytic.rows[k].discrepancy << ',' << mc.rows[k].lhs << ',' << mc.rows[k].discrepancy << '\n';
    }
    const bool self_test = analytic.max_discrepancy < 1e-10 && mc.max_discrepancy < 0.02 && hess_err < 1e-10 && bounds;
    say(log, std::string("gaussian self-test ") + (self_test ? "passed" : "FAILED") + ": prop1 analytic " +
                 fmt(analytic.max_discrepancy) + ", monte carlo " + fmt(mc.max_discrepancy) +
                 ", hessian identity " + fmt(hess_err));

    // Data section.
    const DatasetIndex idx = read_index(dataset_dir);
    const std::vector<Dataset> sets = read_all(idx.train);
    size_t total = 0;
    for (const Dataset& d : sets) total += d.snapshots.size();
    require(total > 0, ErrorKind::Data, "dataset is empty");
    const PatchSet patches = collect_patches(sets, idx, tc, config.data.prefilter);
    const int64_t dim = static_cast<int64_t>(tc.patch) * tc.patch;

    const FisherCurve raw = fisher_curve(patches.raw, FisherSource::Raw, tc.t_grid, schedule,
                                         mix_seed(tc.seed, 1), tc.bandwidth);
    const FisherCurve sr = fisher_curve(patches.sr, FisherSource::SrResidual, tc.t_grid, schedule,
                                        mix_seed(tc.seed, 2), tc.bandwidth);
    const FisherCurve fc = fisher_curve(patches.fc, FisherSource::FcResidual, tc.t_grid, schedule,
                                        mix_seed(tc.seed, 3), tc.bandwidth);
    std::ostringstream curves;
    curves.precision(9);
    curves << "t,d_f_raw,d_f_sr,d_f_fc,scaled_raw,scaled_sr,scaled_fc\n";
    bool sr_below = true, fc_below = true;
    for (size_t k = 0; k < tc.t_grid.size(); ++k) {
        curves << tc.t_grid[k] << ',' << raw.d_f[k] << ',' << sr.d_f[k] << ',' << fc.d_f[k] << ','
               << raw.scaled[k] << ',' << sr.scaled[k] << ',' << fc.scaled[k] << '\n';
        if (tc.t_grid[k] <= 0.5) {
            sr_below = sr_below && sr.d_f[k] < raw.d_f[k];
            fc_below = fc_below && fc.d_f[k] < raw.d_f[k];
        }
    }

    const double lam_raw = top_eigen_covariance(patches.raw, patches.count, dim);
    const double lam_sr = top_eigen_covariance(patches.sr, patches.count, dim);
    const double lam_fc = top_eigen_covariance(patches.fc, patches.count, dim);
    say(log, "residual below raw for t <= 0.5: sr " + std::string(sr_below ? "yes" : "no") + ", fc " +
                 (fc_below ? "yes" : "no"));
    say(log, "lambda_max raw " + fmt(lam_raw) + ", sr " + fmt(lam_sr) + ", fc " + fmt(lam_fc));

    const json report{{"self_test",
                       {{"passed", self_test},
                        {"prop1_analytic_max_discrepancy", analytic.max_discrepancy},
                        {"prop1_monte_carlo_max_discrepancy", mc.max_discrepancy},
                        {"hessian_identity_max_error", hess_err},
                        {"bounds_hold", bounds}}},
                      {"fisher",
                       {{"patches", patches.count},
                        {"patch", tc.patch},
                        {"scalars_per_source", patches.raw.size()},
                        {"kde_bandwidth_raw", raw.kde_bandwidth},
                        {"kde_bandwidth_sr", sr.kde_bandwidth},
                        {"kde_bandwidth_fc", fc.kde_bandwidth},
                        {"noise_floor", raw.noise_floor},
                        {"sr_below_raw", sr_below},
                        {"fc_below_raw", fc_below}}},
                      {"eigen",
                       {{"lambda_raw", lam_raw},
                        {"lambda_sr", lam_sr},
                        {"lambda_fc", lam_fc},
                        {"ratio_sr", lam_raw / lam_sr},
                        {"ratio_fc", lam_raw / lam_fc}}}};
    const std::vector<std::string> outputs{join(out_dir, "fisher.csv"), join(out_dir, "prop1.csv"),
                                           join(out_dir, "hessian.csv"), join(out_dir, "report.json")};
    write_text(outputs[0], curves.str());
    write_text(outputs[1], prop.str());
    write_text(outputs[2], hess.str());
    write_text(outputs[3], report.dump(2) + "\n");
    std::vector<std::string> inputs = idx.train;
    inputs.push_back(idx.index_path());
    write_manifest(join(out_dir, "manifest.json"), "theory", config, inputs, outputs, report);
    require(self_test, ErrorKind::Internal, "the Gaussian self-test failed; see " + outputs[3]);
}

} // namespace flexdiff
