#include "flexdiff/config.hpp"

#include "binio.hpp"
#include "flexdiff/error.hpp"

#include <json.hpp>

#include <cstdio>
#include <set>

namespace flexdiff {

using nlohmann::json;

const char* to_string(TimeGrid g) { return g == TimeGrid::UniformT ? "uniform_t" : "uniform_log_snr"; }

TimeGrid time_grid_from_string(const std::string& s) {
    if (s == "uniform_t") return TimeGrid::UniformT;
    if (s == "uniform_log_snr") return TimeGrid::UniformLogSnr;
    fail(ErrorKind::Config, "unknown time grid '" + s + "' (expected uniform_t or uniform_log_snr)");
}

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        require(j.is_object(), ErrorKind::Config, "section '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            fail(ErrorKind::Config, name_ + "." + key + ": " + e.what());
        }
    }

    template <typename T, typename Parse>
    void get_enum(const char* key, T& out, Parse parse) {
        std::string s;
        bool present = j_.contains(key);
        get(key, s);
        if (present) out = parse(s);
    }

    bool has(const char* key) const { return j_.contains(key); }
    const json& at(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                fail(ErrorKind::Config, "unknown key '" + it.key() + "' in section '" + name_ + "'");
            }
        }
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

json parse_text(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
    }
}

std::vector<std::string> task_names(const std::vector<Task>& tasks) {
    std::vector<std::string> out;
    for (Task t : tasks) out.emplace_back(to_string(t));
    return out;
}

json flex_to_json(const FlexConfig& c) {
    return json{{"enc_channels", c.enc_channels},
                {"enc_blocks", c.enc_blocks},
                {"dec_channels", c.dec_channels},
                {"dec_blocks", c.dec_blocks},
                {"vit_depth", c.vit_depth},
                {"vit_heads", c.vit_heads},
                {"weak_levels", c.weak_levels},
                {"weak_conditioning", c.weak_conditioning},
                {"strong_conditioning", c.strong_conditioning},
                {"task_encoders", c.task_encoders},
                {"tasks", task_names(c.tasks)},
                {"in_channels", c.in_channels},
                {"image_size", c.image_size},
                {"dropout", c.dropout},
                {"fourier_features", c.fourier_features},
                {"mlp_ratio", c.mlp_ratio},
                {"skip_fusion", c.skip_fusion == SkipFusion::Concat ? "concat" : "add"}};
}

void flex_fields(Section& s, FlexConfig& c) {
    s.get("enc_channels", c.enc_channels);
    s.get("enc_blocks", c.enc_blocks);
    s.get("dec_channels", c.dec_channels);
    s.get("dec_blocks", c.dec_blocks);
    s.get("vit_depth", c.vit_depth);
    s.get("vit_heads", c.vit_heads);
    s.get("weak_levels", c.weak_levels);
    s.get("weak_conditioning", c.weak_conditioning);
    s.get("strong_conditioning", c.strong_conditioning);
    s.get("task_encoders", c.task_encoders);
    if (s.has("tasks")) {
        std::vector<std::string> names;
        s.get("tasks", names);
        c.tasks.clear();
        for (const auto& n : names) c.tasks.push_back(task_from_string(n));
    }
    s.get("in_channels", c.in_channels);
    s.get("image_size", c.image_size);
    s.get("dropout", c.dropout);
    s.get("fourier_features", c.fourier_features);
    s.get("mlp_ratio", c.mlp_ratio);
    s.get_enum("skip_fusion", c.skip_fusion, [](const std::string& v) {
        if (v == "concat") return SkipFusion::Concat;
        if (v == "add") return SkipFusion::Add;
        fail(ErrorKind::Config, "skip_fusion must be concat or add");
    });
}

json train_to_json(const TrainConfig& c) {
    return json{{"loss", to_string(c.loss)},
                {"optimizer", to_string(c.optimizer)},
                {"base_lr", c.base_lr},
                {"lr_schedule", to_string(c.lr_schedule)},
                {"warmup_steps", c.warmup_steps},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"patch", c.patch},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"weight_decay", c.weight_decay},
                {"adam_eps", c.adam_eps},
                {"ema_decay", c.ema_decay},
                {"multitask", c.multitask},
                {"grad_mode", to_string(c.grad_mode)},
                {"seed", c.seed},
                {"log_every", c.log_every}};
}

void train_fields(Section& s, TrainConfig& c) {
    s.get_enum("loss", c.loss, loss_kind_from_string);
    s.get_enum("optimizer", c.optimizer, optimizer_from_string);
    s.get("base_lr", c.base_lr);
    s.get_enum("lr_schedule", c.lr_schedule, lr_schedule_from_string);
    s.get("warmup_steps", c.warmup_steps);
    s.get("steps", c.steps);
    s.get("batch_size", c.batch_size);
    s.get("patch", c.patch);
    s.get("beta1", c.beta1);
    s.get("beta2", c.beta2);
    s.get("weight_decay", c.weight_decay);
    s.get("adam_eps", c.adam_eps);
    s.get("ema_decay", c.ema_decay);
    s.get("multitask", c.multitask);
    s.get_enum("grad_mode", c.grad_mode, grad_mode_from_string);
    s.get("seed", c.seed);
    s.get("log_every", c.log_every);
}

json run_to_json(const RunConfig& c) {
    json model = flex_to_json(c.model.flex);
    model["preset"] = c.model.preset;
    return json{
        {"schedule", {{"kind", "cosine"}, {"t_min", c.schedule.t_min}, {"t_max", c.schedule.t_max}}},
        {"sim",
         {{"n", c.sim.n},
          {"viscosity", c.sim.viscosity},
          {"dt", c.sim.dt},
          {"steps", c.sim.steps},
          {"save_every", c.sim.save_every},
          {"spinup_steps", c.sim.spinup_steps},
          {"seed", c.sim.seed},
          {"k0", c.sim.k0},
          {"slope", c.sim.slope},
          {"omega_rms", c.sim.omega_rms}}},
        {"data",
         {{"factor", c.data.factor},
          {"horizon", c.data.horizon},
          {"test_snapshots", c.data.test_snapshots},
          {"skip_initial", c.data.skip_initial},
          {"prefilter", c.data.prefilter},
          {"norm_std", c.data.norm_std}}},
        {"model", model},
        {"train", train_to_json(c.train)},
        {"sample",
         {{"n_steps", c.sample.n_steps},
          {"ensemble", c.sample.ensemble},
          {"seed", c.sample.seed},
          {"grid", to_string(c.sample.grid)},
          {"use_ema", c.sample.use_ema},
          {"patch", c.sample.patch},
          {"stride", c.sample.stride}}},
        {"eval", {{"rollout_horizon", c.eval.rollout_horizon}, {"std_floor", c.eval.std_floor}}},
        {"theory",
         {{"t_grid", c.theory.t_grid},
          {"mc_samples", c.theory.mc_samples},
          {"patch", c.theory.patch},
          {"max_patches", c.theory.max_patches},
          {"bandwidth", c.theory.bandwidth},
          {"seed", c.theory.seed}}}};
}

} // namespace

std::string flex_config_to_text(const FlexConfig& c) { return flex_to_json(c).dump(2); }

FlexConfig flex_config_from_text(const std::string& text) {
    const json j = parse_text(text);
    FlexConfig c;
    Section s(j, "model");
    flex_fields(s, c);
    s.finish();
    c.validate();
    return c;
}

std::string train_config_to_text(const TrainConfig& c) { return train_to_json(c).dump(2); }

TrainConfig train_config_from_text(const std::string& text) {
    const json j = parse_text(text);
    TrainConfig c;
    Section s(j, "train");
    train_fields(s, c);
    s.finish();
    c.validate();
    return c;
}

std::string run_config_to_text(const RunConfig& c) { return run_to_json(c).dump(2); }

RunConfig run_config_from_text(const std::string& text) {
    const json j = parse_text(text);
    RunConfig c;
    Section root(j, "root");
    if (root.has("schedule")) {
        Section s(root.at("schedule"), "schedule");
        std::string kind = "cosine";
        s.get("kind", kind);
        require(kind == "cosine", ErrorKind::Config, "only the cosine schedule is supported");
        s.get("t_min", c.schedule.t_min);
        s.get("t_max", c.schedule.t_max);
        s.finish();
        c.schedule.make();
    }
    if (root.has("sim")) {
        Section s(root.at("sim"), "sim");
        s.get("n", c.sim.n);
        s.get("viscosity", c.sim.viscosity);
        s.get("dt", c.sim.dt);
        s.get("steps", c.sim.steps);
        s.get("save_every", c.sim.save_every);
        s.get("spinup_steps", c.sim.spinup_steps);
        s.get("seed", c.sim.seed);
        s.get("k0", c.sim.k0);
        s.get("slope", c.sim.slope);
        s.get("omega_rms", c.sim.omega_rms);
        s.finish();
    }
    if (root.has("data")) {
        Section s(root.at("data"), "data");
        s.get("factor", c.data.factor);
        s.get("horizon", c.data.horizon);
        s.get("test_snapshots", c.data.test_snapshots);
        s.get("skip_initial", c.data.skip_initial);
        s.get("prefilter", c.data.prefilter);
        s.get("norm_std", c.data.norm_std);
        s.finish();
    }
    if (root.has("model")) {
        Section s(root.at("model"), "model");
        s.get("preset", c.model.preset);
        c.model.flex = preset(c.model.preset);
        flex_fields(s, c.model.flex);
        s.finish();
        c.model.flex.validate();
    }
    if (root.has("train")) {
        Section s(root.at("train"), "train");
        train_fields(s, c.train);
        s.finish();
        c.train.validate();
    }
    if (root.has("sample")) {
        Section s(root.at("sample"), "sample");
        s.get("n_steps", c.sample.n_steps);
        s.get("ensemble", c.sample.ensemble);
        s.get("seed", c.sample.seed);
        s.get_enum("grid", c.sample.grid, time_grid_from_string);
        s.get("use_ema", c.sample.use_ema);
        s.get("patch", c.sample.patch);
        s.get("stride", c.sample.stride);
        s.finish();
        require(c.sample.n_steps >= 1, ErrorKind::Config, "sample.n_steps must be >= 1");
        require(c.sample.ensemble >= 1, ErrorKind::Config, "sample.ensemble must be >= 1");
        require(c.sample.patch >= 0 && c.sample.stride >= 0, ErrorKind::Config,
                "sample.patch and sample.stride must be >= 0");
    }
    if (root.has("eval")) {
        Section s(root.at("eval"), "eval");
        s.get("rollout_horizon", c.eval.rollout_horizon);
        s.get("std_floor", c.eval.std_floor);
        s.finish();
    }
    if (root.has("theory")) {
        Section s(root.at("theory"), "theory");
        s.get("t_grid", c.theory.t_grid);
        s.get("mc_samples", c.theory.mc_samples);
        s.get("patch", c.theory.patch);
        s.get("max_patches", c.theory.max_patches);
        s.get("bandwidth", c.theory.bandwidth);
        s.get("seed", c.theory.seed);
        s.finish();
    }
    root.finish();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    const std::vector<uint8_t> bytes = detail::read_file(path);
    return run_config_from_text(std::string(bytes.begin(), bytes.end()));
}

RunConfig apply_override(const RunConfig& base, const std::string& dotted_key,
                         const std::string& value) {
    const auto dot = dotted_key.find('.');
    require(dot != std::string::npos && dot > 0 && dot + 1 < dotted_key.size(), ErrorKind::Config,
            "override key '" + dotted_key + "' must look like section.key");
    const std::string section = dotted_key.substr(0, dot), key = dotted_key.substr(dot + 1);
    json j = parse_text(run_config_to_text(base));
    require(j.contains(section), ErrorKind::Config, "unknown config section '" + section + "'");
    json v;
    try {
        v = json::parse(value);
    } catch (const json::exception&) {
        v = value;
    }
    if (section == "model" && key == "preset") {
        j["model"] = json{{"preset", v}};
    } else {
        require(j[section].contains(key), ErrorKind::Config,
                "unknown key '" + key + "' in section '" + section + "'");
        j[section][key] = v;
    }
    return run_config_from_text(j.dump());
}

std::string config_hash(const std::string& canonical_text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical_text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace flexdiff
