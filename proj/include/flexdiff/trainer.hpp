#pragma once

#include "flexdiff/backbone.hpp"
#include "flexdiff/dataio.hpp"
#include "flexdiff/schedule.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace flexdiff {

enum class LossKind { L1, L2 };
enum class OptimizerKind { Lion, AdamW };
enum class GradMode { TwoSteps, Summed };
enum class LrSchedule { Cosine, Constant };

struct TrainConfig {
    LossKind loss = LossKind::L1;
    OptimizerKind optimizer = OptimizerKind::Lion;
    double base_lr = 1e-4;
    LrSchedule lr_schedule = LrSchedule::Cosine;
    int warmup_steps = 0;
    int steps = 1000;  // optimizer-step budget the cosine schedule spans
    int batch_size = 8;
    int patch = 0;     // training crop size; 0 trains on full fields
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.0;
    double adam_eps = 1e-8;
    double ema_decay = 0.999;
    bool multitask = false;
    GradMode grad_mode = GradMode::TwoSteps;
    uint64_t seed = 0;
    int log_every = 10;

    void validate() const;
};

const char* to_string(LossKind k);
const char* to_string(OptimizerKind k);
const char* to_string(GradMode m);
const char* to_string(LrSchedule s);
LossKind loss_kind_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);
GradMode grad_mode_from_string(const std::string& s);
LrSchedule lr_schedule_from_string(const std::string& s);

double learning_rate(const TrainConfig& config, int64_t step);

struct TrainState {
    FlexModel model;
    std::vector<Tensor> ema;    // one shadow tensor per parameter
    std::vector<Tensor> opt_m;  // first moment (Lion momentum / Adam m)
    std::vector<Tensor> opt_v;  // Adam second moment; empty for Lion
    int64_t step = 0;
    std::mt19937_64 rng;
    double last_loss = 0.0;

    static TrainState create(const FlexConfig& model_config, const TrainConfig& train_config);

    // A model carrying the EMA weights.
    FlexModel ema_model() const;
    // Root-mean-square difference between EMA and live weights.
    double ema_gap() const;
};

// Loss of v_theta on fixed (t, eps) draws. items may mix tasks (SR first).
// With per_task_mean the loss is the sum over tasks of each task's mean.
Var velocity_loss(const FlexModel& model, const std::vector<ResidualSample>& items,
                  const std::vector<double>& t, const std::vector<Tensor>& eps,
                  const NoiseSchedule& schedule, LossKind loss, std::mt19937_64* dropout_rng,
                  bool per_task_mean = false);

// Diffusion time for one training item, uniform on [t_min, t_max].
double sample_time(std::mt19937_64& rng, const NoiseSchedule& schedule);

struct StepReport {
    int64_t step = 0;
    std::string task;
    double loss = 0.0;
    double lr = 0.0;
    double ema_gap = 0.0;
};

// One optimizer step on a batch, t ~ U(t_min, t_max) per item. Throws
// ErrorKind::Divergence on a non-finite loss without touching the state.
StepReport train_step(TrainState& state, const std::vector<ResidualSample>& batch,
                      const NoiseSchedule& schedule, const TrainConfig& config);

std::vector<StepReport> train_step_multitask(TrainState& state,
                                             const std::vector<ResidualSample>& sr_batch,
                                             const std::vector<ResidualSample>& fc_batch,
                                             const NoiseSchedule& schedule,
                                             const TrainConfig& config);

// Applies one optimizer update from the gradients currently stored on the
// parameters, then the EMA update.
void optimizer_step(TrainState& state, const TrainConfig& config);

// Full-field residual samples from which training batches are cropped.
class ResidualPool {
public:
    void add(ResidualSample sample) { samples_.push_back(std::move(sample)); }
    size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    const std::vector<ResidualSample>& samples() const { return samples_; }

    // Uniform random items with uniform random crop offsets (patch 0 = full).
    std::vector<ResidualSample> sample_batch(std::mt19937_64& rng, int batch, int patch) const;

private:
    std::vector<ResidualSample> samples_;
};

ResidualSample crop_sample(const ResidualSample& sample, int64_t row, int64_t col, int64_t patch);

using StepCallback = std::function<void(const StepReport&)>;

// Runs optimizer steps until state.step reaches `until`. Each step draws its
// batch from the pools with the state RNG, so a resumed run replays exactly.
void train(TrainState& state, const ResidualPool& sr, const ResidualPool& fc,
           const NoiseSchedule& schedule, const TrainConfig& config, int64_t until,
           const StepCallback& on_step = {});

void write_train_log(const std::string& path, const std::vector<StepReport>& rows);

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'E', 'X', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

std::vector<uint8_t> encode_checkpoint(const TrainState& state, const TrainConfig& config);
TrainState decode_checkpoint(const std::vector<uint8_t>& bytes, TrainConfig* config = nullptr);

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& path);
TrainState load_checkpoint(const std::string& path, TrainConfig* config = nullptr);
// Throws ErrorKind::Config when the stored model config differs from expected.
TrainState load_checkpoint(const std::string& path, const FlexConfig& expected,
                           TrainConfig* config = nullptr);

} // namespace flexdiff
