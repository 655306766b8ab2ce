#include "flexdiff/metrics.hpp"

#include "fft.hpp"
#include "flexdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flexdiff {

double rfne(const Tensor& pred, const Tensor& truth) {
    check_same_shape(pred, truth, "rfne");
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < truth.numel(); ++i) {
        const double d = static_cast<double>(pred[i]) - truth[i];
        num += d * d;
        den += static_cast<double>(truth[i]) * truth[i];
    }
    require(den > 0.0, ErrorKind::UndefinedMetric, "rfne: truth has zero norm");
    return std::sqrt(num / den);
}

double pcc(const Tensor& pred, const Tensor& truth) {
    check_same_shape(pred, truth, "pcc");
    const int64_t n = truth.numel();
    require(n > 0, ErrorKind::UndefinedMetric, "pcc: empty fields");
    double ma = 0.0, mb = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        ma += pred[i];
        mb += truth[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double a = pred[i] - ma, b = truth[i] - mb;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    require(saa > 0.0 && sbb > 0.0, ErrorKind::UndefinedMetric, "pcc: constant field");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

SpectrumBins vorticity_spectrum(const Tensor& omega) {
    require(omega.rank() == 2 && omega.dim(0) == omega.dim(1), ErrorKind::Shape,
            "vorticity_spectrum expects a square grid");
    const int n = static_cast<int>(omega.dim(0));
    require(is_power_of_two(n) && n >= 4, ErrorKind::Shape,
            "vorticity_spectrum expects a power-of-two size");
    std::vector<double> grid(omega.values().begin(), omega.values().end());
    const detail::Spectrum2D spec = detail::rfft2(grid, n, n);

    SpectrumBins bins;
    const int kmax = n / 2;
    for (int k = 1; k <= kmax; ++k) bins.k_centers.push_back(k);
    bins.energy.assign(static_cast<size_t>(kmax), 0.0);
    bins.n_modes.assign(static_cast<size_t>(kmax), 0);
    const double n4 = std::pow(static_cast<double>(n), 4);
    for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
            if (iy == 0 && ix == 0) continue;
            const std::complex<double> c =
                ix < spec.cols() ? spec.at(iy, ix) : std::conj(spec.at((n - iy) % n, n - ix));
            const double ky = detail::wavenumber(iy, n), kx = detail::wavenumber(ix, n);
            const double k = std::sqrt(kx * kx + ky * ky);
            const double e = std::numbers::pi * std::norm(c) / (n4 * k);
            const auto bin = static_cast<int>(std::lround(k));
            if (bin > kmax) {
                bins.corner_energy += e;
                ++bins.corner_modes;
            } else {
                bins.energy[static_cast<size_t>(bin - 1)] += e;
                ++bins.n_modes[static_cast<size_t>(bin - 1)];
            }
        }
    }
    return bins;
}

PullStats pull_stats(const EnsembleStats& ensemble, const Tensor& truth, double std_floor) {
    require(static_cast<int64_t>(ensemble.mean.size()) == truth.numel() &&
                ensemble.std.size() == ensemble.mean.size(),
            ErrorKind::Shape, "pull_stats: ensemble and truth sizes differ");
    require(ensemble.members >= 2, ErrorKind::Parameter, "pull_stats needs at least 2 members");
    PullStats out;
    out.members = ensemble.members;
    double s = 0.0, ss = 0.0;
    for (int64_t i = 0; i < truth.numel(); ++i) {
        const double sd = ensemble.std[static_cast<size_t>(i)];
        if (!(sd >= std_floor) || sd <= 0.0) {
            ++out.excluded;
            continue;
        }
        const double p = (ensemble.mean[static_cast<size_t>(i)] - truth[i]) / sd;
        s += p;
        ss += p * p;
        ++out.used;
    }
    require(out.used > 0, ErrorKind::UndefinedMetric, "pull_stats: no pixel has std above the floor");
    const auto n = static_cast<double>(out.used);
    out.pull_mean = s / n;
    out.pull_std = std::sqrt(std::max(0.0, ss / n - out.pull_mean * out.pull_mean));
    out.pull_std_corrected = out.pull_std / std::sqrt(1.0 + 1.0 / ensemble.members);
    return out;
}

std::vector<RolloutStep> autoregressive_rollout(const VelocityPredictor& predictor,
                                                const Tensor& previous, const Tensor& current,
                                                const std::vector<Tensor>& truth,
                                                const NoiseSchedule& schedule,
                                                const RolloutOptions& options) {
    require(options.horizon >= 1, ErrorKind::Parameter, "rollout horizon must be >= 1");
    require(static_cast<int>(truth.size()) >= options.horizon, ErrorKind::Data,
            "rollout needs " + std::to_string(options.horizon) + " truth frames, got " +
                std::to_string(truth.size()));
    require(options.members >= 1, ErrorKind::Parameter, "rollout members must be >= 1");
    check_same_shape(previous, current, "autoregressive_rollout");

    Tensor prev = previous, cur = current;
    std::vector<RolloutStep> out;
    for (int k = 0; k < options.horizon; ++k) {
        check_same_shape(cur, truth[static_cast<size_t>(k)], "autoregressive_rollout");
        ConditioningContext ctx;
        ctx.task = Task::FC;
        ctx.snapshots = {normalize(prev, 0.0, options.norm_std), normalize(cur, 0.0, options.norm_std)};
        ctx.re_tag = options.re_tag;
        ctx.step_index = options.step_size;

        Tensor residual;
        try {
            const uint64_t seed = options.seed + static_cast<uint64_t>(k) * 0x9e3779b97f4a7c15ULL;
            if (options.members == 1) {
                residual = sample(predictor, ctx, cur.shape(), options.n_steps, schedule, seed, options.grid);
            } else {
                EnsembleStats stats = ensemble(predictor, ctx, cur.shape(), options.n_steps,
                                               options.members, schedule, seed, options.grid);
                residual = Tensor(cur.shape());
                for (int64_t i = 0; i < residual.numel(); ++i) {
                    residual[i] = static_cast<float>(stats.mean[static_cast<size_t>(i)]);
                }
            }
        } catch (const Error& e) {
            throw Error(e.kind(), "rollout step " + std::to_string(k + 1) + ": " + e.what());
        }

        Tensor next(cur.shape());
        const Tensor phys = denormalize(residual, 0.0, options.norm_std);
        for (int64_t i = 0; i < next.numel(); ++i) next[i] = cur[i] + phys[i];
        require(next.all_finite(), ErrorKind::Divergence,
                "rollout step " + std::to_string(k + 1) + " produced non-finite values");

        RolloutStep step;
        step.step = k + 1;
        step.pcc = pcc(next, truth[static_cast<size_t>(k)]);
        step.rfne = rfne(next, truth[static_cast<size_t>(k)]);
        step.persistence_pcc = pcc(current, truth[static_cast<size_t>(k)]);
        step.field = next;
        out.push_back(std::move(step));
        prev = std::move(cur);
        cur = out.back().field;
    }
    return out;
}

} // namespace flexdiff
