#pragma once

#include "flexdiff/context.hpp"
#include "flexdiff/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace flexdiff {

enum class Quantity : uint8_t { Vorticity = 0, VelocityU = 1, VelocityV = 2 };

const char* to_string(Quantity q);

// A 2D snapshot stored as a [ny, nx] tensor plus grid metadata.
struct Field {
    Tensor values;
    double domain_length = 6.283185307179586;
    Quantity quantity = Quantity::Vorticity;
    int time_index = 0;
    double dt = 0.0;
    double re_tag = 0.0;

    int64_t ny() const { return values.dim(0); }
    int64_t nx() const { return values.dim(1); }

    // Sizes >= 8 and powers of two, finite values.
    void validate() const;
};

Field make_field(Tensor values, int time_index = 0, double dt = 0.0, double re_tag = 0.0);

bool is_power_of_two(int64_t n);

// Periodic bicubic (Keys, a = -1/2) interpolation by factor 2, 4 or 8. Output
// sample i*factor coincides with input sample i.
Tensor upsample(const Tensor& grid, int factor);
Field upsample(const Field& low, int factor);

// Strided subsampling X[::factor, ::factor].
Tensor subsample(const Tensor& grid, int factor);

// Spectral truncation to the Nyquist band of a grid coarsened by factor.
Tensor lowpass(const Tensor& grid, int factor);

struct Normalization {
    double mean = 0.0;
    double std = 1.0;
};

// Residual std of the 2048^2 NSKT reference data.
inline constexpr double kNsktResidualStd = 5.457;

Tensor normalize(const Tensor& r, double mean, double std);
Tensor denormalize(const Tensor& r, double mean, double std);

// Residual in normalized units plus the conditioning context. Snapshots in the
// context are scaled by the same normalization.
struct ResidualSample {
    Tensor residual;
    ConditioningContext context;
    double norm_mean = 0.0;
    double norm_std = 1.0;
};

struct SrOptions {
    bool prefilter = false;  // low-pass before subsampling
};

// R = hr - up(hr[::f, ::f]).
ResidualSample make_sr_residual(const Field& hr, int factor, const Normalization& norm = {},
                                const SrOptions& options = {});

// R = future - current, conditioned on (previous, current).
ResidualSample make_fc_residual(const Field& previous, const Field& current, const Field& future,
                                int s, const Normalization& norm = {});

// Base the residual is added to, in physical units: up(LR) for SR, the
// current frame for FC.
Tensor residual_base(const ResidualSample& sample);

// Physical-unit reconstruction base + denormalize(residual).
Tensor reconstruct(const ResidualSample& sample, const Tensor& normalized_residual);

struct Patch {
    Tensor values;
    int64_t row = 0;
    int64_t col = 0;
};

// Raster-order tiling of a [H, W] grid.
std::vector<Patch> extract_patches(const Tensor& grid, int64_t patch, int64_t stride);

// Periodic crop starting at (row, col).
Tensor crop_periodic(const Tensor& grid, int64_t row, int64_t col, int64_t patch);

enum class StitchMode { Direct, Average, CosineTaper };

Tensor stitch(const std::vector<Patch>& patches, int64_t height, int64_t width, StitchMode mode);

struct DatasetHeader {
    uint32_t nx = 0;
    uint32_t ny = 0;
    double dt = 0.0;
    double viscosity = 0.0;
    double re_tag = 0.0;
    Quantity quantity = Quantity::Vorticity;
    double norm_mean = 0.0;
    double norm_std = 1.0;
};

struct Dataset {
    DatasetHeader header;
    std::vector<Tensor> snapshots;  // [ny, nx] each

    Field field(size_t index) const;
};

inline constexpr char kDatasetMagic[8] = {'F', 'L', 'E', 'X', 'D', 'S', '0', '1'};

void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

std::vector<uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(const std::vector<uint8_t>& bytes);

} // namespace flexdiff
