#include "flexdiff/dataio.hpp"

#include "binio.hpp"
#include "fft.hpp"
#include "flexdiff/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace flexdiff {

const char* to_string(Quantity q) {
    switch (q) {
    case Quantity::Vorticity: return "vorticity";
    case Quantity::VelocityU: return "velocity_u";
    case Quantity::VelocityV: return "velocity_v";
    }
    return "unknown";
}

bool is_power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

void Field::validate() const {
    require(values.rank() == 2, ErrorKind::Shape, "a field must be a 2D grid");
    require(nx() >= 8 && ny() >= 8 && is_power_of_two(nx()) && is_power_of_two(ny()),
            ErrorKind::Shape,
            "field sizes must be powers of two >= 8, got " + shape_str(values.shape()));
    require(values.all_finite(), ErrorKind::Data, "field contains non-finite values");
}

Field make_field(Tensor values, int time_index, double dt, double re_tag) {
    Field f;
    f.values = std::move(values);
    f.time_index = time_index;
    f.dt = dt;
    f.re_tag = re_tag;
    return f;
}

namespace {

void require_grid(const Tensor& grid, const char* what) {
    require(grid.rank() == 2, ErrorKind::Shape, std::string(what) + " expects a 2D grid");
}

// Keys cubic convolution kernel weights for the 4 taps at offsets -1..2 around
// fractional position s in [0, 1).
std::array<double, 4> cubic_weights(double s) {
    constexpr double a = -0.5;
    auto w = [](double x) {
        x = std::abs(x);
        if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
        if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
        return 0.0;
    };
    return {w(1.0 + s), w(s), w(1.0 - s), w(2.0 - s)};
}

int64_t wrap(int64_t i, int64_t n) { return ((i % n) + n) % n; }

// Periodic 1D upsampling along rows (axis 1) of a [rows, n] buffer.
std::vector<double> upsample_rows(const std::vector<double>& in, int64_t rows, int64_t n,
                                  int factor) {
    std::vector<double> out(static_cast<size_t>(rows * n * factor));
    std::vector<std::array<double, 4>> weights(static_cast<size_t>(factor));
    for (int r = 0; r < factor; ++r) weights[static_cast<size_t>(r)] = cubic_weights(double(r) / factor);
    for (int64_t y = 0; y < rows; ++y) {
        const double* row = in.data() + y * n;
        double* dst = out.data() + y * n * factor;
        for (int64_t i = 0; i < n; ++i) {
            for (int r = 0; r < factor; ++r) {
                const auto& w = weights[static_cast<size_t>(r)];
                double v = 0.0;
                for (int k = 0; k < 4; ++k) v += w[static_cast<size_t>(k)] * row[wrap(i - 1 + k, n)];
                dst[i * factor + r] = v;
            }
        }
    }
    return out;
}

std::vector<double> transpose(const std::vector<double>& in, int64_t rows, int64_t cols) {
    std::vector<double> out(in.size());
    for (int64_t y = 0; y < rows; ++y) {
        for (int64_t x = 0; x < cols; ++x) out[static_cast<size_t>(x * rows + y)] = in[static_cast<size_t>(y * cols + x)];
    }
    return out;
}

} // namespace

Tensor upsample(const Tensor& grid, int factor) {
    require_grid(grid, "upsample");
    require(factor == 2 || factor == 4 || factor == 8, ErrorKind::Parameter,
            "upsample factor must be 2, 4 or 8, got " + std::to_string(factor));
    const int64_t ny = grid.dim(0), nx = grid.dim(1);
    std::vector<double> buf(grid.values().begin(), grid.values().end());
    buf = upsample_rows(buf, ny, nx, factor);            // [ny, nx*f]
    buf = transpose(buf, ny, nx * factor);               // [nx*f, ny]
    buf = upsample_rows(buf, nx * factor, ny, factor);   // [nx*f, ny*f]
    buf = transpose(buf, nx * factor, ny * factor);      // [ny*f, nx*f]
    Tensor out({ny * factor, nx * factor});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
    return out;
}

Field upsample(const Field& low, int factor) {
    Field out = low;
    out.values = upsample(low.values, factor);
    return out;
}

Tensor subsample(const Tensor& grid, int factor) {
    require_grid(grid, "subsample");
    require(factor >= 1, ErrorKind::Parameter, "subsample factor must be >= 1");
    require(grid.dim(0) % factor == 0 && grid.dim(1) % factor == 0, ErrorKind::Shape,
            "grid " + shape_str(grid.shape()) + " is not divisible by factor " +
                std::to_string(factor));
    const int64_t ny = grid.dim(0) / factor, nx = grid.dim(1) / factor;
    Tensor out({ny, nx});
    for (int64_t y = 0; y < ny; ++y) {
        for (int64_t x = 0; x < nx; ++x) out[y * nx + x] = grid[(y * factor) * grid.dim(1) + x * factor];
    }
    return out;
}

Tensor lowpass(const Tensor& grid, int factor) {
    require_grid(grid, "lowpass");
    const int ny = static_cast<int>(grid.dim(0)), nx = static_cast<int>(grid.dim(1));
    std::vector<double> buf(grid.values().begin(), grid.values().end());
    detail::Spectrum2D s = detail::rfft2(buf, ny, nx);
    const int cy = ny / (2 * factor), cx = nx / (2 * factor);
    for (int ky = 0; ky < ny; ++ky) {
        for (int kx = 0; kx < s.cols(); ++kx) {
            if (std::abs(detail::wavenumber(ky, ny)) >= cy || kx >= cx) s.at(ky, kx) = 0.0;
        }
    }
    buf = detail::irfft2(s);
    Tensor out(grid.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(buf[static_cast<size_t>(i)]);
    return out;
}

Tensor normalize(const Tensor& r, double mean, double std) {
    require(std > 0.0, ErrorKind::Parameter, "normalization std must be > 0");
    Tensor out(r.shape());
    for (int64_t i = 0; i < r.numel(); ++i) out[i] = static_cast<float>((r[i] - mean) / std);
    return out;
}

Tensor denormalize(const Tensor& r, double mean, double std) {
    require(std > 0.0, ErrorKind::Parameter, "normalization std must be > 0");
    Tensor out(r.shape());
    for (int64_t i = 0; i < r.numel(); ++i) out[i] = static_cast<float>(r[i] * std + mean);
    return out;
}

ResidualSample make_sr_residual(const Field& hr, int factor, const Normalization& norm,
                                const SrOptions& options) {
    require_grid(hr.values, "make_sr_residual");
    require(hr.values.dim(0) % factor == 0 && hr.values.dim(1) % factor == 0, ErrorKind::Shape,
            "high-resolution grid " + shape_str(hr.values.shape()) +
                " is not divisible by factor " + std::to_string(factor));
    const Tensor source = options.prefilter ? lowpass(hr.values, factor) : hr.values;
    const Tensor base = upsample(subsample(source, factor), factor);
    Tensor residual(hr.values.shape());
    for (int64_t i = 0; i < residual.numel(); ++i) residual[i] = hr.values[i] - base[i];

    ResidualSample out;
    out.residual = normalize(residual, norm.mean, norm.std);
    out.norm_mean = norm.mean;
    out.norm_std = norm.std;
    out.context.task = Task::SR;
    out.context.snapshots = {normalize(base, 0.0, norm.std)};
    out.context.re_tag = hr.re_tag;
    out.context.upsample_factor = factor;
    return out;
}

ResidualSample make_fc_residual(const Field& previous, const Field& current, const Field& future,
                                int s, const Normalization& norm) {
    check_same_shape(current.values, future.values, "make_fc_residual");
    check_same_shape(previous.values, current.values, "make_fc_residual");
    require(s >= 1, ErrorKind::Parameter, "forecast step must be >= 1");
    require(future.time_index - current.time_index == s, ErrorKind::Consistency,
            "future.time_index - current.time_index = " +
                std::to_string(future.time_index - current.time_index) + ", expected s = " +
                std::to_string(s));
    require(previous.time_index < current.time_index, ErrorKind::Consistency,
            "conditioning frames must be ordered (previous, current)");
    Tensor residual(current.values.shape());
    for (int64_t i = 0; i < residual.numel(); ++i) residual[i] = future.values[i] - current.values[i];

    ResidualSample out;
    out.residual = normalize(residual, norm.mean, norm.std);
    out.norm_mean = norm.mean;
    out.norm_std = norm.std;
    out.context.task = Task::FC;
    out.context.snapshots = {normalize(previous.values, 0.0, norm.std),
                             normalize(current.values, 0.0, norm.std)};
    out.context.re_tag = current.re_tag;
    out.context.step_index = s;
    return out;
}

Tensor residual_base(const ResidualSample& sample) {
    const ConditioningContext& ctx = sample.context;
    ctx.validate();
    return denormalize(ctx.snapshots.back(), 0.0, sample.norm_std);
}

Tensor reconstruct(const ResidualSample& sample, const Tensor& normalized_residual) {
    Tensor base = residual_base(sample);
    check_same_shape(base, normalized_residual, "reconstruct");
    Tensor out(base.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<float>(base[i] +
                                    (normalized_residual[i] * sample.norm_std + sample.norm_mean));
    }
    return out;
}

Tensor crop_periodic(const Tensor& grid, int64_t row, int64_t col, int64_t patch) {
    require_grid(grid, "crop_periodic");
    const int64_t ny = grid.dim(0), nx = grid.dim(1);
    Tensor out({patch, patch});
    for (int64_t y = 0; y < patch; ++y) {
        const int64_t sy = wrap(row + y, ny);
        for (int64_t x = 0; x < patch; ++x) out[y * patch + x] = grid[sy * nx + wrap(col + x, nx)];
    }
    return out;
}

std::vector<Patch> extract_patches(const Tensor& grid, int64_t patch, int64_t stride) {
    require_grid(grid, "extract_patches");
    require(stride >= 1, ErrorKind::Parameter, "stride must be >= 1");
    require(patch >= 1 && patch <= grid.dim(0) && patch <= grid.dim(1), ErrorKind::Parameter,
            "patch " + std::to_string(patch) + " does not fit in grid " + shape_str(grid.shape()));
    std::vector<Patch> out;
    for (int64_t r = 0; r + patch <= grid.dim(0); r += stride) {
        for (int64_t c = 0; c + patch <= grid.dim(1); c += stride) {
            out.push_back({crop_periodic(grid, r, c, patch), r, c});
        }
    }
    return out;
}

Tensor stitch(const std::vector<Patch>& patches, int64_t height, int64_t width, StitchMode mode) {
    std::vector<double> acc(static_cast<size_t>(height * width), 0.0);
    std::vector<double> weight(acc.size(), 0.0);
    for (const Patch& p : patches) {
        require(p.values.rank() == 2, ErrorKind::Shape, "patches must be 2D");
        const int64_t ph = p.values.dim(0), pw = p.values.dim(1);
        require(p.row >= 0 && p.col >= 0 && p.row + ph <= height && p.col + pw <= width,
                ErrorKind::Shape, "patch at (" + std::to_string(p.row) + ", " +
                                      std::to_string(p.col) + ") lies outside the output");
        for (int64_t y = 0; y < ph; ++y) {
            for (int64_t x = 0; x < pw; ++x) {
                const size_t o = static_cast<size_t>((p.row + y) * width + p.col + x);
                const double v = p.values[y * pw + x];
                if (mode == StitchMode::Direct) {
                    acc[o] = v;
                    weight[o] = 1.0;
                    continue;
                }
                double w = 1.0;
                if (mode == StitchMode::CosineTaper) {
                    const double wy = std::sin(std::numbers::pi * (y + 0.5) / ph);
                    const double wx = std::sin(std::numbers::pi * (x + 0.5) / pw);
                    w = wy * wy * wx * wx;
                }
                acc[o] += w * v;
                weight[o] += w;
            }
        }
    }
    Tensor out({height, width});
    for (size_t i = 0; i < acc.size(); ++i) {
        if (weight[i] <= 0.0) {
            fail(ErrorKind::Coverage, "pixel (" + std::to_string(i / width) + ", " +
                                          std::to_string(i % width) + ") is not covered by any patch");
        }
        out[static_cast<int64_t>(i)] = static_cast<float>(acc[i] / weight[i]);
    }
    return out;
}

Field Dataset::field(size_t index) const {
    require(index < snapshots.size(), ErrorKind::Data,
            "snapshot index " + std::to_string(index) + " out of range");
    Field f = make_field(snapshots[index], static_cast<int>(index), header.dt, header.re_tag);
    f.quantity = header.quantity;
    return f;
}

std::vector<uint8_t> encode_dataset(const Dataset& ds) {
    const DatasetHeader& h = ds.header;
    detail::ByteWriter w;
    w.raw(kDatasetMagic, sizeof(kDatasetMagic));
    w.u32(h.nx);
    w.u32(h.ny);
    w.u32(static_cast<uint32_t>(ds.snapshots.size()));
    w.f64(h.dt);
    w.f64(h.viscosity);
    w.f64(h.re_tag);
    w.u8(static_cast<uint8_t>(h.quantity));
    w.f64(h.norm_mean);
    w.f64(h.norm_std);
    for (const Tensor& s : ds.snapshots) {
        require(s.rank() == 2 && s.dim(0) == h.ny && s.dim(1) == h.nx, ErrorKind::Shape,
                "snapshot " + shape_str(s.shape()) + " does not match the dataset header");
        w.f32s(s.data(), static_cast<size_t>(s.numel()));
    }
    return std::move(w.bytes());
}

Dataset decode_dataset(const std::vector<uint8_t>& bytes) {
    detail::ByteReader r(bytes, "dataset");
    char magic[8];
    r.raw(magic, sizeof(magic));
    require(std::equal(magic, magic + 8, kDatasetMagic), ErrorKind::Data,
            "not a dataset file (bad magic)");
    Dataset ds;
    DatasetHeader& h = ds.header;
    h.nx = r.u32();
    h.ny = r.u32();
    const uint32_t count = r.u32();
    h.dt = r.f64();
    h.viscosity = r.f64();
    h.re_tag = r.f64();
    const uint8_t q = r.u8();
    require(q <= 2, ErrorKind::Data, "unknown quantity code " + std::to_string(q));
    h.quantity = static_cast<Quantity>(q);
    h.norm_mean = r.f64();
    h.norm_std = r.f64();
    ds.snapshots.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Tensor s({static_cast<int64_t>(h.ny), static_cast<int64_t>(h.nx)});
        r.f32s(s.data(), static_cast<size_t>(s.numel()));
        ds.snapshots.push_back(std::move(s));
    }
    require(r.done(), ErrorKind::Data, "dataset has trailing bytes");
    return ds;
}

void write_dataset(const std::string& path, const Dataset& dataset) {
    detail::write_file(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

namespace detail {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open '" + path + "' for reading");
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "failed writing '" + path + "'");
}

} // namespace detail
} // namespace flexdiff
