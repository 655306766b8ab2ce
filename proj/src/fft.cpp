#include "fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

namespace flexdiff::detail {

namespace {

struct Plans {
    fftw_plan forward = nullptr;
    fftw_plan inverse = nullptr;
};

std::mutex plan_mutex;

// Planning is not thread-safe in FFTW; execution with new arrays is.
const Plans& plans_for(int ny, int nx) {
    static std::map<std::pair<int, int>, Plans> cache;
    std::lock_guard<std::mutex> lock(plan_mutex);
    auto it = cache.find({ny, nx});
    if (it != cache.end()) return it->second;
    std::vector<double> real(static_cast<size_t>(ny) * nx);
    std::vector<std::complex<double>> spec(static_cast<size_t>(ny) * (nx / 2 + 1));
    auto* cplx = reinterpret_cast<fftw_complex*>(spec.data());
    Plans p;
    p.forward = fftw_plan_dft_r2c_2d(ny, nx, real.data(), cplx, FFTW_ESTIMATE | FFTW_UNALIGNED);
    p.inverse = fftw_plan_dft_c2r_2d(ny, nx, cplx, real.data(),
                                     FFTW_ESTIMATE | FFTW_UNALIGNED | FFTW_DESTROY_INPUT);
    return cache.emplace(std::make_pair(ny, nx), p).first->second;
}

} // namespace

Spectrum2D rfft2(const std::vector<double>& grid, int ny, int nx) {
    Spectrum2D s;
    s.ny = ny;
    s.nx = nx;
    s.c.resize(static_cast<size_t>(ny) * s.cols());
    std::vector<double> in(grid);
    fftw_execute_dft_r2c(plans_for(ny, nx).forward, in.data(),
                         reinterpret_cast<fftw_complex*>(s.c.data()));
    return s;
}

std::vector<double> irfft2(const Spectrum2D& spec) {
    std::vector<std::complex<double>> work(spec.c);
    std::vector<double> out(static_cast<size_t>(spec.ny) * spec.nx);
    fftw_execute_dft_c2r(plans_for(spec.ny, spec.nx).inverse,
                         reinterpret_cast<fftw_complex*>(work.data()), out.data());
    const double scale = 1.0 / (static_cast<double>(spec.ny) * spec.nx);
    for (double& v : out) v *= scale;
    return out;
}

} // namespace flexdiff::detail
