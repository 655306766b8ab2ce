#pragma once

#include <complex>
#include <vector>

namespace flexdiff::detail {

// Half-complex 2D spectrum of a real [ny, nx] grid: ny rows of nx/2+1 bins.
struct Spectrum2D {
    int ny = 0;
    int nx = 0;
    std::vector<std::complex<double>> c;

    int cols() const { return nx / 2 + 1; }
    std::complex<double>& at(int ky, int kx) { return c[static_cast<size_t>(ky) * cols() + kx]; }
    const std::complex<double>& at(int ky, int kx) const {
        return c[static_cast<size_t>(ky) * cols() + kx];
    }
};

// Unnormalized forward transform.
Spectrum2D rfft2(const std::vector<double>& grid, int ny, int nx);
// Inverse including the 1/(nx*ny) factor, so irfft2(rfft2(x)) == x.
std::vector<double> irfft2(const Spectrum2D& spec);

// Signed wavenumber of FFT bin i on an n-point axis.
inline int wavenumber(int i, int n) { return i <= n / 2 ? i : i - n; }

} // namespace flexdiff::detail
