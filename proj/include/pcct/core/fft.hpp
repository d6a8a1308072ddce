#pragma once

#include <fftw3.h>

#include <complex>
#include <memory>
#include <span>
#include <vector>

namespace pcct {

/// RAII wrapper for a 1D real-to-complex / complex-to-real FFTW plan pair of
/// fixed length. FFTW_ESTIMATE keeps plans (and results) reproducible.
class RealFft1d {
 public:
  explicit RealFft1d(int n)
      : n_(n),
        real_(fftw_alloc_real(n), fftw_free),
        spec_(fftw_alloc_complex(n / 2 + 1), fftw_free) {
    fwd_ = fftw_plan_dft_r2c_1d(n, real_.get(), spec_.get(), FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(n, spec_.get(), real_.get(), FFTW_ESTIMATE);
  }
  RealFft1d(const RealFft1d&) = delete;
  RealFft1d& operator=(const RealFft1d&) = delete;
  ~RealFft1d() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }

  int size() const { return n_; }
  int spectrum_size() const { return n_ / 2 + 1; }

  /// Forward transform of `x` (zero-padded to n).
  std::vector<std::complex<double>> forward(std::span<const double> x) {
    std::fill(real_.get(), real_.get() + n_, 0.0);
    std::copy(x.begin(), x.end(), real_.get());
    fftw_execute(fwd_);
    std::vector<std::complex<double>> out(spectrum_size());
    for (int k = 0; k < spectrum_size(); ++k) out[k] = {spec_.get()[k][0], spec_.get()[k][1]};
    return out;
  }

  /// Circular convolution with a precomputed real-valued frequency response,
  /// in place on a zero-padded copy; writes the first x.size() outputs to y.
  void filter(std::span<const double> x, std::span<const double> response, std::span<double> y) {
    std::fill(real_.get(), real_.get() + n_, 0.0);
    std::copy(x.begin(), x.end(), real_.get());
    fftw_execute(fwd_);
    for (int k = 0; k < spectrum_size(); ++k) {
      spec_.get()[k][0] *= response[k];
      spec_.get()[k][1] *= response[k];
    }
    fftw_execute(inv_);
    const double scale = 1.0 / n_;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = real_.get()[i] * scale;
  }

 private:
  int n_;
  std::unique_ptr<double, decltype(&fftw_free)> real_;
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> spec_;
  fftw_plan fwd_{};
  fftw_plan inv_{};
};

/// |DFT|^2 of a real rows x cols array, full (unshifted) layout.
inline std::vector<double> power_spectrum_2d(std::span<const double> x, int rows, int cols) {
  std::unique_ptr<fftw_complex, decltype(&fftw_free)> buf(
      fftw_alloc_complex(static_cast<std::size_t>(rows) * cols), fftw_free);
  fftw_plan plan = fftw_plan_dft_2d(rows, cols, buf.get(), buf.get(), FFTW_FORWARD, FFTW_ESTIMATE);
  for (std::size_t i = 0; i < x.size(); ++i) {
    buf.get()[i][0] = x[i];
    buf.get()[i][1] = 0.0;
  }
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  std::vector<double> p(x.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = buf.get()[i][0] * buf.get()[i][0] + buf.get()[i][1] * buf.get()[i][1];
  }
  return p;
}

}  // namespace pcct
