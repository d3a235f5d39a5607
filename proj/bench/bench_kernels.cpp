// Times the serial reference against the OpenMP path for the hot kernels and
// checks that both produce bit-identical output while at it.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "minivlm/kernels.hpp"

namespace ker = minivlm::kernels;
using ker::i64;

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto start = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto stop = Clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() /
         static_cast<double>(reps);
}

std::vector<double> random_vec(i64 n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = dist(rng);
  return v;
}

struct Case {
  const char* name;
  double serial_ms;
  double parallel_ms;
  double gflops;
  bool identical;
};

}  // namespace

int main() {
  std::mt19937_64 rng(42);
  std::vector<Case> cases;

  {  // matmul shaped like a training-step projection: [2048,64] x [64,256]
    const i64 m = 2048, k = 64, n = 256;
    auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
    std::vector<double> c_s(m * n), c_p(m * n);
    const double flops = 2.0 * m * k * n;
    const double s = time_ms(
        [&] { ker::matmul(c_s.data(), a.data(), b.data(), 1, m, k, n, 0, 0, false, false); },
        10);
    const double p = time_ms(
        [&] { ker::matmul(c_p.data(), a.data(), b.data(), 1, m, k, n, 0, 0, false, true); },
        10);
    cases.push_back({"matmul 2048x64x256", s, p, flops / (p * 1e6),
                     std::memcmp(c_s.data(), c_p.data(), c_s.size() * 8) == 0});
  }
  {  // attention-score shape: batch of [T,dh] x [dh,T]
    const i64 batch = 16, t = 256, dh = 32;
    auto a = random_vec(batch * t * dh, rng), b = random_vec(batch * dh * t, rng);
    std::vector<double> c_s(batch * t * t), c_p(batch * t * t);
    const double flops = 2.0 * batch * t * dh * t;
    const double s = time_ms(
        [&] {
          ker::matmul(c_s.data(), a.data(), b.data(), batch, t, dh, t, t * dh,
                      dh * t, false, false);
        },
        5);
    const double p = time_ms(
        [&] {
          ker::matmul(c_p.data(), a.data(), b.data(), batch, t, dh, t, t * dh,
                      dh * t, false, true);
        },
        5);
    cases.push_back({"matmul 16x[256,32]x[32,256]", s, p, flops / (p * 1e6),
                     std::memcmp(c_s.data(), c_p.data(), c_s.size() * 8) == 0});
  }
  {  // softmax rows
    const i64 rows = 4096, cols = 256;
    auto x = random_vec(rows * cols, rng);
    std::vector<double> y_s(rows * cols), y_p(rows * cols);
    const double s = time_ms(
        [&] { ker::softmax_axis(y_s.data(), x.data(), rows, cols, 1, false, false); },
        10);
    const double p = time_ms(
        [&] { ker::softmax_axis(y_p.data(), x.data(), rows, cols, 1, false, true); },
        10);
    cases.push_back({"softmax 4096x256", s, p, 0.0,
                     std::memcmp(y_s.data(), y_p.data(), y_s.size() * 8) == 0});
  }
  {  // layer norm rows
    const i64 rows = 8192, d = 64;
    auto x = random_vec(rows * d, rng);
    std::vector<double> y_s(rows * d), y_p(rows * d), mu(rows), rs(rows);
    const double s = time_ms(
        [&] {
          ker::rowstd_forward(y_s.data(), mu.data(), rs.data(), x.data(), rows, d,
                              1e-12, nullptr, nullptr, false);
        },
        10);
    const double p = time_ms(
        [&] {
          ker::rowstd_forward(y_p.data(), mu.data(), rs.data(), x.data(), rows, d,
                              1e-12, nullptr, nullptr, true);
        },
        10);
    cases.push_back({"layer_norm 8192x64", s, p, 0.0,
                     std::memcmp(y_s.data(), y_p.data(), y_s.size() * 8) == 0});
  }

  std::printf("threads available: %d\n", ker::max_threads());
  std::printf("%-28s %12s %12s %9s %9s %s\n", "kernel", "serial(ms)",
              "openmp(ms)", "speedup", "GFLOP/s", "bit-identical");
  for (const Case& c : cases) {
    std::printf("%-28s %12.3f %12.3f %8.2fx %9.2f %s\n", c.name, c.serial_ms,
                c.parallel_ms, c.serial_ms / c.parallel_ms, c.gflops,
                c.identical ? "yes" : "NO");
  }
  for (const Case& c : cases)
    if (!c.identical) return 1;
  return 0;
}
