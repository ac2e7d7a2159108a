#include "clt/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

namespace clt {

bool all_finite(const DenseArray& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

int kernel_threads() {
    static const int n = [] {
        const char* env = std::getenv("CLT_THREADS");
        if (!env) return 1;
        int v = std::atoi(env);
        return v >= 1 ? v : 1;
    }();
    return n;
}

namespace {

// Row-parallel driver: rows [0,m) split into contiguous blocks, one per
// worker. Each output row is written by exactly one thread, so results
// do not depend on the thread count.
template <class Fn>
void for_rows(int64_t m, Fn&& fn) {
    int nt = kernel_threads();
    if (nt <= 1 || m < 2 * nt) {
        fn(0, m);
        return;
    }
    std::vector<std::thread> workers;
    int64_t per = (m + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        int64_t lo = t * per, hi = std::min<int64_t>(m, lo + per);
        if (lo >= hi) break;
        workers.emplace_back(fn, lo, hi);
    }
    for (auto& w : workers) w.join();
}

}  // namespace

void matmul(const DenseArray& a, const DenseArray& b, DenseArray& out) {
    int64_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dims mismatch");
    out = DenseArray({m, n});
    const double* A = a.data.data();
    const double* B = b.data.data();
    double* C = out.data.data();
    for_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            double* crow = C + i * n;
            for (int64_t p = 0; p < k; ++p) {
                double av = A[i * k + p];
                if (av == 0.0) continue;
                const double* brow = B + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

void matmul_bt(const DenseArray& a, const DenseArray& b, DenseArray& out) {
    int64_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) throw std::invalid_argument("matmul_bt: inner dims mismatch");
    out = DenseArray({m, n});
    const double* A = a.data.data();
    const double* B = b.data.data();
    double* C = out.data.data();
    for_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double s = 0.0;
                const double* ar = A + i * k;
                const double* br = B + j * k;
                for (int64_t p = 0; p < k; ++p) s += ar[p] * br[p];
                C[i * n + j] = s;
            }
    });
}

void matmul_at(const DenseArray& a, const DenseArray& b, DenseArray& out) {
    int64_t k = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul_at: inner dims mismatch");
    out = DenseArray({m, n});
    const double* A = a.data.data();
    const double* B = b.data.data();
    double* C = out.data.data();
    for_rows(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            double* crow = C + i * n;
            for (int64_t p = 0; p < k; ++p) {
                double av = A[p * m + i];
                if (av == 0.0) continue;
                const double* brow = B + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

double finite_diff_check(const std::function<double()>& loss_fn,
                         ParameterStore& params,
                         const ParameterStore& analytic_grads,
                         double step,
                         uint64_t seed) {
    if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be positive");
    if (!params.aligned_with(analytic_grads))
        throw std::invalid_argument("finite_diff_check: gradient store misaligned");

    int64_t total = params.total_params();
    if (total == 0) return 0.0;  // empty set: defined as 0

    // Flat coordinate list (param index, element index).
    std::vector<std::pair<size_t, int64_t>> coords;
    if (total <= 5000) {
        for (size_t p = 0; p < params.size(); ++p)
            for (int64_t i = 0; i < params.entry(p).second.numel(); ++i)
                coords.emplace_back(p, i);
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int64_t> flat(0, total - 1);
        for (int s = 0; s < 2000; ++s) {
            int64_t f = flat(rng);
            for (size_t p = 0; p < params.size(); ++p) {
                int64_t n = params.entry(p).second.numel();
                if (f < n) {
                    coords.emplace_back(p, f);
                    break;
                }
                f -= n;
            }
        }
    }

    double max_rel = 0.0;
    for (auto [p, i] : coords) {
        double& x = params.entry(p).second.at(i);
        double saved = x;
        x = saved + step;
        double lp = loss_fn();
        x = saved - step;
        double lm = loss_fn();
        x = saved;
        double fd = (lp - lm) / (2.0 * step);
        double an = analytic_grads.entry(p).second.at(i);
        // Floor the denominator at 1e-4: central differences carry noise of
        // order eps*|loss|/step + O(step^2), so coordinates with near-zero
        // gradients are held to an absolute tolerance instead.
        double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

}  // namespace clt
