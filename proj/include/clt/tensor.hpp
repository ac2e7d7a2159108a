#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace clt {

// Dense row-major real array. Double precision throughout; reductions
// always accumulate in double.
struct DenseArray {
    std::vector<int64_t> shape;
    std::vector<double> data;

    DenseArray() = default;
    DenseArray(std::vector<int64_t> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e <= 0) throw std::invalid_argument("DenseArray: non-positive extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    double& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }
};

bool all_finite(const DenseArray& a);

// C = A(m,k) * B(k,n). Deterministic; optional row-parallelism is safe
// because each output row is owned by one worker.
void matmul(const DenseArray& a, const DenseArray& b, DenseArray& out);
// C = A(m,k) * B(n,k)^T
void matmul_bt(const DenseArray& a, const DenseArray& b, DenseArray& out);
// C = A(k,m)^T * B(k,n)
void matmul_at(const DenseArray& a, const DenseArray& b, DenseArray& out);

// Thread count for kernels, pinned via the CLT_THREADS environment
// variable (default 1). Read once per process.
int kernel_threads();

// Named, stably ordered flat collection of parameter arrays.
class ParameterStore {
  public:
    void add(const std::string& name, DenseArray arr) {
        if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(arr)});
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    DenseArray& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
        return entries_[it->second].second;
    }
    const DenseArray& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
        return entries_[it->second].second;
    }

    size_t size() const { return entries_.size(); }
    const std::pair<std::string, DenseArray>& entry(size_t i) const { return entries_[i]; }
    std::pair<std::string, DenseArray>& entry(size_t i) { return entries_[i]; }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    bool aligned_with(const ParameterStore& o) const {
        if (size() != o.size()) return false;
        for (size_t i = 0; i < size(); ++i) {
            if (entries_[i].first != o.entries_[i].first) return false;
            if (entries_[i].second.shape != o.entries_[i].second.shape) return false;
        }
        return true;
    }

  private:
    std::vector<std::pair<std::string, DenseArray>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Central finite differences against analytic gradients. Checks every
// coordinate when total params <= 5000, else a seeded sample of 2000.
// analytic_grads is aligned with params (same names/shapes).
double finite_diff_check(const std::function<double()>& loss_fn,
                         ParameterStore& params,
                         const ParameterStore& analytic_grads,
                         double step,
                         uint64_t seed = 20240801);

}  // namespace clt
