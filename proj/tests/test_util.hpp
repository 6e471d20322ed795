#pragma once

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>
#include <string>
#include <unistd.h>

namespace testutil {

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("capdet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace testutil

namespace testutil {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Central finite differences on a few entries of every tensor; loss must be
// a double scalar of the tensors. Entries are the largest-gradient ones plus
// random picks, so tiny gradients do not dominate by roundoff.
inline GradCheckResult grad_check(const std::vector<torch::Tensor>& params, const std::function<torch::Tensor()>& loss,
                                  int per_tensor = 3, double h = 1e-5, double floor = 1e-5, std::uint64_t seed = 0) {
  for (auto p : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  loss().backward();
  GradCheckResult res;
  std::mt19937_64 rng(seed);
  torch::NoGradGuard guard;
  for (auto p : params) {
    if (!p.grad().defined()) continue;
    auto flat_grad = p.grad().reshape(-1);
    auto flat = p.view(-1);
    const auto n = flat.numel();
    std::vector<std::int64_t> idx;
    idx.push_back(flat_grad.abs().argmax().item<std::int64_t>());
    for (int k = 1; k < per_tensor && k < n; ++k) idx.push_back(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n)));
    for (auto i : idx) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = loss().item<double>();
      flat[i] = orig - h;
      const double down = loss().item<double>();
      flat[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = flat_grad[i].item<double>();
      const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testutil
