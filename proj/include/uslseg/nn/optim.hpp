#pragma once

#include <filesystem>
#include <vector>

#include "uslseg/nn/layers.hpp"

namespace uslseg::nn {

struct SgdConfig {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// SGD with heavy-ball momentum; weight decay is folded into the gradient and
// skipped for parameters flagged decay=false (norm affine terms, biases).
class Sgd {
 public:
  Sgd(std::vector<Param*> params, SgdConfig config);

  void step(double lr);
  void zero_grad();
  const SgdConfig& config() const { return config_; }

 private:
  std::vector<Param*> params_;
  SgdConfig config_;
  std::vector<std::vector<float>> velocity_;
};

double cosine_lr(double base, long step, long total_steps);
double poly_lr(double base, long step, long total_steps, double power = 0.9);

// Copies values of `src` into `dst` (same architecture, same order).
void copy_params(Module& src, Module& dst);

// Binary weight blob: parameters and buffers keyed by name.
void save_weights(Module& module, const std::filesystem::path& path);
void load_weights(Module& module, const std::filesystem::path& path);

bool all_finite(const std::vector<float>& v);

}  // namespace uslseg::nn
