#include "uslseg/nn/optim.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>

#include "uslseg/errors.hpp"

namespace uslseg::nn {

Sgd::Sgd(std::vector<Param*> params, SgdConfig config) : params_(std::move(params)), config_(config) {
  velocity_.reserve(params_.size());
  for (Param* p : params_) velocity_.emplace_back(p->value.size(), 0.0f);
}

void Sgd::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void Sgd::step(double lr) {
  const auto mu = static_cast<float>(config_.momentum);
  const auto wd = static_cast<float>(config_.weight_decay);
  const auto rate = static_cast<float>(lr);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    auto& v = velocity_[k];
    const float decay = p.decay ? wd : 0.0f;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i] + decay * p.value[i];
      v[i] = mu * v[i] + g;
      p.value[i] -= rate * v[i];
    }
  }
}

double cosine_lr(double base, long step, long total_steps) {
  if (total_steps <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

double poly_lr(double base, long step, long total_steps, double power) {
  if (total_steps <= 0) return base;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

void copy_params(Module& src, Module& dst) {
  auto a = src.params();
  auto b = dst.params();
  if (a.size() != b.size()) throw ShapeError("copy_params: architectures differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.size() != b[i]->value.size()) throw ShapeError("copy_params: size mismatch at " + a[i]->name);
    b[i]->value = a[i]->value;
  }
  auto ba = src.buffers();
  auto bb = dst.buffers();
  if (ba.size() != bb.size()) throw ShapeError("copy_params: buffer layout differs");
  for (std::size_t i = 0; i < ba.size(); ++i) *bb[i].values = *ba[i].values;
}

namespace {

constexpr char kMagic[8] = {'U', 'S', 'L', 'W', 'T', 'S', '0', '1'};

void write_entry(std::ofstream& out, const std::string& name, const std::vector<float>& values) {
  const auto len = static_cast<std::uint32_t>(name.size());
  const auto count = static_cast<std::uint64_t>(values.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(name.data(), len);
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
}

}  // namespace

void save_weights(Module& module, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write weights to " + path.string());
  auto params = module.params();
  auto buffers = module.buffers();
  out.write(kMagic, sizeof(kMagic));
  const auto total = static_cast<std::uint32_t>(params.size() + buffers.size());
  out.write(reinterpret_cast<const char*>(&total), sizeof(total));
  for (Param* p : params) write_entry(out, p->name, p->value);
  for (const Buffer& b : buffers) write_entry(out, b.name, *b.values);
  if (!out) throw Error("failed writing weights to " + path.string());
}

void load_weights(Module& module, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open weights " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic)))
    throw Error("not a weight file: " + path.string());
  std::uint32_t total = 0;
  in.read(reinterpret_cast<char*>(&total), sizeof(total));
  std::map<std::string, std::vector<float>> entries;
  for (std::uint32_t k = 0; k < total; ++k) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    std::vector<float> values(count);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw Error("truncated weight file: " + path.string());
    entries.emplace(std::move(name), std::move(values));
  }
  auto take = [&](const std::string& name, std::vector<float>& dst) {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error("weight file " + path.string() + " lacks '" + name + "'");
    if (it->second.size() != dst.size()) throw ShapeError("weight '" + name + "' has wrong size in " + path.string());
    dst = it->second;
  };
  for (Param* p : module.params()) take(p->name, p->value);
  for (const Buffer& b : module.buffers()) take(b.name, *b.values);
}

bool all_finite(const std::vector<float>& v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace uslseg::nn
