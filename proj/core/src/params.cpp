#include "lfs/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace lfs {

namespace {

constexpr char kMagic[8] = {'L', 'F', 'S', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

bool read_u64(std::istream& is, uint64_t& v) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (is.gcount() != 8) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return true;
}

void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

bool read_f64(std::istream& is, double& v) {
  uint64_t bits;
  if (!read_u64(is, bits)) return false;
  std::memcpy(&v, &bits, 8);
  return true;
}

}  // namespace

Tensor& ParameterStore::add(const std::string& name, Tensor value,
                            bool trainable) {
  if (has(name))
    throw ValidationError("parameter registered twice: " + name);
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  p.trainable = trainable;
  items_.push_back(std::move(p));
  index_.push_back(items_.size() - 1);
  return items_.back().value;
}

bool ParameterStore::has(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return true;
  return false;
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return p;
  throw ValidationError("unknown parameter: " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return p;
  throw ValidationError("unknown parameter: " + name);
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.name);
  return out;
}

int64_t ParameterStore::total_values(bool trainable_only) const {
  int64_t n = 0;
  for (const auto& p : items_)
    if (!trainable_only || p.trainable) n += p.value.numel();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& p : items_) p.value.zero_grad();
}

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  for (const auto& p : store.items()) {
    write_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& shape = p.value.shape();
    write_u64(os, shape.size());
    for (int64_t e : shape) write_u64(os, static_cast<uint64_t>(e));
    for (real v : p.value.data()) write_f64(os, static_cast<double>(v));
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointMismatchError("bad checkpoint magic: " + path);

  struct Record {
    Shape shape;
    std::vector<double> values;
  };
  std::map<std::string, Record> records;
  for (;;) {
    uint64_t name_len;
    if (!read_u64(is, name_len)) break;  // clean EOF
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (is.gcount() != static_cast<std::streamsize>(name_len))
      throw CheckpointMismatchError("truncated checkpoint: " + path);
    uint64_t rank;
    if (!read_u64(is, rank))
      throw CheckpointMismatchError("truncated checkpoint: " + path);
    Record rec;
    int64_t numel = 1;
    for (uint64_t i = 0; i < rank; ++i) {
      uint64_t extent;
      if (!read_u64(is, extent))
        throw CheckpointMismatchError("truncated checkpoint: " + path);
      rec.shape.push_back(static_cast<int64_t>(extent));
      numel *= static_cast<int64_t>(extent);
    }
    rec.values.resize(numel);
    for (int64_t i = 0; i < numel; ++i) {
      if (!read_f64(is, rec.values[i]))
        throw CheckpointMismatchError("truncated checkpoint: " + path);
    }
    if (records.count(name))
      throw CheckpointMismatchError("duplicate record in checkpoint: " + name);
    records.emplace(std::move(name), std::move(rec));
  }

  // strict both ways so a renamed or re-shaped model never half-loads
  for (auto& p : store.items()) {
    auto it = records.find(p.name);
    if (it == records.end())
      throw CheckpointMismatchError("checkpoint is missing parameter: " +
                                    p.name);
    if (it->second.shape != p.value.shape())
      throw CheckpointMismatchError(
          "shape mismatch for " + p.name + ": checkpoint " +
          shape_str(it->second.shape) + " vs model " +
          shape_str(p.value.shape()));
  }
  for (const auto& [name, rec] : records) {
    if (!store.has(name))
      throw CheckpointMismatchError("checkpoint has unknown parameter: " +
                                    name);
  }
  for (auto& p : store.items()) {
    const auto& values = records.at(p.name).values;
    auto& dst = p.value.mutable_data();
    for (size_t i = 0; i < values.size(); ++i)
      dst[i] = static_cast<real>(values[i]);
    p.value.zero_grad();
    p.momentum.clear();
  }
}

void sgd_nesterov_step(ParameterStore& store, const SgdConfig& config) {
  for (auto& p : store.items()) {
    if (!p.trainable) continue;
    const auto& grad = p.value.grad();
    if (grad.empty()) continue;  // parameter unused by this loss
    for (real g : grad) {
      if (!std::isfinite(g))
        throw TrainingDivergenceError("non-finite gradient in " + p.name);
    }
    auto& w = p.value.mutable_data();
    if (p.momentum.empty()) p.momentum.assign(w.size(), real{0});
    for (size_t i = 0; i < w.size(); ++i) {
      const real g = grad[i] + config.weight_decay * w[i];
      p.momentum[i] = config.momentum * p.momentum[i] + g;
      w[i] -= config.lr * (g + config.momentum * p.momentum[i]);
    }
  }
  store.zero_grads();
}

GradCheckResult grad_check(ParameterStore& store,
                           const std::function<Tensor()>& loss_fn,
                           const GradCheckConfig& config) {
  auto selected = [&](const Parameter& p) {
    if (!p.trainable) return false;
    if (config.include.empty()) return true;
    for (const auto& name : config.include)
      if (p.name == name) return true;
    return false;
  };

  // Buffers mutate during forward passes (running stats); freeze them so
  // every evaluation sees the same state.
  std::vector<std::vector<real>> buffer_snapshot;
  for (auto& p : store.items())
    if (!p.trainable) buffer_snapshot.push_back(p.value.data());
  auto restore_buffers = [&]() {
    size_t k = 0;
    for (auto& p : store.items())
      if (!p.trainable) p.value.mutable_data() = buffer_snapshot[k++];
  };

  store.zero_grads();
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::pair<std::string, std::vector<real>>> analytic;
  for (auto& p : store.items()) {
    if (!selected(p)) continue;
    std::vector<real> g = p.value.grad();
    if (g.empty()) g.assign(p.value.numel(), real{0});
    analytic.emplace_back(p.name, std::move(g));
  }
  store.zero_grads();
  restore_buffers();

  GradCheckResult result;
  result.ok = true;
  for (auto& [name, grads] : analytic) {
    auto& w = store.get(name).value.mutable_data();
    for (size_t i = 0; i < w.size(); ++i) {
      const real saved = w[i];
      const real a = grads[i];
      auto numeric_at = [&](real h) {
        w[i] = saved + h;
        const real f_plus = loss_fn().value();
        restore_buffers();
        w[i] = saved - h;
        const real f_minus = loss_fn().value();
        restore_buffers();
        w[i] = saved;
        return (f_plus - f_minus) / (2 * h);
      };
      auto rel_of = [&](real n) {
        const real denom =
            std::max({std::abs(a), std::abs(n), config.denom_floor});
        return std::abs(a - n) / denom;
      };
      real h = config.step;
      real numeric = numeric_at(h);
      real rel = rel_of(numeric);
      const real goal = config.tolerance * config.refine_margin;
      for (int r = 0; r < config.refinements && rel > goal; ++r) {
        h /= 10;
        const real refined = numeric_at(h);
        const real refined_rel = rel_of(refined);
        if (refined_rel < rel) {
          numeric = refined;
          rel = refined_rel;
        }
      }
      ++result.values_checked;
      if (rel > result.worst_rel_err) {
        result.worst_rel_err = rel;
        result.worst_name = name;
        result.worst_index = static_cast<int64_t>(i);
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
      if (rel > config.tolerance) result.ok = false;
    }
  }
  store.zero_grads();
  restore_buffers();
  return result;
}

}  // namespace lfs
