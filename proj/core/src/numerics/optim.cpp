#include "vqmir/numerics/optim.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "vqmir/binary_io.hpp"
#include "vqmir/error.hpp"

namespace vqmir {

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::F64;
  if (s == "f32") return Precision::F32;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void round_to_precision(Parameter& p, Precision precision) {
  if (precision == Precision::F64) return;
  for (double& v : p.value().data()) v = static_cast<double>(static_cast<float>(v));
}

double global_grad_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (!p->has_grad()) continue;
    for (double g : p->grad().data()) sq += g * g;
  }
  return std::sqrt(sq);
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value().shape());
    v_.emplace_back(p->value().shape());
  }
}

double Adam::step(double lr, Precision precision) {
  const double norm = global_grad_norm(params_);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm in Adam step");
  const double clip = config_.clip_norm > 0.0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.has_grad()) continue;
    const Tensor& g = p.grad();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    Tensor& w = p.value();
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
    p.zero_grad();
    round_to_precision(p, precision);
  }
  return norm;
}

void Adam::save(std::ostream& os) const {
  binio::put_u64(os, t_);
  binio::put_u32(os, static_cast<std::uint32_t>(m_.size()));
  for (std::size_t k = 0; k < m_.size(); ++k) {
    binio::put_u64(os, m_[k].numel());
    for (double x : m_[k].data()) binio::put_f64(os, x);
    for (double x : v_[k].data()) binio::put_f64(os, x);
  }
}

void Adam::load(std::istream& is) {
  const std::uint64_t t = binio::get_u64(is);
  const std::uint32_t n = binio::get_u32(is);
  if (n != m_.size()) {
    throw FormatError("optimizer state holds " + std::to_string(n) + " tensors, model has " + std::to_string(m_.size()));
  }
  std::vector<Tensor> m = m_, v = v_;
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t numel = binio::get_u64(is);
    if (numel != m[k].numel()) throw FormatError("optimizer moment size mismatch for " + params_[k]->name());
    for (double& x : m[k].data()) x = binio::get_f64(is);
    for (double& x : v[k].data()) x = binio::get_f64(is);
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

void write_param_table(std::ostream& os, const std::vector<const Parameter*>& params, Precision precision) {
  binio::put_u32(os, static_cast<std::uint32_t>(params.size()));
  binio::put_u32(os, precision == Precision::F32 ? 32u : 64u);
  for (const Parameter* p : params) {
    binio::put_string(os, p->name());
    const Shape& s = p->value().shape();
    binio::put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) binio::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p->value().data()) {
      if (precision == Precision::F32) {
        binio::put_f32(os, static_cast<float>(v));
      } else {
        binio::put_f64(os, v);
      }
    }
  }
}

void read_param_table(std::istream& is, const std::vector<Parameter*>& params) {
  const std::uint32_t n = binio::get_u32(is);
  const std::uint32_t bits = binio::get_u32(is);
  if (bits != 32 && bits != 64) throw FormatError("unsupported parameter width " + std::to_string(bits));
  if (n != params.size()) {
    throw FormatError("parameter table holds " + std::to_string(n) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  std::vector<Tensor> loaded;
  loaded.reserve(n);
  for (Parameter* p : params) {
    const std::string name = binio::get_string(is, 4096);
    if (name != p->name()) throw FormatError("parameter '" + name + "' found where '" + p->name() + "' was expected");
    const std::uint32_t rank = binio::get_u32(is);
    if (rank > 8) throw FormatError("parameter '" + name + "' has implausible rank " + std::to_string(rank));
    Shape s(rank);
    for (auto& d : s) d = binio::get_u32(is);
    if (s != p->value().shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_str(s) + ", model expects " +
                        shape_str(p->value().shape()));
    }
    Tensor t(s);
    for (double& v : t.data()) v = bits == 32 ? static_cast<double>(binio::get_f32(is)) : binio::get_f64(is);
    loaded.push_back(std::move(t));
  }
  // Nothing is assigned until the whole table has been read.
  for (std::size_t k = 0; k < n; ++k) params[k]->value() = std::move(loaded[k]);
}

}  // namespace vqmir
