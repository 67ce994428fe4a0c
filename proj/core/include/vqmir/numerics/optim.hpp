#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vqmir/numerics/tape.hpp"

namespace vqmir {

// Storage precision of trainable weights. Arithmetic is always double; in
// F32 mode parameters are rounded to float after every update.
enum class Precision { F64, F32 };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& s);
void round_to_precision(Parameter& p, Precision precision);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global-norm clip, 0 disables
};

// Adam over a fixed parameter list. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config = {});

  // Applies one update with learning rate `lr`, clears the gradients and
  // returns the global gradient norm measured before clipping.
  double step(double lr, Precision precision = Precision::F64);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

  void save(std::ostream& os) const;
  // Throws FormatError when the saved moments do not fit the parameter list.
  void load(std::istream& is);

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// L2 norm over the gradients of parameters that hold one.
double global_grad_norm(const std::vector<Parameter*>& params);

// Named parameter table: u32 count, then per parameter its name, rank,
// dimensions and values stored as f32 or f64 according to `precision`.
void write_param_table(std::ostream& os, const std::vector<const Parameter*>& params, Precision precision);
// Loads values into `params`, matching names and shapes in order.
void read_param_table(std::istream& is, const std::vector<Parameter*>& params);

}  // namespace vqmir
