#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vqmir/numerics/tape.hpp"

namespace vqmir {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference step h
  double tolerance = 1e-4;  // max allowed relative error
  // Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
  // round-off on near-zero gradients from reading as failures.
  double abs_floor = 1e-5;
  std::size_t max_coords = 64;  // sampled coordinates across all parameters; 0 = all
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool excluded = false;
  std::string reason;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t failed = 0;
  double tolerance = 0.0;

  bool passed() const { return failed == 0 && checked > 0; }
  // Plain-text table, one row per sampled coordinate.
  std::string table() const;
};

// Builds the scalar loss on a fresh tape. Must be deterministic.
using LossProgram = std::function<Var(Tape&)>;

// Compares reverse-mode gradients of `program` with central differences on
// sampled parameter coordinates. Coordinates whose stencil crosses a kink
// registered on the tape (or moves an element sitting inside its kink band)
// are excluded and reported as such. Parameter gradients are cleared on exit.
GradCheckReport check_gradients(const LossProgram& program, const std::vector<Parameter*>& params,
                                const GradCheckOptions& options = {});

}  // namespace vqmir
