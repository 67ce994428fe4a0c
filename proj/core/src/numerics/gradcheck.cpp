#include "vqmir/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "vqmir/error.hpp"

namespace vqmir {
namespace {

struct Evaluation {
  double loss = 0.0;
  std::vector<KinkRecord> kinks;
};

Evaluation evaluate(const LossProgram& program) {
  Tape tape;
  const Var loss = program(tape);
  return {tape.value(loss).item(), tape.kinks()};
}

// Reason to exclude a coordinate, or empty when its stencil is smooth.
std::string kink_reason(const std::vector<KinkRecord>& base, const Evaluation& plus, const Evaluation& minus) {
  if (plus.kinks.size() != base.size() || minus.kinks.size() != base.size()) return "tape structure changed";
  for (std::size_t r = 0; r < base.size(); ++r) {
    const KinkRecord& b = base[r];
    for (const Evaluation* e : {&plus, &minus}) {
      const KinkRecord& k = e->kinks[r];
      if (k.state.size() != b.state.size() || k.distance.size() != b.distance.size()) return "tape structure changed";
      for (std::size_t i = 0; i < b.state.size(); ++i) {
        if (k.state[i] != b.state[i]) return b.op + " branch switch";
      }
      for (std::size_t i = 0; i < b.distance.size(); ++i) {
        if (std::abs(b.distance[i]) < b.band && k.distance[i] != b.distance[i]) return b.op + " non-smooth band";
      }
    }
  }
  return {};
}

}  // namespace

std::string GradCheckReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-40s %8s %14s %14s %11s  %s\n", "parameter", "index", "analytic", "numeric",
                "rel_err", "status");
  os << line;
  for (const auto& e : entries) {
    std::string status = e.excluded ? "excluded" : (e.rel_error < tolerance ? "ok" : "FAIL");
    if (!e.reason.empty()) status += " (" + e.reason + ")";
    std::snprintf(line, sizeof line, "%-40s %8zu %14.6e %14.6e %11.3e  %s\n", e.param.c_str(), e.index, e.analytic,
                  e.numeric, e.rel_error, status.c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "checked %zu, excluded %zu, failed %zu, max rel err %.3e (tol %.1e)\n", checked,
                excluded, failed, max_rel_error, tolerance);
  os << line;
  return os.str();
}

GradCheckReport check_gradients(const LossProgram& program, const std::vector<Parameter*>& params,
                                const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;

  for (Parameter* p : params) p->zero_grad();
  std::vector<KinkRecord> base_kinks;
  {
    Tape tape;
    const Var loss = program(tape);
    tape.backward(loss);
    base_kinks = tape.kinks();
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) {
    analytic.push_back(p->has_grad() ? p->grad() : Tensor(p->value().shape()));
    p->zero_grad();
  }

  // Sample (param, index) pairs uniformly over all coordinates.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k]->value().numel(); ++i) coords.emplace_back(k, i);
  }
  if (options.max_coords != 0 && coords.size() > options.max_coords) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  for (const auto& [k, i] : coords) {
    Parameter& p = *params[k];
    double& x = p.value()[i];
    const double saved = x;
    x = saved + options.step;
    const Evaluation plus = evaluate(program);
    x = saved - options.step;
    const Evaluation minus = evaluate(program);
    x = saved;

    GradCheckEntry e;
    e.param = p.name();
    e.index = i;
    e.analytic = analytic[k][i];
    e.numeric = (plus.loss - minus.loss) / (2.0 * options.step);
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), options.abs_floor});
    e.rel_error = std::abs(e.analytic - e.numeric) / denom;
    e.reason = kink_reason(base_kinks, plus, minus);
    e.excluded = !e.reason.empty();
    if (e.excluded) {
      ++report.excluded;
    } else {
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      if (!(e.rel_error < options.tolerance)) ++report.failed;
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace vqmir
