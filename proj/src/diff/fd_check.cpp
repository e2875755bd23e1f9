#include "dyad/diff/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dyad::diff {

namespace {

std::vector<std::size_t> pick_entries(std::size_t n, const FdOptions& opt, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= opt.max_entries_per_tensor) return idx;
  for (std::size_t i = 0; i < opt.max_entries_per_tensor; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(opt.max_entries_per_tensor);
  return idx;
}

void update(FdReport& rep, double analytic, double numeric, const FdOptions& opt, const std::string& label) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
  const double rel = std::abs(analytic - numeric) / denom;
  ++rep.entries_checked;
  if (rel > rep.max_rel_error || rep.worst.empty()) {
    rep.max_rel_error = rel;
    rep.worst = label;
  }
}

}  // namespace

FdReport finite_difference_check(const ScalarOp& op, const std::vector<NdArray<double>>& inputs,
                                 const FdOptions& options) {
  std::vector<NdArray<double>> grads;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.input(x));
    Var out = op(tape, vars);
    tape.backward(out);
    for (Var v : vars) grads.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<NdArray<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return tape.value(op(tape, vars))[0];
  };
  FdReport rep;
  RngStream rng(options.seed);
  auto work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i : pick_entries(work[k].size(), options, rng)) {
      const double orig = work[k][i];
      work[k][i] = orig + options.eps;
      const double fp = eval(work);
      work[k][i] = orig - options.eps;
      const double fm = eval(work);
      work[k][i] = orig;
      update(rep, grads[k][i], (fp - fm) / (2 * options.eps), options,
             "input" + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  return rep;
}

FdReport finite_difference_check_params(const std::function<Var(Tape<double>&)>& op, ParamStore<double>& store,
                                        const FdOptions& options) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(op(tape));
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return tape.value(op(tape))[0];
  };
  FdReport rep;
  RngStream rng(options.seed);
  for (const auto& p : store.all()) {
    for (std::size_t i : pick_entries(p->value.size(), options, rng)) {
      const double orig = p->value[i];
      p->value[i] = orig + options.eps;
      const double fp = eval();
      p->value[i] = orig - options.eps;
      const double fm = eval();
      p->value[i] = orig;
      update(rep, p->grad[i], (fp - fm) / (2 * options.eps), options, p->name + "[" + std::to_string(i) + "]");
    }
  }
  store.zero_grad();
  return rep;
}

}  // namespace dyad::diff
