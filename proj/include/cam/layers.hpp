#pragma once

#include "cam/autodiff.hpp"

#include <string>
#include <vector>

namespace cam {

enum class Activation { none, relu, tanh, gelu, sigmoid };

Var activate(const Var& x, Activation act);

struct Linear {
  const Parameter* weight = nullptr;  // in x out
  const Parameter* bias = nullptr;    // 1 x out

  static Linear create(ParameterSet& params, const std::string& name, Index in,
                       Index out, Rng& rng, bool zero_init = false);
  Var operator()(Tape& tape, const Var& x) const;
  Index in_features() const { return weight->value.rows(); }
  Index out_features() const { return weight->value.cols(); }
};

// Stack of Linear layers; `activation` follows every layer but the last.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::relu;

  static Mlp create(ParameterSet& params, const std::string& name,
                    const std::vector<Index>& sizes, Activation act, Rng& rng);
  Var operator()(Tape& tape, const Var& x) const;
};

struct Gru {
  GruWeights weights;
  Index hidden = 0;

  static Gru create(ParameterSet& params, const std::string& name, Index in,
                    Index hidden, Rng& rng);
  Var step(Tape& tape, const Var& x, const Var& h) const {
    return gru_cell(tape, x, h, weights);
  }
  // Runs over the rows of `xs` from `h0`; returns the final hidden state.
  Var run(Tape& tape, const Var& xs, const Var& h0, bool reverse = false) const;
};

}  // namespace cam
