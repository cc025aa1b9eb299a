#include "cam/layers.hpp"

namespace cam {

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::none:
      return x;
    case Activation::relu:
      return ops::relu(x);
    case Activation::tanh:
      return ops::tanh(x);
    case Activation::gelu:
      return ops::gelu(x);
    case Activation::sigmoid:
      return ops::sigmoid(x);
  }
  return x;
}

Linear Linear::create(ParameterSet& params, const std::string& name, Index in,
                      Index out, Rng& rng, bool zero_init) {
  Parameter& w = params.add(name + ".weight", in, out);
  Parameter& b = params.add(name + ".bias", 1, out);
  if (!zero_init) xavier_uniform(w, rng);
  return Linear{&w, &b};
}

Var Linear::operator()(Tape& tape, const Var& x) const {
  return ops::affine(x, tape.param(*weight), tape.param(*bias));
}

Mlp Mlp::create(ParameterSet& params, const std::string& name,
                const std::vector<Index>& sizes, Activation act, Rng& rng) {
  if (sizes.size() < 2) throw ConfigError("Mlp '" + name + "' needs at least two sizes");
  Mlp m;
  m.activation = act;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    m.layers.push_back(Linear::create(params, name + "." + std::to_string(i), sizes[i],
                                      sizes[i + 1], rng));
  }
  return m;
}

Var Mlp::operator()(Tape& tape, const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](tape, h);
    if (i + 1 < layers.size()) h = activate(h, activation);
  }
  return h;
}

Gru Gru::create(ParameterSet& params, const std::string& name, Index in, Index hidden,
                Rng& rng) {
  Parameter& wi = params.add(name + ".input", in, 3 * hidden);
  Parameter& wr = params.add(name + ".recurrent", hidden, 3 * hidden);
  Parameter& bi = params.add(name + ".bias_input", 1, 3 * hidden);
  Parameter& br = params.add(name + ".bias_recurrent", 1, 3 * hidden);
  xavier_uniform(wi, rng);
  xavier_uniform(wr, rng);
  Gru g;
  g.weights = GruWeights{&wi, &wr, &bi, &br};
  g.hidden = hidden;
  return g;
}

Var Gru::run(Tape& tape, const Var& xs, const Var& h0, bool reverse) const {
  Var h = h0;
  const Index n = xs.rows();
  for (Index k = 0; k < n; ++k) {
    const Index t = reverse ? n - 1 - k : k;
    h = step(tape, ops::slice_rows(xs, t, 1), h);
  }
  return h;
}

}  // namespace cam
