#pragma once

#include <map>
#include <string>

#include "vigil/attention.hpp"
#include "vigil/tape.hpp"

namespace vigil {

// Tape-side mirror of one MHSA block. bind copies current weights onto
// the tape (as params or constants); forward rebuilds the exact same
// arithmetic as the plain block_apply path.
struct BlockVars {
  Var wq, wk, wv, wo;
  Var ln1_gain, ln1_bias;
  Var w1, b1, w2, b2;
  Var ln2_gain, ln2_bias;
};

BlockVars bind_block(GradTape& tape, const MHSABlock& block, bool trainable,
                     const std::string& name, std::map<std::string, Var>* registry);

// Full-sequence causal forward for new tokens under `mask` (rows = cols =
// sequence length, nonzero = attend).
Var block_forward_tape(GradTape& tape, const BlockVars& vars, const MHSAConfig& cfg, Var x,
                       const Matrix& mask);

// Collect d(loss)/d(param) for every registered trainable leaf.
std::map<std::string, Matrix> collect_grads(const GradTape& tape,
                                            const std::map<std::string, Var>& registry);

}  // namespace vigil
