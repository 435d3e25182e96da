#include "vigil/tape_blocks.hpp"

#include <cmath>

namespace vigil {

BlockVars bind_block(GradTape& tape, const MHSABlock& block, bool trainable,
                     const std::string& name, std::map<std::string, Var>* registry) {
  auto bind = [&](const Matrix& m, const char* field) {
    Var v = trainable ? tape.param(m) : tape.constant(m);
    if (trainable && registry) (*registry)[name + "." + field] = v;
    return v;
  };
  BlockVars vars;
  vars.wq = bind(block.wq, "wq");
  vars.wk = bind(block.wk, "wk");
  vars.wv = bind(block.wv, "wv");
  vars.wo = bind(block.wo, "wo");
  vars.ln1_gain = bind(block.ln1_gain, "ln1_gain");
  vars.ln1_bias = bind(block.ln1_bias, "ln1_bias");
  vars.w1 = bind(block.w1, "w1");
  vars.b1 = bind(block.b1, "b1");
  vars.w2 = bind(block.w2, "w2");
  vars.b2 = bind(block.b2, "b2");
  vars.ln2_gain = bind(block.ln2_gain, "ln2_gain");
  vars.ln2_bias = bind(block.ln2_bias, "ln2_bias");
  return vars;
}

Var block_forward_tape(GradTape& tape, const BlockVars& vars, const MHSAConfig& cfg, Var x,
                       const Matrix& mask) {
  const int dh = cfg.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Var a = tape.layer_norm(x, vars.ln1_gain, vars.ln1_bias);
  Var q = tape.matmul(a, vars.wq);
  Var k = tape.matmul(a, vars.wk);
  Var v = tape.matmul(a, vars.wv);

  std::vector<Var> heads;
  heads.reserve(cfg.n_heads);
  for (int h = 0; h < cfg.n_heads; ++h) {
    Var qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    Var attn = tape.softmax_rows_masked(scores, mask);
    heads.push_back(tape.matmul(attn, vh));
  }
  Var ctx = cfg.n_heads == 1 ? heads.front() : tape.concat_cols(heads);
  Var h1 = tape.add(x, tape.matmul(ctx, vars.wo));

  Var b = tape.layer_norm(h1, vars.ln2_gain, vars.ln2_bias);
  Var f1 = tape.gelu(tape.add_row(tape.matmul(b, vars.w1), vars.b1));
  Var f2 = tape.add_row(tape.matmul(f1, vars.w2), vars.b2);
  return tape.add(h1, f2);
}

std::map<std::string, Matrix> collect_grads(const GradTape& tape,
                                            const std::map<std::string, Var>& registry) {
  std::map<std::string, Matrix> grads;
  for (const auto& [name, var] : registry) grads[name] = tape.grad(var);
  return grads;
}

}  // namespace vigil
