#pragma once

#include <optional>
#include <vector>

#include "vigil/matrix.hpp"

namespace vigil::ops {

// Plain forward kernels. The streaming and offline inference paths call
// these directly; the grad tape wraps the same functions so both paths
// compute bit-identical values.

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
// Broadcast a 1 x C row over every row of a.
Matrix add_row(const Matrix& a, const Matrix& row);

// Row-wise softmax, stabilized by row-max subtraction. With a mask
// (same shape, nonzero = keep) masked entries come out exactly 0.
// A fully masked row throws DegenerateRowError.
Matrix softmax_rows(const Matrix& x, const Matrix* mask = nullptr);

// Per-row normalization to zero mean / unit variance (eps-regularized),
// then out = normalized * gain + bias. gain/bias are 1 x cols.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps = 1e-5);

Matrix gelu(const Matrix& x);

// Mean over rows of -log softmax(logits)[target]. Targets out of range
// throw IndexError.
double cross_entropy(const Matrix& logits, const std::vector<int>& targets);

// Mean of squared element-wise differences over all elements.
double mse(const Matrix& a, const Matrix& b);

Matrix slice_rows(const Matrix& a, int r0, int r1);
Matrix slice_cols(const Matrix& a, int c0, int c1);
Matrix concat_rows(const std::vector<Matrix>& parts);
Matrix concat_cols(const std::vector<Matrix>& parts);

// Lower-triangular ones (column <= row), the causal attention mask.
Matrix causal_mask(int n);

}  // namespace vigil::ops
