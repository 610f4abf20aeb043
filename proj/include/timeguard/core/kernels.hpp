#pragma once

#include "timeguard/core/exec.hpp"
#include "timeguard/core/mat.hpp"

namespace tg::kernels {

// Dense products. Each output row is accumulated in a fixed k-order, so the
// parallel (row-split) variants are bit-identical to the serial ones.

/// C = A * B
Mat matmul(const Mat& a, const Mat& b, Exec exec = Exec::serial);
/// C = A^T * B
Mat matmul_tn(const Mat& a, const Mat& b, Exec exec = Exec::serial);
/// C = A * B^T
Mat matmul_nt(const Mat& a, const Mat& b, Exec exec = Exec::serial);

/// In-place numerically stable softmax of every row.
void softmax_rows(Mat& m, Exec exec = Exec::serial);

/// a += b (shapes must match)
void add_inplace(Mat& a, const Mat& b);
/// a += s * b
void axpy(Mat& a, double s, const Mat& b);

Mat transpose(const Mat& a);

double frobenius(const Mat& a);

}  // namespace tg::kernels
