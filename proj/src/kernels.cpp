#include "timeguard/core/kernels.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tg {

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace kernels {
namespace {

void check(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

// Row kernels shared by both policies.
inline void matmul_row(const Mat& a, const Mat& b, Mat& c, std::size_t i) {
    double* out = c.data.data() + i * c.cols;
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
        const double s = arow[k];
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t j = 0; j < b.cols; ++j) out[j] += s * brow[j];
    }
}

inline void matmul_nt_row(const Mat& a, const Mat& b, Mat& c, std::size_t i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
        const double* brow = b.data.data() + j * b.cols;
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
        c.data[i * c.cols + j] = acc;
    }
}

// Output row i of A^T B: sum over k of A(k,i) * B(k,:)
inline void matmul_tn_row(const Mat& a, const Mat& b, Mat& c, std::size_t i) {
    double* out = c.data.data() + i * c.cols;
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double s = a.data[k * a.cols + i];
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t j = 0; j < b.cols; ++j) out[j] += s * brow[j];
    }
}

inline void softmax_row(Mat& m, std::size_t i) {
    auto r = m.row(i);
    if (r.empty()) return;
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : r) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : r) v /= sum;
}

template <typename RowFn>
void for_rows(std::size_t n, Exec exec, RowFn&& fn) {
    if (exec == Exec::parallel) {
        const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < n; ++i) fn(i);
    }
}

}  // namespace

Mat matmul(const Mat& a, const Mat& b, Exec exec) {
    check(a.cols == b.rows, "matmul: inner dimensions differ");
    Mat c(a.rows, b.cols);
    for_rows(a.rows, exec, [&](std::size_t i) { matmul_row(a, b, c, i); });
    return c;
}

Mat matmul_tn(const Mat& a, const Mat& b, Exec exec) {
    check(a.rows == b.rows, "matmul_tn: row counts differ");
    Mat c(a.cols, b.cols);
    for_rows(a.cols, exec, [&](std::size_t i) { matmul_tn_row(a, b, c, i); });
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b, Exec exec) {
    check(a.cols == b.cols, "matmul_nt: column counts differ");
    Mat c(a.rows, b.rows);
    for_rows(a.rows, exec, [&](std::size_t i) { matmul_nt_row(a, b, c, i); });
    return c;
}

void softmax_rows(Mat& m, Exec exec) {
    for_rows(m.rows, exec, [&](std::size_t i) { softmax_row(m, i); });
}

void add_inplace(Mat& a, const Mat& b) {
    check(a.rows == b.rows && a.cols == b.cols, "add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void axpy(Mat& a, double s, const Mat& b) {
    check(a.rows == b.rows && a.cols == b.cols, "axpy: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += s * b.data[i];
}

Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

double frobenius(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace kernels
}  // namespace tg
