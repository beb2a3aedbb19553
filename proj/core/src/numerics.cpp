#include "fvlab/numerics.hpp"

// All kernels are header-inline templates; this TU pins explicit
// instantiations for the two scalar types the project uses.

namespace fvlab {

template struct Mat<float>;
template struct Mat<double>;

template void gemm<float>(const float*, const float*, float*, int, int, int, bool);
template void gemm<double>(const double*, const double*, double*, int, int, int, bool);

template Mat<float> matmul<float>(const Mat<float>&, const Mat<float>&);
template Mat<double> matmul<double>(const Mat<double>&, const Mat<double>&);

template Mat<float> transpose<float>(const Mat<float>&);
template Mat<double> transpose<double>(const Mat<double>&);

template void softmax_inplace<float>(float*, int);
template void softmax_inplace<double>(double*, int);

template void layernorm_into<float>(const float*, const float*, const float*, int,
                                    float, float*);
template void layernorm_into<double>(const double*, const double*, const double*, int,
                                     double, double*);

template std::pair<float, std::vector<float>> cross_entropy_grad<float>(
    const std::vector<float>&, const std::vector<float>&);
template std::pair<double, std::vector<double>> cross_entropy_grad<double>(
    const std::vector<double>&, const std::vector<double>&);

}  // namespace fvlab
