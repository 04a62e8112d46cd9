#include "blas.hpp"

namespace poisonforge::detail {

void configure_blas_threads() { openblas_set_num_threads(1); }

namespace {
const bool kBlasConfigured = (configure_blas_threads(), true);
}  // namespace

}  // namespace poisonforge::detail
