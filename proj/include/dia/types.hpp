#pragma once

#include <Eigen/Dense>

namespace dia {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

}  // namespace dia
