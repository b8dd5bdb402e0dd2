#pragma once

// Tensor engine: layer operators and their reverse-mode rules.

#include "deepobf/conv.hpp"
#include "deepobf/elementwise.hpp"
#include "deepobf/linear.hpp"
#include "deepobf/loss.hpp"
#include "deepobf/normalization.hpp"
#include "deepobf/optim.hpp"
#include "deepobf/pooling.hpp"
#include "deepobf/tensor.hpp"
