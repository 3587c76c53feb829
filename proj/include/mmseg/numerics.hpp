#pragma once

#include "mmseg/error.hpp"
#include "mmseg/numerics/ops.hpp"
#include "mmseg/numerics/parameter.hpp"
#include "mmseg/numerics/random.hpp"
#include "mmseg/numerics/tensor.hpp"
