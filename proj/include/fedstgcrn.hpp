// Everything: tensors and autodiff, the model, data preparation, training,
// federation and the command layer.
#pragma once

#include "fedstgcrn/cli.hpp"
#include "fedstgcrn/codec.hpp"
#include "fedstgcrn/data.hpp"
#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/federation.hpp"
#include "fedstgcrn/grad_check.hpp"
#include "fedstgcrn/model.hpp"
#include "fedstgcrn/ops.hpp"
#include "fedstgcrn/params.hpp"
#include "fedstgcrn/tensor.hpp"
#include "fedstgcrn/training.hpp"
