#pragma once

#include "data_model.hpp"
#include "diagnostics.hpp"
#include "error.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "report.hpp"
#include "ssl_core.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
