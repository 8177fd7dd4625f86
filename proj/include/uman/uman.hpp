#pragma once

#include "uman/common.hpp"
#include "uman/config.hpp"
#include "uman/data.hpp"
#include "uman/gradcheck.hpp"
#include "uman/kan.hpp"
#include "uman/loss.hpp"
#include "uman/man.hpp"
#include "uman/network.hpp"
#include "uman/ops.hpp"
#include "uman/pagf.hpp"
#include "uman/params.hpp"
#include "uman/tensor.hpp"
#include "uman/train.hpp"
