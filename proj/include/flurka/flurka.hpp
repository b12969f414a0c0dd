#pragma once

#include "flurka/analysis.hpp"
#include "flurka/attention.hpp"
#include "flurka/bench.hpp"
#include "flurka/costmodel.hpp"
#include "flurka/error.hpp"
#include "flurka/fusion.hpp"
#include "flurka/grad.hpp"
#include "flurka/parallel.hpp"
#include "flurka/tensor.hpp"
#include "flurka/variants.hpp"
