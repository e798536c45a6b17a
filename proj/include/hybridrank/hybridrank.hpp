#pragma once

#include "common.hpp"
#include "corpus.hpp"
#include "dense.hpp"
#include "eval.hpp"
#include "fusion.hpp"
#include "hlatr.hpp"
#include "optim.hpp"
#include "pipeline.hpp"
#include "rerank.hpp"
#include "sparse.hpp"
#include "synthetic.hpp"
