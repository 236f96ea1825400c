#pragma once

#include "mbrain/autograd.hpp"
#include "mbrain/checkpoint.hpp"
#include "mbrain/config.hpp"
#include "mbrain/downstream.hpp"
#include "mbrain/graph.hpp"
#include "mbrain/layers.hpp"
#include "mbrain/matrix.hpp"
#include "mbrain/neural.hpp"
#include "mbrain/optim.hpp"
#include "mbrain/rng.hpp"
#include "mbrain/signal.hpp"
#include "mbrain/ssl.hpp"
#include "mbrain/synthetic.hpp"
#include "mbrain/theory.hpp"
