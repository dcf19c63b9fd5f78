#pragma once

// Convenience umbrella: pulls in the whole library.

#include "autodiff.hpp"
#include "config.hpp"
#include "gumbel.hpp"
#include "half.hpp"
#include "init.hpp"
#include "io.hpp"
#include "optim.hpp"
#include "pack.hpp"
#include "quantize.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
