#pragma once

#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"
#include "fortress/data.hpp"
#include "fortress/encoder.hpp"
#include "fortress/client.hpp"
#include "fortress/attacks.hpp"
#include "fortress/server.hpp"
#include "fortress/eval.hpp"
#include "fortress/config.hpp"
#include "fortress/checkpoint.hpp"
#include "fortress/runner.hpp"
