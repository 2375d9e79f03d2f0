#pragma once

#include "spdcfl/error.hpp"
#include "spdcfl/numerics.hpp"
#include "spdcfl/lora.hpp"
#include "spdcfl/model.hpp"
#include "spdcfl/metrics.hpp"
#include "spdcfl/data.hpp"
#include "spdcfl/server.hpp"
#include "spdcfl/client.hpp"
#include "spdcfl/harness.hpp"
