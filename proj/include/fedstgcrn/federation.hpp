// Umbrella header for the federation layer.
#pragma once

#include "fedstgcrn/federation/aggregate.hpp"
#include "fedstgcrn/federation/csv.hpp"
#include "fedstgcrn/federation/federation.hpp"
#include "fedstgcrn/federation/message.hpp"
#include "fedstgcrn/federation/transport.hpp"
