// Umbrella header for the command layer.
#pragma once

#include "fedstgcrn/cli/commands.hpp"
#include "fedstgcrn/cli/config.hpp"
#include "fedstgcrn/cli/reports.hpp"
