#pragma once

// Internal JSON helpers shared by checkpoint, DUQ head, and config code.

#include <json.hpp>

#include "uqal/models.hpp"

namespace uqal {

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

}  // namespace uqal
