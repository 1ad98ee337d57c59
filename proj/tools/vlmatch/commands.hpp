#pragma once

#include <exception>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmatch/config.hpp"

namespace vlcli {

/// One command with its artifact paths and configuration. `config` holds the
/// user's flat settings on entry and the resolved snapshot after run().
struct Invocation {
    std::string command;
    std::string config_path;
    Flat config = Flat::object();
    std::map<std::string, std::string> inputs;
    std::map<std::string, std::string> outputs;
};

const std::vector<std::string>& command_names();

/// Executes the command; returns a short JSON summary for stdout. Library
/// errors propagate.
nlohmann::json run(Invocation& inv);

/// 0 success, 2 missing input, 3 invalid config or arguments, 4 anything else.
int exit_code_for(std::exception_ptr error);

}  // namespace vlcli
