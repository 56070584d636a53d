#pragma once

// Subcommands of the command-line front end, usable in-process.

#include <exception>
#include <string>
#include <string_view>
#include <vector>

#include "dcl/cluster.hpp"
#include "dcl/config.hpp"
#include "dcl/data.hpp"
#include "dcl/gan.hpp"

namespace dcl::runner {

/// Runs one subcommand with a resolved copy of `config`; throws dcl::Error on failure.
void run(std::string_view command, const config::RunConfig& config);

/// One JSON line: {"error": {"command", "type", "message"}}.
std::string error_record(std::string_view command, const std::exception& e);
/// 2 for configuration errors, 1 otherwise.
int exit_code(const std::exception& e);

// Building blocks shared with the experiment drivers. All take a resolved config.
data::ImageDataset load_dataset(const config::RunConfig& c);
gan::GanConfig gan_config(const config::RunConfig& c);
cluster::BankConfig bank_config(const config::RunConfig& c);
cluster::TrainConfig train_config(const config::RunConfig& c);
data::SynthSpec synth_spec(const config::RunConfig& c);

} // namespace dcl::runner
