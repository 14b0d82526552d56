#pragma once

#include <ostream>
#include <string>

namespace phyprobit::cli {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kUsage = 1,     // bad command line
  kConfig = 2,    // unreadable or invalid config, missing input path
  kData = 3,      // malformed tree, trait, dates or sample files
  kRuntime = 4,   // sampler or I/O failure during execution
};

int cmd_run(const std::string& config_path, std::ostream& out, std::ostream& err);
int cmd_summarize(const std::string& samples_dir, double mass, std::ostream& out, std::ostream& err);
int cmd_benchmark(const std::string& config_path, std::ostream& out, std::ostream& err);
int cmd_validate(const std::string& config_path, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace phyprobit::cli
