#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfseq {

/// A stage could not run: missing predecessor artifact, fingerprint
/// mismatch or invalid arguments.
class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void cmd_simulate(const std::string& config, std::uint64_t seed, const std::string& out);
void cmd_pretrain(const std::string& config, const std::string& data, const std::string& out);
void cmd_train(const std::string& config, const std::string& data, const std::string& encoder, const std::string& out);
void cmd_evaluate(const std::string& config, const std::string& data, const std::string& model,
                  const std::string& strategy, const std::string& out);
void cmd_ablate(const std::string& config, const std::string& variants, const std::string& out);
void cmd_report(const std::string& in, const std::string& out_svg);

/// Worker count: the config value, capped by CFSEQ_WORKERS when set.
std::size_t effective_workers(std::size_t configured);

}  // namespace cfseq
