#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "cfseq/evalkit/experiment.hpp"

namespace cfseq {

/// Raised for any config problem; the message names the dotted key and,
/// when known, the line.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config(const std::string& path);

/// Canonical YAML with every key present; parse(serialize(c)) == c.
std::string serialize_config(const ExperimentConfig& c);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Stage fingerprints. Each covers only what determines that stage's
/// artifact, so later sections can change without invalidating earlier
/// artifacts.
std::string data_fingerprint(const ExperimentConfig& c, std::uint64_t data_seed);
std::string encoder_fingerprint(const ExperimentConfig& c, const std::string& data_fp);
std::string model_fingerprint(const ExperimentConfig& c, const std::string& encoder_fp);

}  // namespace cfseq
