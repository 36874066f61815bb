#pragma once

#include <stdexcept>
#include <string>

#include "cfseq/decoder/decoder.hpp"

namespace cfseq {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EncoderCheckpoint {
    Normalizer norm;
    Encoder enc;
    std::string config_fingerprint;
};

/// JSON containers. Doubles are written in shortest round-trip form, so a
/// save/load cycle reproduces every parameter bit for bit.
std::string encoder_checkpoint_json(const EncoderCheckpoint& ck);
std::string model_checkpoint_json(const Model& model);
EncoderCheckpoint parse_encoder_checkpoint(const std::string& text);
Model parse_model_checkpoint(const std::string& text);

void save_encoder_checkpoint(const EncoderCheckpoint& ck, const std::string& path);
void save_model_checkpoint(const Model& model, const std::string& path);
EncoderCheckpoint load_encoder_checkpoint(const std::string& path);
Model load_model_checkpoint(const std::string& path);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace cfseq
