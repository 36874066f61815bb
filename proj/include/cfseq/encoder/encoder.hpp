#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfseq/diffcore/nn.hpp"
#include "cfseq/encoder/features.hpp"
#include "cfseq/simkit/rng.hpp"

namespace cfseq {

enum class MiBound { infonce, nwj, mine };

const char* bound_name(MiBound b);
MiBound parse_bound(const std::string& s);

struct EncoderConfig {
    std::size_t z_dim = 16;
    std::size_t c_dim = 16;
    std::size_t tau = 10;
    std::size_t batch_size = 256;
    std::size_t max_epochs = 300;
    std::size_t patience = 100;
    double min_delta = 1e-3;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0: off
    bool use_cpc = true;
    bool use_infomax = true;
    MiBound infomax_bound = MiBound::infonce;
    std::size_t val_batches = 4;
};

/// theta1 (local features), theta2 (context GRU), Gamma_1..tau and eta.
/// Parameter groups: enc.local, enc.context, enc.gamma, enc.infomax.
struct Encoder {
    ParamStore store;
    std::size_t d_u = 0, z_dim = 0, c_dim = 0, tau = 0;
    WeightNormAffine local1, local2;
    GruCell context;
    std::vector<Value> gamma;  // tau matrices [z_dim x c_dim]
    Affine eta1, eta2;

    static Encoder init(std::size_t d_u, std::size_t z_dim, std::size_t c_dim, std::size_t tau, Rng& rng);
    /// Rebinds handles after the store was replaced (clone, checkpoint load).
    static Encoder bind(ParamStore store, std::size_t d_u, std::size_t z_dim, std::size_t c_dim, std::size_t tau);
    Encoder clone() const;

    /// Parameters the encoder fine-tunes during decoder training.
    std::vector<Value> representation_params() const;
};

/// z = theta1(u) for u of shape [m x d_u].
Value encode_local(const Encoder& enc, const Value& u);
Value gru_step(const GruCell& cell, const Value& x, const Value& h);

/// C_t for t = 0..len-1 from per-step inputs z_t ([n x z_dim] each). A step
/// with mask 0 for unit i leaves that unit's hidden state unchanged.
/// h0 defaults to zeros.
std::vector<Value> encode_context(const Encoder& enc, const std::vector<Value>& z,
                                  const std::vector<std::vector<double>>& mask, const Value& h0 = Value());

/// Local features of a stacked batch, split per step: z[t] is [n x z_dim].
std::vector<Value> local_features(const Encoder& enc, const SequenceBatch& batch, std::size_t len);

/// mean_i -log softmax(scores_i.)_i; scores[i][l] pairs anchor i with
/// candidate l, positives on the diagonal.
Value infonce_from_scores(const Value& scores);

/// NWJ: mean(diag) - mean_offdiag exp(s - 1); MINE: mean(diag) -
/// log mean_offdiag exp(s). Both evaluated through log-sum-exp.
Value mi_lower_bound_alt(const Value& scores, MiBound kind);

/// s_il = z_{l,t+j}^T Gamma_j C_{i,t}.
Value cpc_scores(const Value& context, const Value& z_future, const Value& gamma_j);

struct BatchView {
    const SequenceBatch* batch = nullptr;
    std::size_t t = 0;   // anchor step
    std::size_t t0 = 0;  // InfoMax split: views [0, t0) and [t0, t]
};

/// (1/tau) sum_j InfoNCE of the horizon-j scores. Every unit in the batch
/// must be active through t + tau.
Value infonce_cpc_loss(const Encoder& enc, const BatchView& view);

/// Split-view InfoMax objective (as a loss to minimize). For the InfoNCE
/// bound this is the InfoNCE loss; for NWJ/MINE it is the negated bound.
Value infomax_loss(const Encoder& enc, const BatchView& view, MiBound bound = MiBound::infonce);

struct EncoderLosses {
    Value cpc;
    Value infomax;
    Value total;
};

EncoderLosses encoder_losses(const Encoder& enc, const BatchView& view, const EncoderConfig& cfg);

struct PretrainLogRow {
    std::size_t step = 0;
    double loss_cpc = 0.0;
    double loss_infomax = 0.0;
    double val_loss = 0.0;
};

struct PretrainResult {
    Encoder encoder;
    std::vector<PretrainLogRow> log;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Algorithm-1 pretraining with early stopping on the validation encoder
/// loss; returns the best-validation parameters. Randomness comes from the
/// init, batching and validation substreams of `seed`.
PretrainResult pretrain_encoder(const Cohort& train, const Cohort& val, const Normalizer& norm,
                                const EncoderConfig& cfg, std::uint64_t seed);

void write_pretrain_log(const std::vector<PretrainLogRow>& log, const std::string& path);

}  // namespace cfseq
