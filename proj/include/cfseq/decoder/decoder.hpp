#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfseq/diffcore/nn.hpp"
#include "cfseq/encoder/encoder.hpp"

namespace cfseq {

enum class Balancing { club, none, cdc };

const char* balancing_name(Balancing b);
Balancing parse_balancing(const std::string& s);

struct DecoderConfig {
    std::size_t r_dim = 16;
    std::size_t plan_hidden = 6;
    std::size_t head_hidden = 16;
    std::size_t cls_hidden = 16;
    double sigma = 0.05;
    double lr = 5e-3;
    double encoder_lr_ratio = 0.1;
    double cls_lr = 1e-2;
    double cls_momentum = 0.9;
    double weight_decay = 0.0;
    double club_weight = 1.0;
    double clip_norm = 0.0;
    std::size_t batch_size = 64;
    double origin_fraction = 0.10;
    std::size_t max_epochs = 300;
    std::size_t patience = 50;
    double min_delta = 1e-3;
    std::size_t val_origin_stride = 1;
    Balancing balancing = Balancing::club;
};

/// theta_Phi (dec.phi), theta_4 (dec.gru, dec.plan, dec.rep), theta_Y
/// (dec.outcome) and theta_W (dec.treatment).
struct Decoder {
    ParamStore store;
    std::size_t c_dim = 0, r_dim = 0, plan_hidden = 0, d_v = 0, n_treatments = 0;
    Affine phi;
    GruCell gru, plan;
    Affine rep;
    WeightNormAffine y1, y2;
    SpectralNormAffine w1, w2;

    static Decoder init(std::size_t c_dim, std::size_t d_v, std::size_t n_treatments, const DecoderConfig& cfg, Rng& rng);
    static Decoder bind(ParamStore store, std::size_t d_v, std::size_t n_treatments, Tensor u1, Tensor u2);
    Decoder clone() const;

    std::vector<Value> outcome_side_params() const;  // theta_Phi, theta_4, theta_Y
    std::vector<Value> treatment_params() const;     // theta_W
};

/// Phi_t = SELU(affine(C_t)).
Value represent(const Decoder& dec, const Value& c_t);

/// Effective classifier weights for one batch. With update_u the power
/// iteration advances; with detach the weights are graph constants, so a
/// loss built on them never reaches theta_W.
struct ClassifierWeights {
    Value w1, b1, w2, b2;
    Value logits(const Value& phi) const;
};
ClassifierWeights classifier_weights(Decoder& dec, bool update_u, bool detach);
ClassifierWeights classifier_weights(const Decoder& dec, bool detach);

struct RolloutInputs {
    Value phi_t;                         // [M x r_dim]
    Tensor v;                            // [M x d_v], standardized
    std::vector<int> w_t;                // last observed treatment
    Tensor y_t;                          // [M x 1], scaled last outcome
    std::vector<std::vector<int>> plan;  // [M][tau]
};

struct RolloutResult {
    Value phi_start;            // Phi_t after reading (w_t, y_t); input of the first step
    std::vector<Value> y_hat;   // tau entries, [M x 1]
    std::vector<Value> phi;     // tau - 1 entries, [M x r_dim]
    std::vector<Value> logits;  // tau entries, from stop_gradient(Phi_{t+j-1}); empty without classifier
};

/// Autoregressive rollout without teacher forcing. The hidden state starts
/// at Phi_t and first reads [onehot(w_t), plan state, y_t, v], so the first
/// prediction sees the last observed outcome. The step-j GRU input is then
/// [onehot(omega_{t+j}), plan state, yhat_{t+j-1}, v] with yhat_t = y_t.
RolloutResult decode_rollout(const Decoder& dec, const RolloutInputs& in, const ClassifierWeights* cls = nullptr);

/// sum_j mean_i mask * [(yhat - y)^2 / (2 sigma^2) + log(sigma sqrt(2 pi))].
/// targets and mask are [M x tau].
Value outcome_nll(const std::vector<Value>& y_hat, const Tensor& targets, const Tensor& mask, double sigma);

/// Mean cross-entropy over steps and units; logits[j] is [M x K].
Value treatment_ce(const std::vector<Value>& logits, const std::vector<std::vector<int>>& targets);

struct ClubValue {
    Value value;
    std::size_t floored = 0;  // probabilities raised to 1e-12
};

/// (1/n) sum log q(w_i | Phi_i) - (1/n) sum log q(w_pi(i) | Phi_i), from
/// classifier logits [n x K].
ClubValue club_estimate(const Value& logits, const std::vector<int>& w, const std::vector<std::size_t>& perm);

/// Uniform random permutation, identity rejected for n >= 2.
std::vector<std::size_t> draw_permutation(std::size_t n, Rng& rng);

struct Model {
    Normalizer norm;
    Encoder enc;
    Decoder dec;
    std::size_t tau = 0;
    double sigma = 0.05;
    std::string config_fingerprint;

    Model clone() const;
};

struct TrainLogRow {
    std::size_t epoch = 0;
    double loss_y = 0.0;
    double club = 0.0;
    double loss_w = 0.0;
    double val_mse = 0.0;
    double cls_accuracy = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<TrainLogRow> log;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    double init_val_mse = 0.0;
};

/// Algorithm-2 training. The encoder copy is fine-tuned at
/// lr * encoder_lr_ratio; theta_W has its own momentum optimizer.
TrainResult train_decoder(const Cohort& train, const Cohort& val, const Encoder& pretrained, const Normalizer& norm,
                          const DecoderConfig& cfg, std::uint64_t seed);

/// Factual tau-step MSE (scaled units) over all usable origins of a cohort.
double factual_mse(const Model& model, const Cohort& cohort, std::size_t origin_stride = 1);

struct PredictItem {
    std::size_t unit = 0;  // cohort index
    std::size_t origin = 0;
    std::vector<int> plan;
};

/// Raw-unit predictions for each item. Items may mix units, origins and plan
/// lengths up to the model's tau; results do not depend on the grouping.
std::vector<std::vector<double>> predict_counterfactual(const Model& model, const Cohort& cohort,
                                                        const std::vector<PredictItem>& items);

/// The balanced representation each (unit, origin) rollout starts from
/// (RolloutResult::phi_start), rows in input order.
Tensor representations(const Model& model, const Cohort& cohort,
                       const std::vector<std::pair<std::size_t, std::size_t>>& unit_origins);

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path);

}  // namespace cfseq
