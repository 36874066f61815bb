#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <numbers>

#include "cfseq/decoder/checkpoint.hpp"
#include "cfseq/decoder/decoder.hpp"
#include "cfseq/simkit/tumor.hpp"

using namespace cfseq;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data) v = scale * (2.0 * uniform01(rng) - 1.0);
    return t;
}

std::size_t hash_values(const std::vector<Value>& params) {
    std::size_t h = 1469598103934665603ull;
    for (const auto& p : params)
        for (double v : p.data().data) h = (h ^ std::hash<double>{}(v)) * 1099511628211ull;
    return h;
}

Tensor logits_from_probs(std::initializer_list<std::initializer_list<double>> rows) {
    Tensor t = Tensor::matrix(rows);
    for (double& v : t.data) v = std::log(v);
    return t;
}

struct Toy {
    Decoder dec;
    RolloutInputs in;
};

Toy toy_rollout(std::size_t m, std::size_t tau, std::uint64_t seed) {
    Rng rng = substream(seed, "t");
    DecoderConfig cfg;
    cfg.r_dim = 3;
    cfg.plan_hidden = 2;
    cfg.head_hidden = 3;
    cfg.cls_hidden = 3;
    Toy t{Decoder::init(4, 2, 3, cfg, rng), {}};
    t.in.phi_t = parameter(random_tensor(Shape{m, 3}, rng));
    t.in.v = random_tensor(Shape{m, 2}, rng);
    t.in.y_t = random_tensor(Shape{m, 1}, rng);
    for (std::size_t i = 0; i < m; ++i) {
        t.in.w_t.push_back(static_cast<int>(i % 3));
        std::vector<int> p;
        for (std::size_t j = 0; j < tau; ++j) p.push_back(static_cast<int>((i + 2 * j) % 3));
        t.in.plan.push_back(p);
    }
    return t;
}

Cohort tumor(std::size_t n, std::uint64_t seed, std::int64_t first = 0, double gamma = 1.0) {
    TumorConfig cfg;
    cfg.gamma = gamma;
    return simulate_tumor_cohort(cfg, n, 60, seed, first);
}

}  // namespace

TEST_CASE("outcome NLL closed forms") {
    const double c = std::log(0.05 * std::sqrt(2.0 * std::numbers::pi));
    Value y = constant(Tensor::matrix({{0.3}, {0.7}}));
    Tensor mask(Shape{2, 1}, 1.0);
    const double base = outcome_nll({y}, Tensor::matrix({{0.3}, {0.7}}), mask, 0.05).item();
    CHECK(std::abs(base - c) < 1e-12);
    CHECK(std::abs(base - (-2.07679)) < 1e-5);

    // One unit off by 0.05 adds 0.5 for that unit, 0.25 to the batch mean.
    const double off = outcome_nll({y}, Tensor::matrix({{0.35}, {0.7}}), mask, 0.05).item();
    CHECK(std::abs(off - base - 0.25) < 1e-12);
    const double single = outcome_nll({constant(Tensor::matrix({{0.3}}))}, Tensor::matrix({{0.35}}),
                                      Tensor(Shape{1, 1}, 1.0), 0.05).item();
    CHECK(std::abs(single - c - 0.5) < 1e-12);

    const double doubled = outcome_nll({y}, Tensor::matrix({{0.3}, {0.7}}), mask, 0.1).item();
    CHECK(std::abs(doubled - base - std::log(2.0)) < 1e-12);
    CHECK_THROWS(outcome_nll({y}, Tensor::matrix({{0.3}, {0.7}}), mask, 0.0));

    // Per-horizon terms add up; masked entries drop out.
    Rng rng = substream(1, "t");
    std::vector<Value> yh{constant(random_tensor(Shape{3, 1}, rng)), constant(random_tensor(Shape{3, 1}, rng))};
    Tensor targets = random_tensor(Shape{3, 2}, rng);
    Tensor m2(Shape{3, 2}, 1.0);
    double parts = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
        Tensor tj(Shape{3, 1}, 0.0);
        for (std::size_t i = 0; i < 3; ++i) tj.data[i] = targets.at(i, j);
        parts += outcome_nll({yh[j]}, tj, Tensor(Shape{3, 1}, 1.0), 0.05).item();
    }
    CHECK(outcome_nll(yh, targets, m2, 0.05).item() == doctest::Approx(parts).epsilon(1e-12));
    Tensor moved = targets;
    moved.at(1, 1) += 5.0;
    m2.at(1, 1) = 0.0;
    CHECK(outcome_nll(yh, moved, m2, 0.05).item() == doctest::Approx(outcome_nll(yh, targets, m2, 0.05).item()));
}

TEST_CASE("treatment cross-entropy closed forms") {
    Value uniform = constant(Tensor(Shape{5, 4}, 0.7));
    std::vector<std::vector<int>> w{{0}, {1}, {2}, {3}, {1}};
    CHECK(std::abs(treatment_ce({uniform}, w).item() - std::log(4.0)) < 1e-9);
    Tensor sharp(Shape{5, 4}, 0.0);
    for (std::size_t i = 0; i < 5; ++i) sharp.at(i, static_cast<std::size_t>(w[i][0])) = 20.0;
    CHECK(treatment_ce({constant(sharp)}, w).item() < 1e-8);
}

TEST_CASE("CLUB estimate closed forms and antisymmetry") {
    Value q = constant(logits_from_probs({{0.9, 0.1}, {0.2, 0.8}}));
    ClubValue v = club_estimate(q, {0, 1}, {1, 0});
    const double expect = (std::log(0.9) + std::log(0.8)) / 2.0 - (std::log(0.1) + std::log(0.2)) / 2.0;
    CHECK(std::abs(v.value.item() - expect) < 1e-12);
    CHECK(std::abs(v.value.item() - 1.791759) < 1e-6);
    CHECK(v.floored == 0);
    CHECK(club_estimate(q, {0, 1}, {0, 1}).value.item() == 0.0);

    Rng rng = substream(2, "t");
    Tensor row = random_tensor(Shape{1, 3}, rng, 2.0);
    Tensor same(Shape{6, 3}, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 3; ++k) same.at(i, k) = row.data[k];
    std::vector<int> w{0, 2, 1, 1, 0, 2};
    for (int rep = 0; rep < 5; ++rep)
        CHECK(std::abs(club_estimate(constant(same), w, draw_permutation(6, rng)).value.item()) < 1e-9);

    Value lg = constant(random_tensor(Shape{6, 3}, rng, 2.0));
    auto perm = draw_permutation(6, rng);
    std::vector<std::size_t> inv(6);
    std::vector<int> wp(6);
    for (std::size_t i = 0; i < 6; ++i) {
        inv[perm[i]] = i;
        wp[i] = w[perm[i]];
    }
    CHECK(club_estimate(lg, wp, inv).value.item() ==
          doctest::Approx(-club_estimate(lg, w, perm).value.item()).epsilon(1e-12));

    ClubValue floored = club_estimate(constant(Tensor::matrix({{60.0, -60.0}, {0.0, 0.0}})), {0, 1}, {1, 0});
    CHECK(floored.floored == 1);
    CHECK(std::isfinite(floored.value.item()));
    CHECK_THROWS(club_estimate(constant(Tensor(Shape{1, 2}, 0.0)), {0}, {0}));
}

TEST_CASE("permutations never return the identity") {
    Rng rng = substream(3, "t");
    for (int rep = 0; rep < 200; ++rep) {
        auto p = draw_permutation(2 + static_cast<std::size_t>(rep % 5), rng);
        bool identity = true;
        for (std::size_t i = 0; i < p.size(); ++i) identity = identity && p[i] == i;
        CHECK(!identity);
    }
}

TEST_CASE("rollout structure") {
    SUBCASE("tau = 1 emits no intermediate representations") {
        Toy t = toy_rollout(3, 1, 4);
        ClassifierWeights cw = classifier_weights(t.dec, false);
        RolloutResult r = decode_rollout(t.dec, t.in, &cw);
        CHECK(r.y_hat.size() == 1);
        CHECK(r.phi.empty());
        CHECK(r.logits.size() == 1);
    }
    SUBCASE("lengths tau, tau - 1, tau") {
        Toy t = toy_rollout(3, 4, 4);
        ClassifierWeights cw = classifier_weights(t.dec, false);
        RolloutResult r = decode_rollout(t.dec, t.in, &cw);
        CHECK(r.y_hat.size() == 4);
        CHECK(r.phi.size() == 3);
        CHECK(r.logits.size() == 4);
        double total = 0.0;
        Value probs = exp(log_softmax(r.logits[2]));
        for (double p : probs.data().data) total += p;
        CHECK(total == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("zero networks predict the output bias") {
        Toy t = toy_rollout(3, 4, 5);
        for (const auto& e : t.dec.store.entries()) {
            if (e.name.ends_with(".direction") || e.name.starts_with("dec.w")) continue;
            Value v = e.value;
            std::fill(v.mutable_data().data.begin(), v.mutable_data().data.end(), 0.0);
        }
        t.dec.y2.bias.mutable_data().data[0] = 0.37;
        RolloutResult r = decode_rollout(t.dec, t.in);
        for (const auto& y : r.y_hat)
            for (double v : y.data().data) CHECK(v == 0.37);
        CHECK(represent(t.dec, constant(Tensor(Shape{2, 4}, 1.5))).data().data == std::vector<double>(6, 0.0));
    }
    SUBCASE("invalid codes are rejected") {
        Toy t = toy_rollout(2, 2, 6);
        t.in.plan[1][1] = 3;
        CHECK_THROWS(decode_rollout(t.dec, t.in));
        t.in.plan[1][1] = -1;
        CHECK_THROWS(decode_rollout(t.dec, t.in));
    }
}

TEST_CASE("decoder gradients match finite differences") {
    Toy t = toy_rollout(4, 3, 7);
    Rng rng = substream(7, "targets");
    Tensor targets = random_tensor(Shape{4, 3}, rng, 0.2);
    Tensor mask(Shape{4, 3}, 1.0);
    mask.at(2, 2) = 0.0;
    std::vector<Value> params = t.dec.outcome_side_params();
    params.push_back(t.in.phi_t);
    std::vector<std::size_t> perm0{1, 2, 3, 0}, perm1{2, 0, 3, 1}, perm2{3, 2, 0, 1};
    ClassifierWeights frozen = classifier_weights(t.dec, true);

    SUBCASE("represent") {
        Value c = constant(random_tensor(Shape{3, 4}, rng));
        std::vector<Value> p{t.dec.phi.weight, t.dec.phi.bias};
        CHECK(grad_check([&] { return sum(represent(t.dec, c) * represent(t.dec, c)); }, p) < 1e-5);
    }
    SUBCASE("outcome NLL") {
        CHECK(grad_check([&] { return outcome_nll(decode_rollout(t.dec, t.in).y_hat, targets, mask, 0.05); },
                         params) < 1e-5);
    }
    SUBCASE("full decoder loss with CLUB") {
        auto loss = [&] {
            RolloutResult r = decode_rollout(t.dec, t.in);
            std::vector<Value> phis{r.phi_start};
            phis.insert(phis.end(), r.phi.begin(), r.phi.end());
            const std::vector<std::size_t>* perms[] = {&perm0, &perm1, &perm2};
            Value club;
            for (std::size_t j = 0; j < 3; ++j) {
                std::vector<int> wj;
                for (const auto& p : t.in.plan) wj.push_back(p[j]);
                Value term = club_estimate(frozen.logits(phis[j]), wj, *perms[j]).value;
                club = club.valid() ? club + term : term;
            }
            return outcome_nll(r.y_hat, targets, mask, 0.05) + club * (1.0 / 3.0);
        };
        CHECK(grad_check(loss, params) < 1e-4);
    }
    SUBCASE("treatment loss") {
        std::vector<Value> cls = t.dec.treatment_params();
        auto loss = [&] {
            ClassifierWeights live = classifier_weights(t.dec, false);
            return treatment_ce(decode_rollout(t.dec, t.in, &live).logits, t.in.plan);
        };
        CHECK(grad_check(loss, cls) < 1e-5);
    }
}

TEST_CASE("gradient isolation between the two players") {
    Toy t = toy_rollout(5, 3, 8);
    ClassifierWeights live = classifier_weights(t.dec, false);
    ClassifierWeights frozen = classifier_weights(t.dec, true);
    RolloutResult r = decode_rollout(t.dec, t.in, &live);

    Gradients gw = backward(treatment_ce(r.logits, t.in.plan));
    for (const auto& p : t.dec.outcome_side_params()) CHECK(!gw.reached(p));
    CHECK(!gw.reached(t.in.phi_t));
    for (const auto& p : t.dec.treatment_params()) CHECK(gw.reached(p));

    std::vector<int> w0;
    for (const auto& p : t.in.plan) w0.push_back(p[0]);
    Value club = club_estimate(frozen.logits(r.phi[0]), w0, {1, 2, 3, 4, 0}).value;
    Gradients gc = backward(club);
    for (const auto& p : t.dec.treatment_params()) CHECK(!gc.reached(p));
    CHECK(gc.reached(t.in.phi_t));
    CHECK(gc.reached(t.dec.rep.weight));
}

TEST_CASE("training: optimizer separation, zero epochs and progress") {
    Cohort train = tumor(200, 41);
    Cohort val = tumor(100, 41, 100000);
    Normalizer norm = Normalizer::fit(train);
    EncoderConfig ec;
    ec.max_epochs = 20;
    Encoder enc = pretrain_encoder(train, val, norm, ec, 2).encoder;
    const std::size_t enc_hash = hash_values(enc.store.all());

    SUBCASE("zero epochs") {
        DecoderConfig dc;
        dc.max_epochs = 0;
        TrainResult r = train_decoder(train, val, enc, norm, dc, 3);
        CHECK(hash_values(r.model.enc.store.all()) == enc_hash);
        Rng init = substream(3, "init", 1);
        Decoder fresh = Decoder::init(enc.c_dim, norm.d_v(), norm.n_treatments, dc, init);
        CHECK(hash_values(r.model.dec.store.all()) == hash_values(fresh.store.all()));
        CHECK(r.log.empty());
    }
    SUBCASE("each optimizer touches only its own parameters") {
        DecoderConfig dc;
        dc.max_epochs = 1;
        dc.patience = 5;
        dc.cls_lr = 0.0;
        dc.cls_momentum = 0.0;
        Rng init = substream(3, "init", 1);
        Decoder fresh = Decoder::init(enc.c_dim, norm.d_v(), norm.n_treatments, dc, init);
        TrainResult a = train_decoder(train, val, enc, norm, dc, 3);
        CHECK(hash_values(a.model.dec.treatment_params()) == hash_values(fresh.treatment_params()));
        CHECK(hash_values(a.model.dec.outcome_side_params()) != hash_values(fresh.outcome_side_params()));
        CHECK(hash_values(a.model.enc.representation_params()) != hash_values(enc.representation_params()));

        dc.cls_lr = 1e-2;
        dc.cls_momentum = 0.9;
        dc.lr = 0.0;
        TrainResult b = train_decoder(train, val, enc, norm, dc, 3);
        CHECK(hash_values(b.model.dec.treatment_params()) != hash_values(fresh.treatment_params()));
        CHECK(hash_values(b.model.dec.outcome_side_params()) == hash_values(fresh.outcome_side_params()));
        CHECK(hash_values(b.model.enc.store.all()) == enc_hash);
    }
    SUBCASE("validation MSE falls below its initial value") {
        DecoderConfig dc;
        dc.max_epochs = 20;
        TrainResult r = train_decoder(train, val, enc, norm, dc, 3);
        REQUIRE(r.log.size() == 20);
        for (const auto& row : r.log) CHECK(row.val_mse < r.init_val_mse);
        CHECK(r.log.back().val_mse < r.log.front().val_mse);
        MESSAGE("init ", r.init_val_mse, " epoch 20 ", r.log.back().val_mse);
    }
}

TEST_CASE("prediction: determinism, batch independence and no future leakage") {
    Cohort train = tumor(60, 51);
    Normalizer norm = Normalizer::fit(train);
    EncoderConfig ec;
    ec.max_epochs = 0;
    Encoder enc = pretrain_encoder(train, train, norm, ec, 2).encoder;
    DecoderConfig dc;
    dc.max_epochs = 2;
    Model model = train_decoder(train, train, enc, norm, dc, 3).model;

    std::vector<PredictItem> items{{0, 10, {1, 0, 2, 3, 0, 0, 1, 0, 0, 0}},
                                   {3, 4, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0}},
                                   {0, 2, {3, 3, 3}},
                                   {5, 7, {2}}};
    auto a = predict_counterfactual(model, train, items);
    CHECK(a == predict_counterfactual(model, train, items));
    CHECK(a[2].size() == 3);

    std::vector<PredictItem> shuffled{items[3], items[1], {7, 3, {1, 1}}, items[0], items[2]};
    auto b = predict_counterfactual(model, train, shuffled);
    CHECK(b[3] == a[0]);
    CHECK(b[1] == a[1]);
    CHECK(b[4] == a[2]);
    CHECK(b[0] == a[3]);

    Cohort mutated = train;
    Trajectory& u = mutated.units[0];
    for (std::size_t t = 11; t < u.y.size(); ++t) {
        u.y[t] = 999.0;
        u.w[t] = 3;
        for (double& x : u.x[t]) x = -7.0;
    }
    CHECK(predict_counterfactual(model, mutated, {items[0]})[0] == a[0]);

    std::vector<PredictItem> bad{{0, 3, {0, 4}}};
    CHECK_THROWS(predict_counterfactual(model, train, bad));
    bad = {{0, 3, std::vector<int>(11, 0)}};
    CHECK_THROWS(predict_counterfactual(model, train, bad));
}

TEST_CASE("checkpoints round-trip bit for bit") {
    Cohort train = tumor(40, 61);
    Normalizer norm = Normalizer::fit(train);
    EncoderConfig ec;
    ec.max_epochs = 2;
    Encoder enc = pretrain_encoder(train, train, norm, ec, 2).encoder;
    DecoderConfig dc;
    dc.max_epochs = 2;
    Model model = train_decoder(train, train, enc, norm, dc, 3).model;
    model.config_fingerprint = "abc123";

    const std::string text = model_checkpoint_json(model);
    Model back = parse_model_checkpoint(text);
    CHECK(model_checkpoint_json(back) == text);
    CHECK(back.config_fingerprint == "abc123");
    std::vector<PredictItem> items{{1, 5, {1, 2, 3}}};
    CHECK(predict_counterfactual(back, train, items) == predict_counterfactual(model, train, items));

    EncoderCheckpoint ek{norm, enc, "fp"};
    const std::string etext = encoder_checkpoint_json(ek);
    CHECK(encoder_checkpoint_json(parse_encoder_checkpoint(etext)) == etext);
    CHECK_THROWS_AS(parse_model_checkpoint(etext), CheckpointError);
    CHECK_THROWS_AS(parse_model_checkpoint("{not json"), CheckpointError);
}

TEST_CASE("a small deterministic cohort can be fit at tau = 1") {
    TumorConfig cfg;
    cfg.prior.noise_sd = 0.0;
    cfg.tau = 1;
    Cohort train = simulate_tumor_cohort(cfg, 8, 30, 71);
    Normalizer norm = Normalizer::fit(train);
    EncoderConfig ec;
    ec.max_epochs = 0;
    ec.tau = 1;
    Encoder enc = pretrain_encoder(train, train, norm, ec, 2).encoder;
    DecoderConfig dc;
    dc.max_epochs = 400;
    dc.patience = 400;
    dc.origin_fraction = 1.0;
    dc.lr = 5e-3;
    dc.balancing = Balancing::none;
    Model model = train_decoder(train, train, enc, norm, dc, 3).model;
    const double rmse = std::sqrt(factual_mse(model, train));
    MESSAGE("scaled tau=1 RMSE ", rmse);
    CHECK(rmse < 0.05);
}
