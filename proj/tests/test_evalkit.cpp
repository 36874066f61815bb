#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>

#include "cfseq/evalkit/early_stop.hpp"
#include "cfseq/evalkit/eval.hpp"
#include "cfseq/evalkit/experiment.hpp"

using namespace cfseq;

namespace {

Cohort tumor(std::size_t n, std::uint64_t seed, std::size_t max_len = 30, double gamma = 1.0) {
    TumorConfig cfg;
    cfg.gamma = gamma;
    cfg.tau = 3;
    return simulate_tumor_cohort(cfg, n, max_len, seed);
}

CFQuery query(std::vector<double> truth) {
    CFQuery q;
    q.plan.assign(truth.size(), 0);
    q.ground_truth = std::move(truth);
    return q;
}

Model small_model(const Cohort& train, const Cohort& val, std::uint64_t seed, std::size_t tau) {
    ExperimentConfig cfg;
    cfg.encoder.tau = tau;
    cfg.encoder.max_epochs = 1;
    cfg.encoder.batch_size = 8;
    cfg.decoder.max_epochs = 1;
    cfg.decoder.batch_size = 8;
    return fit_model(cfg, train, val, seed).train.model;
}

}  // namespace

TEST_CASE("sliding queries enumerate treatment and offset") {
    Cohort c = tumor(3, 1);
    for (auto& u : c.units) u.active_len = 6;  // origins 0..3 for tau = 2

    // K = 4: three non-null codes times two offsets per origin.
    auto q = gen_queries_sliding(c, 2);
    CHECK(q.size() == 3 * 4 * 6);
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> per_origin;
    for (const auto& x : q) {
        CHECK(x.plan.size() == 2);
        CHECK(x.ground_truth->size() == 2);
        CHECK(x.strategy == Strategy::sliding);
        CHECK(std::count_if(x.plan.begin(), x.plan.end(), [](int w) { return w != 0; }) == 1);
        ++per_origin[{x.unit, x.origin}];
    }
    for (const auto& [key, n] : per_origin) CHECK(n == 6);

    auto q1 = gen_queries_sliding(c, 1);
    CHECK(q1.size() == 3 * 5 * 3);

    // Origins too late for the horizon are skipped.
    for (auto& u : c.units) u.active_len = 2;
    CHECK(gen_queries_sliding(c, 2).empty());
    CHECK_THROWS(gen_queries_sliding(c, 0));
}

TEST_CASE("random queries are seeded and uniform") {
    Cohort c = tumor(400, 2, 60);
    auto a = gen_queries_random(c, 5, 11);
    auto b = gen_queries_random(c, 5, 11);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].plan == b[i].plan);
    auto other = gen_queries_random(c, 5, 12);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].plan != other[i].plan;
    CHECK(differs);

    // Per-step code frequencies over at least 10^4 queries.
    REQUIRE(a.size() >= 10000);
    for (std::size_t j = 0; j < 5; ++j) {
        std::vector<double> freq(4, 0.0);
        for (const auto& q : a) freq[static_cast<std::size_t>(q.plan[j])] += 1.0;
        for (double f : freq) CHECK(std::abs(f / static_cast<double>(a.size()) - 0.25) < 0.02);
    }
    CHECK_THROWS(gen_queries_random(c, 0, 11));
}

TEST_CASE("RMSE and NRMSE arithmetic") {
    std::vector<CFQuery> qs{query({1.0, 2.0})};
    auto e = rmse_by_horizon({{1.3, 2.4}}, qs);
    CHECK(e.rmse[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(e.rmse[1] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(e.count == std::vector<std::size_t>{1, 1});

    auto zero = rmse_by_horizon({{1.0, 2.0}}, qs);
    CHECK(zero.rmse == std::vector<double>{0.0, 0.0});

    std::vector<CFQuery> two{query({0.0}), query({0.0})};
    CHECK(rmse_by_horizon({{1.0}, {0.0}}, two).rmse[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
    CHECK(rmse_by_horizon({{0.0}, {1.0}}, two).rmse[0] == rmse_by_horizon({{1.0}, {0.0}}, two).rmse[0]);

    CHECK(nrmse({1.0}, 13.0)[0] == doctest::Approx(0.076923).epsilon(1e-6));
    CHECK(nrmse({0.3, 0.7}, 1.0) == std::vector<double>{0.3, 0.7});
    CHECK_THROWS(nrmse({1.0}, 0.0));
    CHECK_THROWS(nrmse({1.0}, -2.0));

    std::vector<CFQuery> missing{query({1.0})};
    missing[0].ground_truth.reset();
    CHECK_THROWS(rmse_by_horizon({{1.0}}, missing));

    // Scaling outcomes, predictions and the normalizer together.
    Cohort c = tumor(4, 3);
    const double norm = normalization_constant(c);
    std::vector<CFQuery> qc;
    std::vector<std::vector<double>> pred;
    for (const auto& u : c.units) {
        qc.push_back(query({u.y[3], u.y[4]}));
        pred.push_back({u.y[3] * 0.9 + 0.1, u.y[4] * 1.1});
    }
    const auto base = nrmse(rmse_by_horizon(pred, qc).rmse, norm);
    Cohort scaled = c;
    for (auto& u : scaled.units)
        for (double& y : u.y) y *= 7.5;
    for (auto& q : qc)
        for (double& y : *q.ground_truth) y *= 7.5;
    for (auto& p : pred)
        for (double& y : p) y *= 7.5;
    const auto again = nrmse(rmse_by_horizon(pred, qc).rmse, normalization_constant(scaled));
    for (std::size_t j = 0; j < 2; ++j) CHECK(again[j] == doctest::Approx(base[j]).epsilon(1e-12));
    CHECK(normalization_constant(scaled) == doctest::Approx(7.5 * norm).epsilon(1e-12));
}

TEST_CASE("early stopping rule") {
    std::vector<double> dec;
    for (int i = 0; i < 20; ++i) dec.push_back(1.0 - 0.01 * i);
    CHECK_FALSE(early_stop_monitor(dec, 0.0, 1).stop);
    CHECK(early_stop_monitor(dec, 0.0, 1).best_index == 19);

    auto flat = early_stop_monitor({1.0, 1.0, 1.0}, 0.0, 2);
    CHECK(flat.stop);
    CHECK(flat.best_index == 0);
    CHECK_FALSE(early_stop_monitor({1.0, 1.0}, 0.0, 2).stop);

    // An improvement of exactly min_delta does not reset patience.
    CHECK(early_stop_monitor({1.0, 0.5, 0.5}, 0.5, 2).stop);
    CHECK_FALSE(early_stop_monitor({1.0, 0.4, 0.5}, 0.5, 2).stop);

    EarlyStopMonitor m(0.0, 2);
    CHECK_FALSE(m.update(3.0));
    CHECK_FALSE(m.update(2.0));
    CHECK(m.improved_last());
    CHECK_FALSE(m.update(2.5));
    CHECK(m.update(2.5));
    CHECK(m.best_index() == 1);
}

TEST_CASE("confounder masking") {
    Cohort c = tumor(5, 4);
    Cohort same = mask_confounders(c, {});
    for (std::size_t i = 0; i < c.units.size(); ++i) CHECK(same.units[i].x == c.units[i].x);

    Cohort m = mask_confounders(c, {0, 2});
    for (std::size_t i = 0; i < c.units.size(); ++i) {
        for (std::size_t t = 0; t < c.units[i].length(); ++t) {
            CHECK(m.units[i].x[t][0] == 0.0);
            CHECK(m.units[i].x[t][2] == 0.0);
            CHECK(m.units[i].x[t][1] == c.units[i].x[t][1]);
            CHECK(m.units[i].x[t][3] == c.units[i].x[t][3]);
        }
        CHECK(m.units[i].y == c.units[i].y);
        CHECK(m.units[i].sim_state->steps == c.units[i].sim_state->steps);
    }
    CHECK_THROWS_AS(mask_confounders(c, {4}), std::out_of_range);

    // Predictions on a masked cohort do not see the masked columns.
    Cohort val = tumor(4, 5);
    Model model = small_model(tumor(16, 6), val, 1, 3);
    Cohort perturbed = c;
    for (auto& u : perturbed.units)
        for (auto& row : u.x) row[0] += 3.0;
    auto qs = gen_queries_factual(c, 3, 4);
    CHECK(predict_queries(model, mask_confounders(c, {0}), qs) ==
          predict_queries(model, mask_confounders(perturbed, {0}), qs));
    CHECK(predict_queries(model, c, qs) != predict_queries(model, perturbed, qs));
}

TEST_CASE("factual queries match the counterfactual path") {
    Cohort c = tumor(6, 7);
    auto factual = gen_queries_factual(c, 3);
    CounterfactualOracle oracle(c.meta);
    std::vector<CFQuery> routed = factual;
    for (auto& q : routed) q.ground_truth = oracle(c.units[q.unit], q.origin, q.plan);
    for (std::size_t i = 0; i < factual.size(); ++i) CHECK(*routed[i].ground_truth == *factual[i].ground_truth);

    Model model = small_model(tumor(16, 8), tumor(4, 9), 2, 3);
    auto pred = predict_queries(model, c, factual);
    auto a = rmse_by_horizon(pred, factual);
    auto b = rmse_by_horizon(pred, routed);
    CHECK(a.rmse == b.rmse);

    // Horizon j only reads predictions at offset j.
    auto sentinel = pred;
    for (auto& p : sentinel) p[1] = 1e6;
    auto s = rmse_by_horizon(sentinel, factual);
    CHECK(s.rmse[0] == a.rmse[0]);
    CHECK(s.rmse[2] == a.rmse[2]);
    CHECK(s.rmse[1] > 1e5);

    // Query order does not matter.
    auto rq = factual;
    auto rp = pred;
    std::reverse(rq.begin(), rq.end());
    std::reverse(rp.begin(), rp.end());
    auto r = rmse_by_horizon(rp, rq);
    for (std::size_t j = 0; j < 3; ++j) CHECK(r.rmse[j] == doctest::Approx(a.rmse[j]).epsilon(1e-14));
}

TEST_CASE("evaluation is independent of the worker count") {
    Cohort c = tumor(9, 10);
    Model model = small_model(tumor(16, 11), tumor(4, 12), 3, 3);
    for (Strategy s : {Strategy::sliding, Strategy::random, Strategy::factual}) {
        auto qs = gen_queries(s, c, 3, 5, 2);
        auto one = predict_queries(model, c, qs, 1);
        CHECK(one == predict_queries(model, c, qs, 2));
        CHECK(one == predict_queries(model, c, qs, 4));
        CHECK(one == predict_queries(model, c, qs, 64));
    }
    EvalSection ev;
    Evaluation e1 = evaluate(model, c, c, ev, 3, 5, 1);
    Evaluation e3 = evaluate(model, c, c, ev, 3, 5, 3);
    CHECK(e1.errors.rmse == e3.errors.rmse);
    CHECK(e1.nrmse == e3.nrmse);
    CHECK(e1.norm_const == normalization_constant(c));
    for (std::size_t j = 0; j < 3; ++j) CHECK(e1.nrmse[j] == e1.errors.rmse[j] / e1.norm_const);
}

TEST_CASE("ablation variants and reports") {
    ExperimentConfig base;
    base.encoder.max_epochs = 7;
    CHECK(apply_variant(base, "").encoder.use_cpc);
    auto nc = apply_variant(base, "no_cpc");
    CHECK_FALSE(nc.encoder.use_cpc);
    CHECK(nc.encoder.use_infomax);
    auto both = apply_variant(base, "no_cpc+no_infomax");
    CHECK(both.encoder.max_epochs == 0);
    CHECK(apply_variant(base, "no_balancing").decoder.balancing == Balancing::none);
    CHECK(apply_variant(base, "cdc_loss").decoder.balancing == Balancing::cdc);
    CHECK(apply_variant(base, "nwj").encoder.infomax_bound == MiBound::nwj);
    CHECK(apply_variant(base, "mine").encoder.infomax_bound == MiBound::mine);
    CHECK_THROWS_AS(apply_variant(base, "no_cpx"), std::invalid_argument);

    VariantReport r;
    r.variant = "full";
    r.rmse = {1.0, 2.0};
    r.nrmse = {0.5, 1.0};
    r.n_queries = {10, 9};
    r.seeds = {1, 2};
    r.norm_const = 2.0;
    CHECK(r.mean_nrmse() == 0.75);
    CHECK(report_csv({r}) ==
          "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const\n"
          "full,1,1,0.5,10,2,2\n"
          "full,2,2,1,9,2,2\n");
}

TEST_CASE("content hashes") {
    CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
}

TEST_CASE("probe separates informative from uninformative features") {
    Rng rng = substream(3, "t");
    const std::size_t n = 600;
    Tensor informative(Shape{n, 2}, 0.0), noise(Shape{n, 2}, 0.0);
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
        const int k = uniform01(rng) < 0.7 ? 0 : 1;
        labels.push_back(k);
        informative.at(i, 0) = (k ? 1.5 : -1.5) + standard_normal(rng);
        informative.at(i, 1) = standard_normal(rng);
        noise.at(i, 0) = standard_normal(rng);
        noise.at(i, 1) = standard_normal(rng);
    }
    auto good = fit_probe(informative, labels, 2, 1);
    auto bad = fit_probe(noise, labels, 2, 1);
    CHECK(good.majority_rate == doctest::Approx(0.7).epsilon(0.1));
    CHECK(good.accuracy > good.majority_rate + 0.15);
    CHECK(std::abs(bad.accuracy - bad.majority_rate) < 0.06);
    CHECK(good.log_likelihood > -good.marginal_entropy);
}
