#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cllora/metrics.hpp"
#include "cllora/numerics/rng.hpp"

using namespace cllora;

namespace {

double two_pass_variance(const std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return ss / static_cast<double>(x.size());
}

std::vector<double> diffs(const std::vector<double>& x) {
    std::vector<double> d;
    for (std::size_t i = 1; i < x.size(); ++i) d.push_back(x[i] - x[i - 1]);
    return d;
}

std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = 3.0 + rng.normal();
    return v;
}

} // namespace

TEST(Fairness, Examples) {
    std::vector<double> equal{2.5, 2.5, 2.5};
    std::vector<double> two{2.0, 4.0};
    std::vector<double> one{1.0};
    EXPECT_EQ(*fairness(equal), 0.0);
    EXPECT_DOUBLE_EQ(*fairness(two), 1.0);
    EXPECT_FALSE(fairness(one));
}

TEST(Fairness, MatchesTwoPassOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        auto x = random_vector(rng, 2 + rng.below(40));
        EXPECT_NEAR(*fairness(x), two_pass_variance(x), 1e-12);
    }
}

TEST(Fairness, AffineScaling) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_vector(rng, 2 + rng.below(20));
        const double a = 0.1 + 3.0 * rng.uniform(), b = 10.0 * rng.normal();
        auto y = x;
        for (auto& v : y) v = a * v + b;
        EXPECT_NEAR(*fairness(y), a * a * *fairness(x), 1e-10);
    }
}

TEST(Fluctuation, Examples) {
    std::vector<double> constant(10, 4.0);
    std::vector<double> linear;
    for (int i = 0; i < 10; ++i) linear.push_back(5.0 - 0.25 * i);
    EXPECT_EQ(*fluctuation(constant), 0.0);
    EXPECT_NEAR(*fluctuation(linear), 0.0, 1e-15);
    std::vector<double> alternating;
    for (int i = 0; i < 11; ++i) alternating.push_back(i % 2 ? -1.0 : 1.0);
    EXPECT_NEAR(*fluctuation(alternating), std::sqrt(two_pass_variance(diffs(alternating))), 1e-12);
    std::vector<double> short_series{1.0, 2.0};
    EXPECT_FALSE(fluctuation(short_series));
}

TEST(Fluctuation, MatchesOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_vector(rng, 3 + rng.below(40));
        EXPECT_NEAR(*fluctuation(x), std::sqrt(two_pass_variance(diffs(x))), 1e-12);
    }
}

TEST(OverfitOnset, Examples) {
    std::vector<double> decreasing{5, 4, 3, 2, 1};
    EXPECT_FALSE(overfit_onset(decreasing, 2));
    std::vector<double> v{5, 4, 3, 2, 3, 4, 5};
    EXPECT_EQ(overfit_onset(v, 2), 4u);
    EXPECT_FALSE(overfit_onset(v, 4));
}

TEST(OverfitOnset, MatchesBruteForce) {
    Rng rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        auto x = random_vector(rng, 1 + rng.below(15));
        const std::size_t patience = 1 + rng.below(4);
        std::optional<std::size_t> expected;
        for (std::size_t r = 0; r < x.size() && !expected; ++r) {
            bool is_min = true;
            for (std::size_t j = 0; j <= r; ++j) is_min = is_min && x[r] <= x[j];
            if (!is_min || r + patience >= x.size()) continue;
            bool above = true;
            for (std::size_t j = r + 1; j <= r + patience; ++j) above = above && x[j] > x[r];
            if (above) expected = r + 1;
        }
        EXPECT_EQ(overfit_onset(x, patience), expected);
    }
}

TEST(Summary, CsvRoundTrip) {
    std::vector<RoundRecord> rounds;
    const double losses[] = {5.0, 4.0, 4.5, 3.9, 4.2, 4.3, 4.4};
    for (std::size_t t = 0; t < 7; ++t) {
        RoundRecord r;
        r.round = t + 1;
        r.global_test_loss = losses[t];
        r.clients = {{0, 10, 1.0, losses[t] + 0.1}, {3, 30, 1.0, losses[t] - 0.2}};
        rounds.push_back(r);
    }
    auto curve = summarize(rounds, 3);
    EXPECT_EQ(curve.best_round, 4u);
    EXPECT_EQ(curve.overfit_onset, 4u);
    EXPECT_NEAR(*curve.mean_fairness, 0.0225, 1e-12);

    SummaryRow iid{std::nullopt, "iid", 1, curve};
    SummaryRow label{0.1, "label", 2, curve};
    std::stringstream io;
    write_summary_header(io);
    write_summary_row(iid, io);
    write_summary_row(label, io);
    auto rows = read_summary_csv(io, "memory");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_FALSE(rows[0].alpha);
    EXPECT_EQ(rows[1].alpha, 0.1);
    EXPECT_EQ(rows[1].mode, "label");
    EXPECT_EQ(rows[1].best_global_loss, 3.9);
    EXPECT_EQ(rows[1].fluctuation, curve.fluctuation);
    EXPECT_EQ(rows[1].overfit_onset, 4u);
}
