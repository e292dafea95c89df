#include <gtest/gtest.h>

#include <algorithm>

#include "support.hpp"

using namespace kbtest;

namespace {

// Textbook form, in long double, written without reference to the library.
std::optional<long double> oracle_kappa(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn) {
    const long double n = static_cast<long double>(tp + fp + tn + fn);
    if (n == 0) return std::nullopt;
    const long double po = (tp + tn) / n;
    const long double pe = ((tp + fp) / n) * ((tp + fn) / n) + ((fn + tn) / n) * ((fp + tn) / n);
    if (1.0L - pe == 0.0L) return po == 1.0L ? std::optional<long double>(1.0L) : std::nullopt;
    return (po - pe) / (1.0L - pe);
}

CaseResult result(std::string id, Label gold, std::variant<Label, FailureKind> outcome, double latency = 1.0) {
    CaseResult r;
    r.plan_id = "p";
    r.config_id = "c";
    r.benchmark = "b";
    r.case_id = std::move(id);
    r.gold_label = gold;
    r.outcome = outcome;
    r.latency_seconds = latency;
    return r;
}

}  // namespace

TEST(Kappa, PerfectAgreement) { EXPECT_EQ(*cohen_kappa({250, 0, 250, 0}), 1.0); }

TEST(Kappa, MixedErrors) {
    const ConfusionMatrix m{240, 5, 245, 10};
    EXPECT_NEAR(*cohen_kappa(m), 0.94, 0.005);
    EXPECT_NEAR(*cohen_kappa(m), static_cast<double>(*oracle_kappa(240, 5, 245, 10)), 1e-15);
}

TEST(Kappa, AllPositivePredictionsOnBalancedData) { EXPECT_EQ(*cohen_kappa({250, 250, 0, 0}), 0.0); }

TEST(Kappa, UniformMatrixIsZero) { EXPECT_EQ(*cohen_kappa({125, 125, 125, 125}), 0.0); }

TEST(Kappa, UndefinedCases) {
    EXPECT_FALSE(cohen_kappa({}));
    EXPECT_EQ(*cohen_kappa({0, 0, 10, 5}), 0.0);
}

TEST(Kappa, DegenerateAgreementIsOne) { EXPECT_EQ(*cohen_kappa({0, 0, 10, 0}), 1.0); }

TEST(Kappa, SymmetricUnderClassSwap) {
    std::mt19937_64 gen(1);
    for (int i = 0; i < 2000; ++i) {
        ConfusionMatrix m{gen() % 1000, gen() % 1000, gen() % 1000, gen() % 1000};
        const auto a = cohen_kappa(m);
        const auto b = cohen_kappa(m.swapped());
        ASSERT_EQ(a.has_value(), b.has_value());
        if (a) {
            EXPECT_NEAR(*a, *b, 1e-15);
        }
    }
}

TEST(Kappa, RangeAndOracleAgreement) {
    std::mt19937_64 gen(2);
    for (int i = 0; i < 5000; ++i) {
        ConfusionMatrix m{gen() % 50, gen() % 50, gen() % 50, gen() % 50};
        const auto k = cohen_kappa(m);
        const auto o = oracle_kappa(m.tp, m.fp, m.tn, m.fn);
        ASSERT_EQ(k.has_value(), o.has_value()) << m.tp << " " << m.fp << " " << m.tn << " " << m.fn;
        if (!k) continue;
        EXPECT_GE(*k, -1.0);
        EXPECT_LE(*k, 1.0);
        EXPECT_NEAR(*k, static_cast<double>(*o), 1e-12);
    }
}

TEST(Rates, SensitivitySpecificity) {
    const ConfusionMatrix m{240, 0, 250, 10};
    EXPECT_DOUBLE_EQ(*sensitivity(m), 0.96);
    EXPECT_DOUBLE_EQ(*specificity(m), 1.00);
    EXPECT_FALSE(sensitivity({0, 3, 4, 0}));
    EXPECT_FALSE(specificity({3, 0, 0, 4}));
}

TEST(Band, Examples) {
    EXPECT_EQ(band(0.74), AgreementBand::substantial);
    EXPECT_EQ(band(0.93), AgreementBand::almost_perfect);
    EXPECT_EQ(band(0.41), AgreementBand::moderate);
    EXPECT_EQ(band(0.39), AgreementBand::poor);
    EXPECT_EQ(band(0.80), AgreementBand::almost_perfect);
    EXPECT_EQ(band(0.61), AgreementBand::substantial);
    EXPECT_EQ(band(0.60), AgreementBand::moderate);
    EXPECT_EQ(band(-0.2), AgreementBand::poor);
}

TEST(Band, Monotone) {
    auto prev = band(-1.0);
    for (int i = -1000; i <= 1000; ++i) {
        const auto b = band(i / 1000.0);
        EXPECT_GE(static_cast<int>(b), static_cast<int>(prev));
        prev = b;
    }
}

TEST(Timing, Examples) {
    const std::vector<double> a{1, 2, 3};
    const auto s = timing_stats(a);
    EXPECT_DOUBLE_EQ(*s.mean, 2.0);
    EXPECT_DOUBLE_EQ(*s.sd, 1.0);
    const std::vector<double> one{0.5};
    EXPECT_DOUBLE_EQ(*timing_stats(one).mean, 0.5);
    EXPECT_FALSE(timing_stats(one).sd);
    const std::vector<double> flat(37, 0.4321);
    EXPECT_EQ(*timing_stats(flat).sd, 0.0);
    EXPECT_FALSE(timing_stats(std::vector<double>{}).mean);
}

TEST(Timing, MatchesTwoPassOracle) {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> d(3.0, 0.7);
    std::vector<double> xs(1000);
    for (auto& x : xs) x = d(gen);
    long double sum = 0;
    for (double x : xs) sum += x;
    const long double mean = sum / xs.size();
    long double ss = 0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const auto s = timing_stats(xs);
    EXPECT_NEAR(*s.mean, static_cast<double>(mean), 1e-12);
    EXPECT_NEAR(*s.sd, std::sqrt(static_cast<double>(ss / (xs.size() - 1))), 1e-12);
}

TEST(Throughput, Projections) {
    EXPECT_NEAR(project_throughput(4.2, 250000).hours, 4.2 * 250000 / 3600.0, 1e-9);
    EXPECT_NEAR(project_throughput(4.2, 250000).hours, 292.0, 1.0);
    EXPECT_NEAR(project_throughput(4.0, 1000).hours, 1.1, 0.05);
    EXPECT_EQ(project_throughput(4.0, 0).hours, 0.0);
    EXPECT_THROW(project_throughput(0.0, 10), Error);
}

TEST(Accumulate, AllValid) {
    std::vector<CaseResult> rs;
    for (int i = 0; i < 500; ++i) {
        const auto g = i % 2 ? Label::positive : Label::negative;
        rs.push_back(result("c" + std::to_string(i), g, g));
    }
    const auto s = summarize(accumulate(rs));
    EXPECT_EQ(s.n_valid, 500u);
    EXPECT_EQ(s.n_failed, 0u);
    EXPECT_EQ(*s.kappa, 1.0);
    EXPECT_EQ(s.status, SummaryStatus::ok);
}

TEST(Accumulate, FailuresAreTalliedNotScored) {
    std::vector<CaseResult> rs;
    for (int i = 0; i < 490; ++i) {
        const auto g = i % 2 ? Label::positive : Label::negative;
        rs.push_back(result("c" + std::to_string(i), g, g));
    }
    for (int i = 0; i < 10; ++i)
        rs.push_back(result("f" + std::to_string(i), Label::positive,
                            i < 6 ? FailureKind::malformed_payload : FailureKind::unreachable, 2.0));
    const auto acc = accumulate(rs);
    const auto s = summarize(acc);
    EXPECT_EQ(s.n_valid, 490u);
    EXPECT_EQ(s.n_failed, 10u);
    EXPECT_DOUBLE_EQ(s.failure_rate(), 0.02);
    EXPECT_EQ(s.status, SummaryStatus::ok);
    EXPECT_EQ(s.failures.at(FailureKind::malformed_payload), 6u);
    EXPECT_EQ(s.failures.at(FailureKind::unreachable), 4u);
    EXPECT_EQ(acc.latencies.size(), 496u);
    EXPECT_EQ(acc.matrix.n(), 490u);
}

TEST(Accumulate, DegradedAboveTwoPercent) {
    std::vector<CaseResult> rs;
    for (int i = 0; i < 89; ++i) rs.push_back(result("c" + std::to_string(i), Label::positive, Label::positive));
    for (int i = 0; i < 11; ++i) rs.push_back(result("f" + std::to_string(i), Label::negative, FailureKind::timeout));
    EXPECT_EQ(summarize(accumulate(rs)).status, SummaryStatus::degraded);
}

TEST(Accumulate, NoValidResults) {
    std::vector<CaseResult> rs{result("a", Label::positive, FailureKind::endpoint_down)};
    const auto s = summarize(accumulate(rs));
    EXPECT_EQ(s.status, SummaryStatus::no_valid_results);
    EXPECT_FALSE(s.kappa);
}

TEST(Accumulate, PermutationInvariant) {
    std::mt19937_64 gen(8);
    std::vector<CaseResult> rs;
    for (int i = 0; i < 300; ++i) {
        const auto g = gen() % 2 ? Label::positive : Label::negative;
        std::variant<Label, FailureKind> o = gen() % 10 == 0 ? std::variant<Label, FailureKind>(FailureKind::no_payload_found)
                                                             : std::variant<Label, FailureKind>(gen() % 5 ? g : flipped(g));
        rs.push_back(result("c" + std::to_string(i), g, o, 0.1 + (gen() % 1000) / 1000.0));
    }
    const auto base = metrics_to_json(summarize(accumulate(rs))).dump();
    for (int k = 0; k < 20; ++k) {
        std::shuffle(rs.begin(), rs.end(), gen);
        EXPECT_EQ(metrics_to_json(summarize(accumulate(rs))).dump(), base);
    }
}

TEST(Metrics, JsonRoundTrip) {
    std::vector<CaseResult> rs;
    for (int i = 0; i < 50; ++i) rs.push_back(result("c" + std::to_string(i), Label::positive, i % 7 ? Label::positive : Label::negative));
    for (int i = 0; i < 50; ++i) rs.push_back(result("d" + std::to_string(i), Label::negative, Label::negative));
    SummaryOptions opt;
    opt.bootstrap = true;
    opt.bootstrap_replicates = 200;
    const auto s = summarize(accumulate(rs), opt);
    ASSERT_TRUE(s.kappa_ci);
    EXPECT_LE(s.kappa_ci->lower, *s.kappa);
    EXPECT_GE(s.kappa_ci->upper, *s.kappa);
    const auto back = metrics_from_json(nlohmann::json::parse(metrics_to_json(s).dump()));
    EXPECT_EQ(metrics_to_json(back).dump(), metrics_to_json(s).dump());
}
