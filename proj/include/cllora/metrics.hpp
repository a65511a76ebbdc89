#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cllora/fedsim.hpp"

namespace cllora {

// Population variance of per-client test losses. Absent for fewer than two.
std::optional<double> fairness(std::span<const double> client_losses);

// Population standard deviation of successive differences of the global
// test-loss series. Absent for fewer than three points.
std::optional<double> fluctuation(std::span<const double> series);

// 1-based round r such that series[r] is the running minimum and the next
// `patience` rounds all stay above it; the first such round wins.
std::optional<std::size_t> overfit_onset(std::span<const double> series, std::size_t patience);

inline constexpr std::size_t kDefaultOverfitPatience = 3;

struct CurveSummary {
    std::vector<double> global_loss;                  // per round
    std::vector<std::optional<double>> fairness;      // per round
    std::optional<double> fluctuation;
    std::size_t best_round = 0;                       // 1-based
    double best_global_loss = 0.0;
    std::optional<std::size_t> overfit_onset;
    std::optional<double> mean_fairness;              // over rounds where defined
};

CurveSummary summarize(std::span<const RoundRecord> rounds, std::size_t patience = kDefaultOverfitPatience);

struct SummaryRow {
    std::optional<double> alpha; // absent for iid
    std::string mode;
    std::uint64_t seed = 0;
    CurveSummary curve;
};

// alpha,mode,seed,best_round,best_global_loss,fluctuation,overfit_onset,mean_fairness
// preceded by a '#' line describing the proxy metrics. Absent values are empty.
void write_summary_header(std::ostream& out);
void write_summary_row(const SummaryRow& row, std::ostream& out);

struct ParsedSummaryRow {
    std::optional<double> alpha;
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t best_round = 0;
    double best_global_loss = 0.0;
    std::optional<double> fluctuation;
    std::optional<std::size_t> overfit_onset;
    std::optional<double> mean_fairness;
};

std::vector<ParsedSummaryRow> read_summary_csv(std::istream& in, std::string_view source_name);

} // namespace cllora
