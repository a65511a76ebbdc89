#include "cllora/metrics.hpp"

#include <cmath>
#include <fmt/format.h>
#include <istream>
#include <ostream>

#include "cllora/errors.hpp"

namespace cllora {

std::optional<double> fairness(std::span<const double> client_losses) {
    if (client_losses.size() < 2) {
        return std::nullopt;
    }
    // Welford
    double mean = 0.0;
    double m2 = 0.0;
    std::size_t n = 0;
    for (double x : client_losses) {
        ++n;
        double delta = x - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (x - mean);
    }
    return m2 / static_cast<double>(n);
}

std::optional<double> fluctuation(std::span<const double> series) {
    if (series.size() < 3) {
        return std::nullopt;
    }
    std::vector<double> diffs(series.size() - 1);
    for (std::size_t i = 1; i < series.size(); ++i) {
        diffs[i - 1] = series[i] - series[i - 1];
    }
    return std::sqrt(*fairness(diffs));
}

std::optional<std::size_t> overfit_onset(std::span<const double> series, std::size_t patience) {
    if (patience < 1) {
        throw UsageError("overfit patience must be at least 1");
    }
    double running_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (series[i] > running_min) {
            continue;
        }
        running_min = series[i];
        if (i + patience >= series.size()) {
            return std::nullopt;
        }
        bool above = true;
        for (std::size_t j = i + 1; j <= i + patience; ++j) {
            if (!(series[j] > running_min)) {
                above = false;
                break;
            }
        }
        if (above) {
            return i + 1;
        }
    }
    return std::nullopt;
}

CurveSummary summarize(std::span<const RoundRecord> rounds, std::size_t patience) {
    if (rounds.empty()) {
        throw DataError("cannot summarize an empty round log");
    }
    CurveSummary s;
    double fair_sum = 0.0;
    std::size_t fair_count = 0;
    for (const auto& r : rounds) {
        s.global_loss.push_back(r.global_test_loss);
        std::vector<double> losses;
        for (const auto& c : r.clients) {
            losses.push_back(c.local_test_loss);
        }
        auto f = fairness(losses);
        s.fairness.push_back(f);
        if (f) {
            fair_sum += *f;
            ++fair_count;
        }
    }
    s.best_round = 1;
    s.best_global_loss = s.global_loss[0];
    for (std::size_t i = 1; i < s.global_loss.size(); ++i) {
        if (s.global_loss[i] < s.best_global_loss) {
            s.best_global_loss = s.global_loss[i];
            s.best_round = i + 1;
        }
    }
    s.fluctuation = fluctuation(s.global_loss);
    s.overfit_onset = overfit_onset(s.global_loss, patience);
    if (fair_count > 0) {
        s.mean_fairness = fair_sum / static_cast<double>(fair_count);
    }
    return s;
}

namespace {
template <typename T>
std::string opt(const std::optional<T>& v) {
    return v ? fmt::format("{}", *v) : std::string();
}
} // namespace

void write_summary_header(std::ostream& out) {
    out << "# fluctuation = std of successive global test-loss differences; overfit_onset = first round whose loss "
           "stays above the running minimum for "
        << kDefaultOverfitPatience << " rounds (proxy metrics); mean_fairness = mean over rounds of the population "
           "variance of client test losses\n";
    out << "alpha,mode,seed,best_round,best_global_loss,fluctuation,overfit_onset,mean_fairness\n";
}

void write_summary_row(const SummaryRow& row, std::ostream& out) {
    out << fmt::format("{},{},{},{},{},{},{},{}\n", opt(row.alpha), row.mode, row.seed, row.curve.best_round,
                       row.curve.best_global_loss, opt(row.curve.fluctuation), opt(row.curve.overfit_onset),
                       opt(row.curve.mean_fairness));
}

std::vector<ParsedSummaryRow> read_summary_csv(std::istream& in, std::string_view source_name) {
    std::vector<ParsedSummaryRow> rows;
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    auto num = [&](const std::string& s) -> double {
        char* end = nullptr;
        double v = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size()) {
            throw DataError(fmt::format("{}:{}: bad number '{}'", source_name, line_no, s));
        }
        return v;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (!header) {
            if (line != "alpha,mode,seed,best_round,best_global_loss,fluctuation,overfit_onset,mean_fairness") {
                throw DataError(fmt::format("{}:{}: unexpected summary header", source_name, line_no));
            }
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            auto c = line.find(',', start);
            f.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
            if (c == std::string::npos) {
                break;
            }
            start = c + 1;
        }
        if (f.size() != 8) {
            throw DataError(fmt::format("{}:{}: expected 8 fields, got {}", source_name, line_no, f.size()));
        }
        ParsedSummaryRow r;
        if (!f[0].empty()) {
            r.alpha = num(f[0]);
        }
        r.mode = f[1];
        r.seed = static_cast<std::uint64_t>(std::stoull(f[2]));
        r.best_round = static_cast<std::size_t>(num(f[3]));
        r.best_global_loss = num(f[4]);
        if (!f[5].empty()) {
            r.fluctuation = num(f[5]);
        }
        if (!f[6].empty()) {
            r.overfit_onset = static_cast<std::size_t>(num(f[6]));
        }
        if (!f[7].empty()) {
            r.mean_fairness = num(f[7]);
        }
        rows.push_back(std::move(r));
    }
    if (!header) {
        throw DataError(fmt::format("{}: no summary header", source_name));
    }
    return rows;
}

} // namespace cllora
