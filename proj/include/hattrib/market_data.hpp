#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hattrib/csv.hpp"
#include "hattrib/error.hpp"

namespace hattrib {

/// Aligned OHLCV panel over N assets and T+1 time slots.
///
/// Slot 0 holds the prices before the first relative; slot t (1..T) closes
/// the t-th trading period. Every matrix is N x (T+1).
struct PricePanel {
  std::vector<std::string> tickers;
  std::vector<std::string> dates;
  Eigen::MatrixXd open;
  Eigen::MatrixXd high;
  Eigen::MatrixXd low;
  Eigen::MatrixXd close;
  Eigen::MatrixXd volume;

  std::size_t num_assets() const { return tickers.size(); }
  std::size_t num_slots() const { return dates.size(); }
  // T: index of the last slot, i.e. the number of price relatives.
  std::size_t last_slot() const { return dates.empty() ? 0 : dates.size() - 1; }
};

/// y(t) = p(t) / p(t-1), elementwise.
struct RelativeVector {
  std::size_t slot = 0;
  Eigen::VectorXd values;
};

struct CovEstimate {
  std::size_t slot = 0;
  Eigen::MatrixXd matrix;
  std::size_t window = 0;
  // Smallest eigenvalue before diagonal loading.
  double raw_min_eigenvalue = 0.0;
  bool conditioned = false;
};

inline void validate_panel(const PricePanel& p) {
  const auto n = static_cast<Eigen::Index>(p.num_assets());
  const auto s = static_cast<Eigen::Index>(p.num_slots());
  for (const auto* m : {&p.open, &p.high, &p.low, &p.close, &p.volume})
    require(m->rows() == n && m->cols() == s, ErrorCode::ShapeMismatch, "panel matrices must be N x (T+1)");
  for (std::size_t t = 1; t < p.dates.size(); ++t)
    require(p.dates[t - 1] < p.dates[t], ErrorCode::UnparsableRow, "dates must be strictly increasing");
  require((p.close.array() > 0.0).all(), ErrorCode::NonPositivePrice, "close prices must be positive");
}

/// Reads a long-format CSV `date,ticker,open,high,low,close,volume` and aligns
/// it on the dates common to every selected ticker.
inline PricePanel load_panel(const std::string& path,
                             const std::optional<std::vector<std::string>>& ticker_filter = std::nullopt) {
  const std::string content = csv::read_file(path);
  const auto rows = csv::lines(content);
  require(!rows.empty(), ErrorCode::MissingColumn, path + ": empty file");

  static constexpr const char* kColumns[] = {"date", "ticker", "open", "high", "low", "close", "volume"};
  const auto header = csv::split(rows[0]);
  std::size_t col[7];
  for (std::size_t c = 0; c < 7; ++c) {
    auto it = std::find_if(header.begin(), header.end(),
                           [&](std::string_view h) { return csv::trim(h) == kColumns[c]; });
    require(it != header.end(), ErrorCode::MissingColumn, path + ": missing column '" + kColumns[c] + "'");
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  struct Row {
    double o, h, l, c, v;
  };
  std::map<std::string, std::map<std::string, Row>> by_ticker;
  std::optional<std::set<std::string>> wanted;
  if (ticker_filter) wanted.emplace(ticker_filter->begin(), ticker_filter->end());

  for (std::size_t line = 1; line < rows.size(); ++line) {
    if (csv::trim(rows[line]).empty()) continue;
    const auto f = csv::split(rows[line]);
    const std::string where = path + ":" + std::to_string(line + 1);
    require(f.size() == header.size(), ErrorCode::UnparsableRow, where + ": wrong field count");
    const std::string date(csv::trim(f[col[0]]));
    const std::string ticker(csv::trim(f[col[1]]));
    require(csv::is_iso_date(date), ErrorCode::UnparsableRow, where + ": bad date '" + date + "'");
    require(!ticker.empty(), ErrorCode::UnparsableRow, where + ": empty ticker");
    double vals[5];
    for (std::size_t k = 0; k < 5; ++k) {
      const auto v = csv::parse_double(f[col[k + 2]]);
      require(v.has_value(), ErrorCode::UnparsableRow, where + ": bad number in column '" + kColumns[k + 2] + "'");
      vals[k] = *v;
    }
    if (wanted && !wanted->count(ticker)) continue;
    for (std::size_t k = 0; k < 4; ++k)
      require(vals[k] > 0.0, ErrorCode::NonPositivePrice, where + ": non-positive price for " + ticker + " on " + date);
    require(vals[4] >= 0.0, ErrorCode::UnparsableRow, where + ": negative volume");
    auto [it, inserted] = by_ticker[ticker].emplace(date, Row{vals[0], vals[1], vals[2], vals[3], vals[4]});
    require(inserted, ErrorCode::UnparsableRow, where + ": duplicate row for " + ticker + " on " + date);
  }

  if (wanted) {
    for (const auto& t : *wanted)
      require(by_ticker.count(t) > 0, ErrorCode::EmptyIntersection, path + ": no rows for ticker '" + t + "'");
  }
  require(!by_ticker.empty(), ErrorCode::EmptyIntersection, path + ": no data rows");

  // std::map keeps tickers and dates lexicographically sorted.
  std::vector<std::string> dates;
  for (const auto& [date, _] : by_ticker.begin()->second) {
    const bool everywhere = std::all_of(by_ticker.begin(), by_ticker.end(),
                                        [&](const auto& kv) { return kv.second.count(date) > 0; });
    if (everywhere) dates.push_back(date);
  }
  require(!dates.empty(), ErrorCode::EmptyIntersection, path + ": tickers share no common dates");

  PricePanel panel;
  panel.dates = dates;
  const auto n = static_cast<Eigen::Index>(by_ticker.size());
  const auto s = static_cast<Eigen::Index>(dates.size());
  for (auto* m : {&panel.open, &panel.high, &panel.low, &panel.close, &panel.volume}) m->resize(n, s);
  Eigen::Index i = 0;
  for (const auto& [ticker, series] : by_ticker) {
    panel.tickers.push_back(ticker);
    for (Eigen::Index t = 0; t < s; ++t) {
      const Row& r = series.at(dates[static_cast<std::size_t>(t)]);
      panel.open(i, t) = r.o;
      panel.high(i, t) = r.h;
      panel.low(i, t) = r.l;
      panel.close(i, t) = r.c;
      panel.volume(i, t) = r.v;
    }
    ++i;
  }
  return panel;
}

/// Long-format CSV that load_panel() reads back bit-exactly.
inline std::string panel_to_csv(const PricePanel& p) {
  std::string out = "date,ticker,open,high,low,close,volume\n";
  for (std::size_t t = 0; t < p.num_slots(); ++t) {
    for (std::size_t i = 0; i < p.num_assets(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto c = static_cast<Eigen::Index>(t);
      out += p.dates[t] + ',' + p.tickers[i] + ',' + csv::format_double(p.open(r, c)) + ',' +
             csv::format_double(p.high(r, c)) + ',' + csv::format_double(p.low(r, c)) + ',' +
             csv::format_double(p.close(r, c)) + ',' + csv::format_double(p.volume(r, c)) + '\n';
    }
  }
  return out;
}

inline void save_panel(const PricePanel& p, const std::string& path) { csv::write_file(path, panel_to_csv(p)); }

/// Keeps slots 0..last (inclusive).
inline PricePanel truncate_panel(const PricePanel& p, std::size_t last) {
  require(last < p.num_slots(), ErrorCode::SlotOutOfRange, "truncation slot beyond panel");
  PricePanel out;
  out.tickers = p.tickers;
  out.dates.assign(p.dates.begin(), p.dates.begin() + static_cast<std::ptrdiff_t>(last + 1));
  const auto cols = static_cast<Eigen::Index>(last + 1);
  out.open = p.open.leftCols(cols);
  out.high = p.high.leftCols(cols);
  out.low = p.low.leftCols(cols);
  out.close = p.close.leftCols(cols);
  out.volume = p.volume.leftCols(cols);
  return out;
}

inline RelativeVector price_relatives(const PricePanel& panel, std::size_t t) {
  require(t >= 1 && t <= panel.last_slot(), ErrorCode::SlotOutOfRange,
          "price relative slot " + std::to_string(t) + " outside [1, " + std::to_string(panel.last_slot()) + "]");
  const auto c = static_cast<Eigen::Index>(t);
  return {t, panel.close.col(c).cwiseQuotient(panel.close.col(c - 1))};
}

/// Unbiased covariance of the rows of `sample` (window x N), symmetrized and
/// diagonally loaded when its smallest eigenvalue is not positive.
inline CovEstimate covariance_from_rows(const Eigen::MatrixXd& sample, std::size_t slot) {
  const auto w = sample.rows();
  const Eigen::RowVectorXd mean = sample.colwise().mean();
  const Eigen::MatrixXd centered = sample.rowwise() - mean;
  Eigen::MatrixXd s = (centered.transpose() * centered) / static_cast<double>(w - 1);
  s = 0.5 * (s + s.transpose()).eval();

  CovEstimate est;
  est.slot = slot;
  est.window = static_cast<std::size_t>(w);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s, Eigen::EigenvaluesOnly);
  est.raw_min_eigenvalue = eig.eigenvalues().minCoeff();
  if (est.raw_min_eigenvalue <= 0.0) {
    s.diagonal().array() += std::abs(est.raw_min_eigenvalue) + 1e-8;
    est.conditioned = true;
  }
  est.matrix = std::move(s);
  return est;
}

/// Sigma-hat(t): covariance of the `window` relatives y(t-window)..y(t-1),
/// i.e. what is known at the beginning of slot t.
inline CovEstimate sample_covariance(const PricePanel& panel, std::size_t t, std::size_t window) {
  require(window >= 2, ErrorCode::InsufficientHistory, "covariance window must be >= 2");
  require(t >= window + 1 && t <= panel.num_slots(), ErrorCode::InsufficientHistory,
          "slot " + std::to_string(t) + " lacks " + std::to_string(window) + " prior relatives");
  Eigen::MatrixXd sample(static_cast<Eigen::Index>(window), static_cast<Eigen::Index>(panel.num_assets()));
  for (std::size_t j = 0; j < window; ++j) {
    const auto s = static_cast<Eigen::Index>(t - window + j);
    sample.row(static_cast<Eigen::Index>(j)) = panel.close.col(s).cwiseQuotient(panel.close.col(s - 1)).transpose();
  }
  return covariance_from_rows(sample, t);
}

/// Covariance of y(t-window+1)..y(t): the realized estimate used by the
/// hindsight optimizer at the end of slot t.
inline CovEstimate realized_covariance(const PricePanel& panel, std::size_t t, std::size_t window) {
  require(window >= 2, ErrorCode::InsufficientHistory, "covariance window must be >= 2");
  require(t >= window && t <= panel.last_slot(), ErrorCode::InsufficientHistory,
          "slot " + std::to_string(t) + " lacks " + std::to_string(window) + " realized relatives");
  CovEstimate est = sample_covariance(panel, t + 1, window);
  est.slot = t;
  return est;
}

}  // namespace hattrib
