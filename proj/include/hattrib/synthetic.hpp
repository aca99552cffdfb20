#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/random.hpp"

namespace hattrib {

/// One latent driver per feature: an AR(1) process z with coefficient
/// `persistence` and unit stationary variance, observed through the
/// oscillator 100 * logistic(z), in (0, 100), or 100 * (logistic(z) - 1/2)
/// when `centered`. `alpha` is the loading of z on the next slot's log-return.
struct PlantedFeature {
  std::string name;
  double persistence = 0.0;
  double alpha = 0.0;
  bool centered = false;
};

/// Market whose log-relatives are
///   ln y_i(t+1) = sum_k alpha_k z^k_i(t) + sigma_m m(t+1) + sigma e_i(t+1) - var/2
/// so features observed at the close of slot t predict slot t+1.
struct SyntheticConfig {
  std::size_t num_assets = 10;
  std::size_t num_slots = 1600;  // T + 1 price rows
  std::vector<PlantedFeature> features{
      {"alpha_slow", 0.97, 0.004, false},
      {"alpha_fast", 0.0, 0.015, true},
      {"noise_slow", 0.97, 0.0, true},
      {"noise_fast", 0.0, 0.0, true},
  };
  double idio_vol = 0.015;
  double market_vol = 0.008;
  std::string start_date = "2010-01-04";
  std::uint64_t seed = 7;
};

inline nlohmann::json to_json(const SyntheticConfig& c) {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : c.features) feats.push_back(
        {{"name", f.name}, {"persistence", f.persistence}, {"alpha", f.alpha}, {"centered", f.centered}});
  return {{"num_assets", c.num_assets}, {"num_slots", c.num_slots}, {"features", feats},
          {"idio_vol", c.idio_vol},     {"market_vol", c.market_vol}, {"start_date", c.start_date},
          {"seed", c.seed}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.num_assets = j.value("num_assets", c.num_assets);
  c.num_slots = j.value("num_slots", c.num_slots);
  if (j.contains("features")) {
    c.features.clear();
    for (const auto& f : j.at("features"))
      c.features.push_back({f.at("name").get<std::string>(), f.value("persistence", 0.0), f.value("alpha", 0.0),
                            f.value("centered", false)});
  }
  c.idio_vol = j.value("idio_vol", c.idio_vol);
  c.market_vol = j.value("market_vol", c.market_vol);
  c.start_date = j.value("start_date", c.start_date);
  c.seed = j.value("seed", c.seed);
  require(c.num_assets >= 2 && c.num_slots >= 3 && !c.features.empty(), ErrorCode::ConfigError,
          "synthetic market needs >= 2 assets, >= 3 slots and >= 1 feature");
  for (const auto& f : c.features)
    require(f.persistence >= 0.0 && f.persistence < 1.0 && std::isfinite(f.alpha), ErrorCode::ConfigError,
            "feature persistence must be in [0, 1)");
  require(c.idio_vol > 0.0 && c.market_vol >= 0.0, ErrorCode::ConfigError, "volatilities must be positive");
  return c;
}

/// Weekday dates starting at `start` (YYYY-MM-DD).
inline std::vector<std::string> business_days(const std::string& start, std::size_t count) {
  require(csv::is_iso_date(start), ErrorCode::ConfigError, "bad start date '" + start + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{std::stoi(start.substr(0, 4))}, month{static_cast<unsigned>(std::stoi(start.substr(5, 2)))},
                           day{static_cast<unsigned>(std::stoi(start.substr(8, 2)))}};
  require(ymd.ok(), ErrorCode::ConfigError, "bad start date '" + start + "'");
  sys_days d{ymd};
  std::vector<std::string> out;
  while (out.size() < count) {
    const weekday wd{d};
    if (wd != Saturday && wd != Sunday) {
      const year_month_day x{d};
      char buf[32];
      std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(x.year()), static_cast<unsigned>(x.month()),
                    static_cast<unsigned>(x.day()));
      out.emplace_back(buf);
    }
    d += days{1};
  }
  return out;
}

struct SyntheticMarket {
  PricePanel panel;
  FeatureTensor features;
  // Latent drivers z^k, N x (T+1) each.
  std::vector<Eigen::MatrixXd> latent;
};

inline SyntheticMarket generate_market(const SyntheticConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(cfg.num_assets);
  const auto s = static_cast<Eigen::Index>(cfg.num_slots);
  const std::size_t k = cfg.features.size();
  Rng rng(cfg.seed);

  SyntheticMarket m;
  m.latent.assign(k, Eigen::MatrixXd::Zero(n, s));
  for (std::size_t f = 0; f < k; ++f) {
    const double phi = cfg.features[f].persistence;
    const double innov = std::sqrt(1.0 - phi * phi);
    for (Eigen::Index i = 0; i < n; ++i) {
      m.latent[f](i, 0) = rng.normal();
      for (Eigen::Index t = 1; t < s; ++t) m.latent[f](i, t) = phi * m.latent[f](i, t - 1) + innov * rng.normal();
    }
  }

  PricePanel& p = m.panel;
  for (Eigen::Index i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "S%02ld", static_cast<long>(i));
    p.tickers.emplace_back(buf);
  }
  p.dates = business_days(cfg.start_date, cfg.num_slots);
  for (auto* mat : {&p.open, &p.high, &p.low, &p.close, &p.volume}) mat->resize(n, s);
  const double var = cfg.idio_vol * cfg.idio_vol + cfg.market_vol * cfg.market_vol;
  for (Eigen::Index i = 0; i < n; ++i) {
    p.close(i, 0) = 100.0;
    p.open(i, 0) = 100.0;
  }
  for (Eigen::Index t = 1; t < s; ++t) {
    const double mkt = cfg.market_vol * rng.normal();
    for (Eigen::Index i = 0; i < n; ++i) {
      double lr = mkt + cfg.idio_vol * rng.normal() - 0.5 * var;
      for (std::size_t f = 0; f < k; ++f) lr += cfg.features[f].alpha * m.latent[f](i, t - 1);
      p.close(i, t) = p.close(i, t - 1) * std::exp(lr);
      p.open(i, t) = p.close(i, t - 1);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < s; ++t) {
      const double hi = std::max(p.open(i, t), p.close(i, t));
      const double lo = std::min(p.open(i, t), p.close(i, t));
      p.high(i, t) = hi * (1.0 + 0.25 * cfg.idio_vol * std::abs(rng.normal()));
      p.low(i, t) = lo * (1.0 - 0.25 * cfg.idio_vol * std::abs(rng.normal()));
      p.volume(i, t) = std::round(1e6 * std::exp(0.2 * rng.normal()));
    }
  }

  FeatureTensor& ft = m.features;
  ft.tickers = p.tickers;
  ft.dates = p.dates;
  for (std::size_t f = 0; f < k; ++f) {
    ft.names.push_back(cfg.features[f].name);
    const double shift = cfg.features[f].centered ? 50.0 : 0.0;
    ft.values.push_back((100.0 / (1.0 + (-m.latent[f].array()).exp()) - shift).matrix());
    ft.valid_from.push_back(0);
    ft.degenerate.push_back(0);
  }
  return m;
}

}  // namespace hattrib
