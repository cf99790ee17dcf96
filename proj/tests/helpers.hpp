#pragma once

#include <vector>

#include "stats/attention.hpp"
#include "stats/rng.hpp"

namespace stats::testing {

inline Value rand_vec(std::size_t n, RngStream& rng, double scale = 1.0,
                      bool requires_grad = true) {
    Tensor t({n});
    rng.fill_uniform(t, -scale, scale);
    return requires_grad ? Value::param(std::move(t)) : Value::constant(std::move(t));
}

inline FeatureSeq make_feature_seq(const std::vector<std::vector<std::vector<double>>>& raw,
                                   RegionLayout layout = RegionLayout::grid,
                                   std::size_t grid_rows = 1, std::size_t grid_cols = 0,
                                   bool requires_grad = false) {
    FeatureSeq fs;
    fs.layout = layout;
    fs.grid_rows = grid_rows;
    fs.grid_cols = grid_cols ? grid_cols : (raw.empty() ? 0 : raw[0].size());
    fs.x.resize(raw.size());
    for (std::size_t t = 0; t < raw.size(); ++t) {
        for (const auto& region : raw[t]) {
            Tensor v({region.size()});
            for (std::size_t i = 0; i < region.size(); ++i) v[i] = region[i];
            fs.x[t].push_back(requires_grad ? Value::param(std::move(v))
                                            : Value::constant(std::move(v)));
        }
    }
    return fs;
}

inline FeatureSeq random_feature_seq(std::size_t T, std::size_t n, std::size_t d,
                                     RngStream& rng, bool requires_grad = false,
                                     double scale = 1.0) {
    std::vector<std::vector<std::vector<double>>> raw(
        T, std::vector<std::vector<double>>(n, std::vector<double>(d)));
    for (auto& frame : raw)
        for (auto& region : frame)
            for (auto& x : region) x = rng.uniform(-scale, scale);
    return make_feature_seq(raw, RegionLayout::grid, 1, n, requires_grad);
}

inline std::vector<Value> collect_region_values(const FeatureSeq& fs) {
    std::vector<Value> vals;
    for (const auto& frame : fs.x)
        for (const auto& region : frame) vals.push_back(region);
    return vals;
}

}  // namespace stats::testing
