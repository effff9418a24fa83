// Copyright 2026 The h2osdf Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <random>

#include "h2osdf/fields.hpp"

namespace h2o::testing {

inline NetworkConfig small_config() {
  NetworkConfig c;
  c.geo_hidden = 48;
  c.geo_layers = 4;
  c.skip_layer = 2;
  c.feature_dim = 16;
  c.color_hidden = 16;
  c.color_layers = 2;
  c.osf_hidden = 16;
  c.osf_layers = 2;
  return c;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * uniform01(rng);
  return m;
}

inline Matrix random_units(Rng& rng, Eigen::Index n) {
  Matrix v(n, 3);
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) v(i, k) = nd(rng);
    v.row(i).normalize();
  }
  return v;
}

}  // namespace h2o::testing
