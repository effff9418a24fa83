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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "h2osdf/training.hpp"
#include "test_common.hpp"

namespace h2o {
namespace {

namespace fs = std::filesystem;

// Single scalar parameter store.
ad::ParameterStore scalar_store(double v) {
  ad::ParameterStore s;
  s.add("theta", Matrix::Constant(1, 1, v));
  return s;
}

ad::GradientMap scalar_grad(double g) {
  ad::GradientMap m(1);
  m.grads[0] = Matrix::Constant(1, 1, g);
  return m;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ad::ParameterStore s = scalar_store(0.3);
  AdamState st;
  const TrainConfig c;
  for (int i = 0; i < 3; ++i) ASSERT_TRUE(adam_update(s, st, scalar_grad(0.0), 1e-3, c));
  EXPECT_EQ(s.value(0)(0, 0), 0.3);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  ad::ParameterStore s = scalar_store(0.0);
  AdamState st;
  const TrainConfig c;
  adam_update(s, st, scalar_grad(1.0), 2e-4, c);
  EXPECT_NEAR(s.value(0)(0, 0), -2e-4 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, MatchesHandRolledReference) {
  const TrainConfig c;
  Rng rng = make_stream(41);
  ad::ParameterStore s;
  s.add("a", testing::random_matrix(rng, 3, 2));
  s.add("b", testing::random_matrix(rng, 1, 4));
  Matrix ref[2] = {s.value(0), s.value(1)};
  Matrix m[2] = {Matrix::Zero(3, 2), Matrix::Zero(1, 4)}, v[2] = {Matrix::Zero(3, 2), Matrix::Zero(1, 4)};
  AdamState st;
  const double lrs[2] = {1e-3, 5e-4};
  for (int t = 1; t <= 2; ++t) {
    ad::GradientMap g(2);
    g.grads[0] = testing::random_matrix(rng, 3, 2);
    g.grads[1] = testing::random_matrix(rng, 1, 4);
    adam_update(s, st, g, lrs[t - 1], c);
    for (int i = 0; i < 2; ++i)
      for (Eigen::Index k = 0; k < ref[i].size(); ++k) {
        const double gk = g.grads[i].data()[k];
        double& mk = m[i].data()[k];
        double& vk = v[i].data()[k];
        mk = 0.9 * mk + 0.1 * gk;
        vk = 0.999 * vk + 0.001 * gk * gk;
        const double mh = mk / (1 - std::pow(0.9, t)), vh = vk / (1 - std::pow(0.999, t));
        ref[i].data()[k] -= lrs[t - 1] * mh / (std::sqrt(vh) + 1e-8);
      }
  }
  for (int i = 0; i < 2; ++i) EXPECT_LT((s.value(i) - ref[i]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Adam, NonFiniteGradientIsSkipped) {
  ad::ParameterStore s = scalar_store(0.5);
  AdamState st;
  const TrainConfig c;
  EXPECT_FALSE(adam_update(s, st, scalar_grad(std::nan("")), 1e-3, c));
  EXPECT_FALSE(adam_update(s, st, scalar_grad(INFINITY), 1e-3, c));
  EXPECT_EQ(s.value(0)(0, 0), 0.5);
  EXPECT_EQ(st.skipped, 2);
  EXPECT_EQ(st.step, 0);
}

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.lr = 1e-3;
  const int total = 1000;
  EXPECT_NEAR(learning_rate(c, 0, total), 1e-3 / 50, 1e-18);
  EXPECT_NEAR(learning_rate(c, 49, total), 1e-3, 1e-18);
  EXPECT_NEAR(learning_rate(c, 50, total), 1e-3, 1e-18);
  EXPECT_NEAR(learning_rate(c, total, total), 0.05e-3, 1e-15);
  for (int i = 51; i < total; ++i) EXPECT_LE(learning_rate(c, i, total), learning_rate(c, i - 1, total));
  EXPECT_GT(learning_rate(c, total - 1, total), 0.05e-3);
}

TEST(Config, ValidationAndJson) {
  TrainConfig c;
  c.phase1_iters = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = TrainConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = TrainConfig{};
  c.seed = 77;
  c.use_ogs = false;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.seed, 77u);
  EXPECT_FALSE(back.use_ogs);
  EXPECT_EQ(back.rays_per_batch, 512);
  EXPECT_EQ(back.lr, 2e-4);
}

// Shared small fixture: a low-resolution room_sphere dataset and a narrow network.
class TrainingFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    DatasetOptions opt;
    opt.n_frames = 6;
    opt.width = opt.height = 24;
    opt.seed = 3;
    dataset_ = new Dataset(generate_dataset(stock_scene("room_sphere"), opt));
  }
  static void TearDownTestSuite() {
    delete dataset_;
    dataset_ = nullptr;
  }

  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("h2osdf_train_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static TrainConfig train_config() {
    TrainConfig c;
    c.phase1_iters = 6;
    c.phase2_iters = 6;
    c.rays_per_batch = 16;
    c.lr = 1e-3;
    c.log_every = 1;
    c.refinement_points = 32;
    c.seed = 5;
    return c;
  }
  static SamplingConfig sampling_config() {
    SamplingConfig s;
    s.n_uniform = 12;
    s.n_importance_per_round = 4;
    s.n_rounds = 1;
    s.s_coarse = {16.0};
    return s;
  }
  static TrainState fresh_state() {
    TrainState st;
    NetworkConfig nc = testing::small_config();
    nc.inside_out = true;
    nc.init_radius = 0.8;
    st.params = init_network(nc, 5);
    return st;
  }
  static RunOptions quiet() {
    RunOptions o;
    o.quiet = true;
    return o;
  }

  static Dataset* dataset_;
  fs::path dir_;
};

Dataset* TrainingFixture::dataset_ = nullptr;

TEST_F(TrainingFixture, LossTraceIsBitIdentical) {
  std::vector<LogRow> logs[2];
  for (auto& log : logs) {
    TrainState st = fresh_state();
    run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, st, quiet());
    run_phase(2, *dataset_, train_config(), sampling_config(), LossConfig{}, st, quiet());
    log = st.log;
  }
  ASSERT_EQ(logs[0].size(), 12u);
  for (std::size_t i = 0; i < logs[0].size(); ++i) {
    EXPECT_EQ(logs[0][i].total, logs[1][i].total);
    EXPECT_EQ(logs[0][i].L_3d, logs[1][i].L_3d);
    EXPECT_EQ(logs[0][i].inv_s, logs[1][i].inv_s);
  }
}

TEST_F(TrainingFixture, LogCadence) {
  TrainConfig c = train_config();
  c.phase1_iters = 10;
  c.log_every = 3;
  TrainState st = fresh_state();
  run_phase(1, *dataset_, c, sampling_config(), LossConfig{}, st, quiet());
  ASSERT_EQ(st.log.size(), 4u);
  EXPECT_EQ(st.log[0].iteration, 3);
  EXPECT_EQ(st.log[3].iteration, 10);
  EXPECT_EQ(s_curve_export(st.log).x.size(), 4u);
}

TEST_F(TrainingFixture, OsfReceivesNoGradientInPhaseOne) {
  const TrainState st = fresh_state();
  const PixelIndex index(*dataset_);
  const RayBatch batch = sample_batch(*dataset_, index, 16, 1, 0);
  const Matrix t = sample_rays(batch.rays, network_probe(st.params), sampling_config(), 1, 0);
  const StepResult r1 = compute_step(st.params, batch, t, 1, LossConfig{}, nullptr, 1);
  const PointCloud ref = sample_refinement_points(*dataset_, 32, 1, 0);
  const StepResult r2 = compute_step(st.params, batch, t, 2, LossConfig{}, &ref, 1);
  int osf_params = 0;
  for (int i = 0; i < st.params.store.size(); ++i) {
    if (!st.params.is_osf_param(i)) continue;
    ++osf_params;
    EXPECT_TRUE(!r1.grads.has(i) || r1.grads.grads[i].cwiseAbs().maxCoeff() == 0.0);
    ASSERT_TRUE(r2.grads.has(i));
    EXPECT_GT(r2.grads.grads[i].cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(osf_params, 2 * st.params.osf.layers());
}

TEST_F(TrainingFixture, SubBatchesSumToFullBatch) {
  const TrainState st = fresh_state();
  const PixelIndex index(*dataset_);
  const RayBatch batch = sample_batch(*dataset_, index, 15, 2, 0);
  const Matrix t = sample_rays(batch.rays, network_probe(st.params), sampling_config(), 2, 0);
  const PointCloud ref = sample_refinement_points(*dataset_, 32, 2, 0);
  for (int phase : {1, 2}) {
    const StepResult a = compute_step(st.params, batch, t, phase, LossConfig{}, &ref, 1);
    const StepResult b = compute_step(st.params, batch, t, phase, LossConfig{}, &ref, 4);
    EXPECT_NEAR(a.row.total, b.row.total, 1e-12 * std::abs(a.row.total));
    for (int i = 0; i < st.params.store.size(); ++i) {
      if (!a.grads.has(i)) continue;
      const double scale = std::max(1e-12, a.grads.grads[i].cwiseAbs().maxCoeff());
      EXPECT_LT((a.grads.grads[i] - b.grads.grads[i]).cwiseAbs().maxCoeff() / scale, 1e-10) << "param " << i;
    }
  }
}

TEST_F(TrainingFixture, CheckpointRoundTripIsExact) {
  TrainState st = fresh_state();
  RunOptions o = quiet();
  o.out_dir = dir_;
  o.checkpoint_extra = {{"note", "x"}};
  run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, st, o);
  ASSERT_TRUE(fs::exists(dir_ / "phase1.h2o"));
  nlohmann::json extra;
  const TrainState back = load_checkpoint(dir_ / "phase1.h2o", &extra);
  EXPECT_EQ(extra["note"], "x");
  EXPECT_EQ(back.iteration, st.iteration);
  EXPECT_EQ(back.phase_step, st.phase_step);
  EXPECT_EQ(back.adam.step, st.adam.step);
  ASSERT_EQ(back.log.size(), st.log.size());
  EXPECT_EQ(back.log.back().total, st.log.back().total);
  for (int i = 0; i < st.params.store.size(); ++i) {
    EXPECT_TRUE(back.params.store.value(i) == st.params.store.value(i));
    EXPECT_TRUE(back.adam.m[i] == st.adam.m[i]);
    EXPECT_TRUE(back.adam.v[i] == st.adam.v[i]);
  }
  std::vector<Ray> rays(4);
  Matrix t(4, 10);
  for (int r = 0; r < 4; ++r) {
    rays[r] = frame_pixel_ray(*dataset_, r, 100 + 37 * r);
    for (int i = 0; i < 10; ++i) t(r, i) = rays[r].t_near + (rays[r].t_far - rays[r].t_near) * i / 9.0;
  }
  const RenderResult a = render_eval(st.params, rays, t), b = render_eval(back.params, rays, t);
  EXPECT_TRUE(a.color == b.color);
  EXPECT_TRUE(a.normal == b.normal);
  EXPECT_TRUE(a.osf == b.osf);
  EXPECT_EQ(read_log_csv(dir_ / "loss_log.csv").size(), st.log.size());
}

TEST_F(TrainingFixture, ResumeContinuesIdentically) {
  TrainState full = fresh_state();
  run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, full, quiet());
  TrainState part = fresh_state();
  RunOptions o = quiet();
  o.out_dir = dir_;
  o.stop_after = 3;
  run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, part, o);
  EXPECT_EQ(part.phase_step, 3);
  TrainState resumed = load_checkpoint(dir_ / "checkpoint.h2o");
  run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, resumed, quiet());
  ASSERT_EQ(resumed.log.size(), full.log.size());
  EXPECT_EQ(resumed.log.back().total, full.log.back().total);
  for (int i = 0; i < full.params.store.size(); ++i)
    EXPECT_TRUE(resumed.params.store.value(i) == full.params.store.value(i));
}

TEST_F(TrainingFixture, PhaseTwoStartsWhereAPhaseOneLeftOff) {
  TrainConfig c = train_config();
  c.phase1_iters = 40;
  c.phase2_iters = 6000;
  TrainState st = fresh_state();
  run_phase(1, *dataset_, c, sampling_config(), LossConfig{}, st, quiet());
  const PixelIndex index(*dataset_);
  const RayBatch batch = sample_batch(*dataset_, index, 64, 99, 0);
  const Matrix t = sample_rays(batch.rays, network_probe(st.params), sampling_config(), 99, 0);
  const double before = holistic_loss(st.params, batch, t, LossConfig{});
  RunOptions o = quiet();
  o.stop_after = 1;
  run_phase(2, *dataset_, c, sampling_config(), LossConfig{}, st, o);
  EXPECT_EQ(st.phase, 2);
  EXPECT_EQ(st.adam.step, 1);
  const double after = holistic_loss(st.params, batch, t, LossConfig{});
  EXPECT_NEAR(after / before, 1.0, 0.05);
}

TEST_F(TrainingFixture, PhaseOrderIsEnforced) {
  TrainState st = fresh_state();
  st.phase = 2;
  EXPECT_THROW(run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, st, quiet()),
               ContractViolation);
  Dataset empty;
  TrainState s2 = fresh_state();
  EXPECT_THROW(run_phase(1, empty, train_config(), sampling_config(), LossConfig{}, s2, quiet()), ContractViolation);
}

TEST_F(TrainingFixture, NonFiniteLossAbortsAndKeepsCheckpoint) {
  TrainState st = fresh_state();
  RunOptions o = quiet();
  o.out_dir = dir_;
  run_phase(1, *dataset_, train_config(), sampling_config(), LossConfig{}, st, o);
  const auto stamp = fs::file_size(dir_ / "checkpoint.h2o");
  const TrainState saved = load_checkpoint(dir_ / "checkpoint.h2o");
  st.params.store.value(st.params.color.w[0]).setConstant(std::nan(""));
  EXPECT_THROW(run_phase(2, *dataset_, train_config(), sampling_config(), LossConfig{}, st, o), NumericalError);
  EXPECT_EQ(fs::file_size(dir_ / "checkpoint.h2o"), stamp);
  EXPECT_EQ(load_checkpoint(dir_ / "checkpoint.h2o").iteration, saved.iteration);
}

TEST_F(TrainingFixture, OgsEngagesAfterStartFraction) {
  TrainConfig c = train_config();
  c.phase2_iters = 10;
  c.ogs_start_fraction = 0.5;
  EXPECT_EQ(sampling_for(sampling_config(), c, 1, 9).mode, SamplingMode::kDensity);
  EXPECT_EQ(sampling_for(sampling_config(), c, 2, 4).mode, SamplingMode::kDensity);
  EXPECT_EQ(sampling_for(sampling_config(), c, 2, 5).mode, SamplingMode::kOsfGuided);
  c.use_ogs = false;
  EXPECT_EQ(sampling_for(sampling_config(), c, 2, 9).mode, SamplingMode::kDensity);
}

// Normal loss falls well below its starting value over a short phase-1 run.
TEST_F(TrainingFixture, NormalLossDecreases) {
  TrainConfig c = train_config();
  c.phase1_iters = 2000;
  c.rays_per_batch = 32;
  c.log_every = 10;
  TrainState st = fresh_state();
  run_phase(1, *dataset_, c, sampling_config(), LossConfig{}, st, quiet());
  auto window_mean = [&](std::size_t b, std::size_t e) {
    double s = 0;
    for (std::size_t i = b; i < e; ++i) s += st.log[i].L_n;
    return s / static_cast<double>(e - b);
  };
  const std::size_t n = st.log.size();
  EXPECT_LT(window_mean(n - 5, n), 0.25 * window_mean(0, 3));
}

}  // namespace
}  // namespace h2o
