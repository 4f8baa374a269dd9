#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "hidssm/data.hpp"
#include "hidssm/evaluate.hpp"
#include "hidssm/metrics.hpp"
#include "support.hpp"

using namespace hidssm;

namespace {

std::vector<int> concat(std::initializer_list<std::pair<int, std::size_t>> runs) {
  std::vector<int> v;
  for (auto [label, n] : runs) v.insert(v.end(), n, label);
  return v;
}

std::size_t nearest_prototype(const FeatureSequence& s, const Mat& protos, std::size_t t) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t p = 0; p < protos.rows(); ++p) {
    double d = 0.0;
    for (std::size_t c = 0; c < s.channels; ++c) d += (s.at(t, c) - protos(p, c)) * (s.at(t, c) - protos(p, c));
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

}  // namespace

TEST(Synth, ConstantWithinRunsWithoutNoiseOrDrift) {
  SyntheticSpec spec;
  spec.n_sequences = 3;
  spec.noise_std = 0.0;
  spec.drift = 0.0;
  for (const auto& s : synth_generate(spec).sequences)
    for (std::size_t t = 1; t < s.seq_len; ++t)
      if (s.phases[t] == s.phases[t - 1])
        for (std::size_t d = 0; d < s.channels; ++d) {
          EXPECT_EQ(s.at(t, d), s.at(t - 1, d));
        }
}

TEST(Synth, SameSeedSameBytes) {
  SyntheticSpec spec;
  spec.n_sequences = 4;
  const auto a = synth_generate(spec), b = synth_generate(spec);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(encode_features(a.sequences[i]), encode_features(b.sequences[i]));
  spec.seed = 2;
  EXPECT_NE(encode_features(synth_generate(spec).sequences[0]), encode_features(a.sequences[0]));
}

TEST(Synth, ShapesAndMonotonePhases) {
  SyntheticSpec spec;
  const auto ds = synth_generate(spec);
  ASSERT_EQ(ds.sequences.size(), 20u);
  for (const auto& s : ds.sequences) {
    EXPECT_EQ(s.seq_len, 100u);
    EXPECT_EQ(s.channels, 16u);
    EXPECT_EQ(s.phases.front(), 0);
    EXPECT_EQ(s.phases.back(), 6);
    const auto runs = run_length_encode(s.phases);
    ASSERT_EQ(runs.size(), 7u);
    for (const auto& r : runs) {
      EXPECT_GE(r.span.length(), 5u);
      EXPECT_LE(r.span.length(), 30u);
    }
  }
}

TEST(Synth, EvalSplitSharesPrototypes) {
  SyntheticSpec spec;
  const auto train = synth_generate(spec);
  spec.n_sequences = 8;
  const auto eval = synth_generate(spec, 20);
  EXPECT_EQ(train.prototypes, eval.prototypes);
  EXPECT_NE(encode_features(train.sequences[0]), encode_features(eval.sequences[0]));
}

TEST(Synth, InvalidSpecRejected) {
  SyntheticSpec spec;
  spec.n_phases = 0;
  EXPECT_THROW(spec.validate(), SpecError);
  spec = {};
  spec.min_run = 40;
  EXPECT_THROW(synth_generate(spec), SpecError);
}

// Nearest prototype must reach 99%. The closed-form bound: a frame of phase p
// is misread only if the noise projected on (mu_q - mu_p)/|.| exceeds
// |mu_p - mu_q|/2 - drift, so P(err) <= sum_q Q((|mu_p - mu_q|/2 - drift) / sigma).
TEST(Synth, NearestPrototypeCalibration) {
  SyntheticSpec spec;
  spec.n_sequences = 28;
  const auto ds = synth_generate(spec);
  std::size_t hit = 0, total = 0;
  for (const auto& s : ds.sequences)
    for (std::size_t t = 0; t < s.seq_len; ++t, ++total) hit += nearest_prototype(s, ds.prototypes, t) == static_cast<std::size_t>(s.phases[t]);
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.99);

  double worst = 0.0;
  for (std::size_t p = 0; p < spec.n_phases; ++p) {
    double bound = 0.0;
    for (std::size_t q = 0; q < spec.n_phases; ++q) {
      if (q == p) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < spec.channels; ++d)
        dist += std::pow(ds.prototypes(p, d) - ds.prototypes(q, d), 2.0);
      const double margin = (std::sqrt(dist) / 2.0 - spec.drift) / spec.noise_std;
      bound += 0.5 * std::erfc(margin / std::sqrt(2.0));
    }
    worst = std::max(worst, bound);
  }
  EXPECT_LE(worst, 0.01);
}

TEST(Sparsify, ResidueClasses) {
  EXPECT_EQ(sparsify_indices(10, 5, 0), (std::vector<std::size_t>{0, 5}));
  EXPECT_EQ(sparsify_indices(10, 5, 1), (std::vector<std::size_t>{1, 6}));
  std::vector<int> seen(23, 0);
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t t : sparsify_indices(23, 4, o)) ++seen[t];
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_THROW(sparsify_indices(10, 3, 3), ConfigError);
}

TEST(Sparsify, SubsamplesFeaturesAndRecomputesProgress) {
  SyntheticSpec spec;
  spec.n_sequences = 1;
  const auto s = synth_generate(spec).sequences[0];
  const auto sub = sparsify(s, 3, 1);
  ASSERT_EQ(sub.seq_len, 33u);
  for (std::size_t i = 0; i < sub.seq_len; ++i) {
    EXPECT_EQ(sub.phases[i], s.phases[1 + 3 * i]);
    EXPECT_EQ(sub.at(i, 5), s.at(1 + 3 * i, 5));
  }
  EXPECT_NO_THROW(sub.validate());
}

TEST(FeatureFile, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(1);
  FeatureSequence s;
  s.seq_len = 13;
  s.channels = 5;
  s.n_phases = 4;
  std::normal_distribution<float> n;
  for (int i = 0; i < 65; ++i) s.features.push_back(n(rng));
  s.phases = testing_support::random_labels(rng, 13, 4);
  const auto prog = progress_targets(s.phases);
  s.progress.assign(prog.begin(), prog.end());
  const auto bytes = encode_features(s);
  EXPECT_EQ(decode_features(bytes), s);
  FeatureSequence unlabeled = s;
  unlabeled.phases.clear();
  unlabeled.progress.clear();
  EXPECT_EQ(decode_features(encode_features(unlabeled)), unlabeled);
}

TEST(FeatureFile, TypedParseErrors) {
  SyntheticSpec spec;
  spec.n_sequences = 1;
  const auto bytes = encode_features(synth_generate(spec).sequences[0]);
  auto kind_of = [](const std::string& b) {
    try {
      decode_features(b);
    } catch (const ParseError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "decode succeeded";
    return ParseErrorKind::io;
  };
  std::string bad = bytes;
  bad.replace(bad.find("hidssm-features"), 6, "xxxxxx");
  EXPECT_EQ(kind_of(bad), ParseErrorKind::bad_magic);
  bad = bytes;
  bad.replace(bad.find("\"version\":1"), 11, "\"version\":7");
  EXPECT_EQ(kind_of(bad), ParseErrorKind::unsupported_version);
  EXPECT_EQ(kind_of("no header"), ParseErrorKind::bad_header);
  EXPECT_EQ(kind_of("{\"format\":\"hidssm-features\"\n"), ParseErrorKind::bad_header);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 1)), ParseErrorKind::truncated);
  EXPECT_EQ(kind_of(bytes + "x"), ParseErrorKind::trailing_data);
  bad = bytes;
  const auto header_end = bad.find('\n') + 1;
  bad[header_end + 100 * 16 * 4] = 9;  // first label byte, phase 9 of 7
  EXPECT_EQ(kind_of(bad), ParseErrorKind::bad_value);
}

TEST(Manifest, LoadsRelativePaths) {
  const auto dir = std::filesystem::temp_directory_path() / "hidssm_manifest_test";
  std::filesystem::create_directories(dir / "sub");
  SyntheticSpec spec;
  spec.n_sequences = 2;
  const auto ds = synth_generate(spec);
  save_features(ds.sequences[0], dir / "sub" / "a.feat");
  save_features(ds.sequences[1], dir / "sub" / "b.feat");
  write_file_bytes(dir / "m.json", R"({"format":"hidssm-manifest","version":1,"files":["sub/a.feat","sub/b.feat"]})");
  const auto loaded = load_manifest(dir / "m.json");
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[1], ds.sequences[1]);
  write_file_bytes(dir / "bad.json", R"({"format":"other","files":[]})");
  EXPECT_THROW(load_manifest(dir / "bad.json"), ParseError);
  EXPECT_THROW(load_manifest(dir / "missing.json"), ParseError);
  std::filesystem::remove_all(dir);
}

TEST(Metrics, PerfectPrediction) {
  const auto gt = concat({{0, 10}, {1, 5}, {2, 7}});
  const auto m = relaxed_metrics(gt, gt);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.jaccard, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
}

TEST(Metrics, LingeringPhaseForgivenInsideWindow) {
  const auto gt = concat({{0, 20}, {1, 20}});
  const auto pred = concat({{0, 25}, {1, 15}});
  const auto m = relaxed_metrics(pred, gt, 10);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.unrelaxed_accuracy, 0.875);
  EXPECT_EQ(relaxed_metrics(pred, gt, 0).accuracy, 0.875);
}

TEST(Metrics, ErrorsBeyondWindowCount) {
  const auto gt = concat({{0, 20}, {1, 20}});
  const auto pred = concat({{0, 33}, {1, 7}});
  // frames 20..29 forgiven, 30..32 remain wrong
  EXPECT_DOUBLE_EQ(relaxed_metrics(pred, gt, 10).accuracy, 37.0 / 40.0);
}

TEST(Metrics, WrongNonAdjacentPhaseNotForgiven) {
  const auto gt = concat({{0, 20}, {1, 20}});
  const auto pred = concat({{0, 20}, {2, 3}, {1, 17}});
  EXPECT_DOUBLE_EQ(relaxed_metrics(pred, gt, 10).accuracy, 37.0 / 40.0);
}

TEST(Metrics, MacroAveragesOverPhasesInGroundTruth) {
  const auto gt = concat({{0, 4}, {1, 4}});
  const auto pred = concat({{0, 2}, {3, 2}, {1, 4}});
  const auto m = relaxed_metrics(pred, gt, 0);
  // phase 0: tp 2 fn 2 fp 0; phase 1: tp 4. Phase 3 is absent from gt.
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, (0.5 + 1.0) / 2.0);
  EXPECT_DOUBLE_EQ(m.jaccard, (0.5 + 1.0) / 2.0);
}

TEST(MicroF1, PerfectAndConstant) {
  const auto gt = concat({{0, 3}, {1, 3}, {2, 3}, {3, 3}, {4, 3}, {5, 3}, {6, 3}});
  EXPECT_EQ(micro_f1(gt, gt), 1.0);
  EXPECT_DOUBLE_EQ(micro_f1(std::vector<int>(21, 2), gt), 1.0 / 7.0);
}

TEST(MicroF1, MatchesBruteForceCounting) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 100; ++k) {
    const std::size_t T = 1 + rng() % 40;
    const auto gt = testing_support::random_labels(rng, T, 5);
    const auto pred = testing_support::random_labels(rng, T, 5);
    double tp = 0, fp = 0, fn = 0;
    for (int c = 0; c < 5; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        tp += pred[t] == c && gt[t] == c;
        fp += pred[t] == c && gt[t] != c;
        fn += pred[t] != c && gt[t] == c;
      }
    EXPECT_DOUBLE_EQ(micro_f1(pred, gt), 2 * tp / (2 * tp + fp + fn));
    EXPECT_DOUBLE_EQ(micro_f1(pred, gt), frame_accuracy(pred, gt));
  }
}

TEST(Metrics, LengthMismatchRejected) {
  EXPECT_THROW(relaxed_metrics(std::vector<int>{0, 1}, std::vector<int>{0}), InputError);
  EXPECT_THROW(micro_f1(std::vector<int>{}, std::vector<int>{}), InputError);
}

TEST(Report, AggregatesVideosWithSampleStd) {
  std::vector<LabeledPrediction> v{{concat({{0, 20}, {1, 20}}), concat({{0, 20}, {1, 20}})},
                                   {concat({{0, 33}, {1, 7}}), concat({{0, 20}, {1, 20}})}};
  const auto r = evaluate_predictions(v, 10);
  const double a2 = 37.0 / 40.0;
  EXPECT_DOUBLE_EQ(r.accuracy.mean, (1.0 + a2) / 2.0);
  EXPECT_DOUBLE_EQ(r.accuracy.std, std::sqrt(2.0 * std::pow((1.0 - a2) / 2.0, 2.0)));
  EXPECT_DOUBLE_EQ(r.frame_accuracy, 67.0 / 80.0);
  EXPECT_DOUBLE_EQ(r.micro_f1, r.frame_accuracy);
  ASSERT_EQ(r.per_phase.size(), 2u);
  const auto j = to_json(r);
  EXPECT_EQ(j["videos"], 2);
  EXPECT_TRUE(j.contains("micro_f1"));
  EXPECT_EQ(nlohmann::ordered_json::parse(j.dump()), j);
}

TEST(Report, ModelEvaluationMatchesLibraryMetricCalls) {
  SyntheticSpec spec;
  spec.n_sequences = 5;
  spec.channels = 4;
  spec.n_phases = 3;
  spec.t_min = spec.t_max = 30;
  const auto ds = synth_generate(spec);
  LayerStackConfig cfg;
  cfg.d_model = 4;
  cfg.n_phases = 3;
  cfg.n_global = 1;
  cfg.n_ppn = 1;
  InitOptions init;
  init.randomize_all = true;
  const auto model = HidSsmModel::create(cfg, 3, init);
  const auto serial = evaluate_model(model, ds.sequences, 10, 1);
  const auto pooled = evaluate_model(model, ds.sequences, 10, 4);
  EXPECT_EQ(to_json(serial).dump(), to_json(pooled).dump());
  std::vector<double> acc;
  for (const auto& s : ds.sequences) acc.push_back(relaxed_metrics(predict_phases(model, s.to_mat()), s.phases).accuracy);
  EXPECT_EQ(serial.accuracy.mean, mean_std(acc).mean);
}
