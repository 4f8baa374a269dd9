#pragma once

// Feature-sequence container, the on-disk feature format, the synthetic
// phase-sequence generator and the temporal sparsification sampler.
//
// Feature file layout (all multi-byte values little-endian):
//   line 1   JSON header terminated by '\n', e.g.
//            {"format":"hidssm-features","version":1,"T":100,"D":16,
//             "n_phases":7,"labels":true,"progress":true}
//   T*D      float32 features, row-major (frame-major)
//   T        uint8 phase labels                       (if "labels")
//   T        float32 progress targets in (0, 1)       (if "progress")
// Nothing may follow the last section.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hidssm/errors.hpp"
#include "hidssm/targets.hpp"
#include "hidssm/tensor.hpp"

namespace hidssm {

inline constexpr std::string_view kFeatureFormat = "hidssm-features";
inline constexpr int kFeatureFormatVersion = 1;
inline constexpr std::size_t kMaxHeaderBytes = 4096;

struct FeatureSequence {
  std::size_t seq_len = 0;
  std::size_t channels = 0;
  std::size_t n_phases = 0;
  std::vector<float> features;  // seq_len x channels
  std::vector<int> phases;      // empty when unlabeled
  std::vector<float> progress;  // empty when absent

  bool has_labels() const { return !phases.empty(); }
  bool has_progress() const { return !progress.empty(); }

  float at(std::size_t t, std::size_t d) const { return features[t * channels + d]; }

  Mat to_mat() const {
    Mat m(seq_len, channels);
    for (std::size_t i = 0; i < features.size(); ++i) m.flat()[i] = static_cast<double>(features[i]);
    return m;
  }

  SupervisionTargets targets() const {
    if (!has_labels()) throw InputError("sequence has no phase labels");
    return SupervisionTargets::from_phases(phases);
  }

  void validate() const {
    if (seq_len < 1 || channels < 1) throw InputError("feature sequence must have T >= 1 and D >= 1");
    if (features.size() != seq_len * channels) throw InputError("feature payload size mismatch");
    if (!phases.empty() && phases.size() != seq_len) throw InputError("label count mismatch");
    if (!progress.empty() && progress.size() != seq_len) throw InputError("progress count mismatch");
    if (!phases.empty() && (n_phases < 1 || n_phases > 255)) throw InputError("n_phases must be in [1, 255]");
    for (int p : phases)
      if (p < 0 || static_cast<std::size_t>(p) >= n_phases) throw InputError("phase label out of range");
  }

  bool operator==(const FeatureSequence&) const = default;
};

namespace detail {

inline void put_f32(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string encode_features(const FeatureSequence& seq) {
  seq.validate();
  nlohmann::ordered_json header = {{"format", kFeatureFormat},
                                   {"version", kFeatureFormatVersion},
                                   {"T", seq.seq_len},
                                   {"D", seq.channels},
                                   {"n_phases", seq.n_phases},
                                   {"labels", seq.has_labels()},
                                   {"progress", seq.has_progress()}};
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + seq.features.size() * 4 + seq.seq_len * 5);
  for (float v : seq.features) detail::put_f32(out, v);
  for (int p : seq.phases) out.push_back(static_cast<char>(static_cast<unsigned char>(p)));
  for (float v : seq.progress) detail::put_f32(out, v);
  return out;
}

inline FeatureSequence decode_features(std::string_view bytes) {
  const auto newline = bytes.find('\n');
  if (newline == std::string_view::npos || newline > kMaxHeaderBytes)
    throw ParseError(ParseErrorKind::bad_header, "missing or oversized header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::bad_header, e.what());
  }
  if (!header.is_object()) throw ParseError(ParseErrorKind::bad_header, "header is not a JSON object");
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!header.contains(key)) throw ParseError(ParseErrorKind::bad_header, std::string("missing field ") + key);
    return header.at(key);
  };
  if (!field("format").is_string() || field("format").get<std::string>() != kFeatureFormat)
    throw ParseError(ParseErrorKind::bad_magic, "not a hidssm feature file");
  if (!field("version").is_number_integer() || field("version").get<int>() != kFeatureFormatVersion)
    throw ParseError(ParseErrorKind::unsupported_version, "unsupported version");
  auto count = [&](const char* key) -> std::size_t {
    const auto& v = field(key);
    if (!v.is_number_unsigned()) throw ParseError(ParseErrorKind::bad_header, std::string(key) + " must be unsigned");
    return v.get<std::size_t>();
  };
  auto flag = [&](const char* key) -> bool {
    const auto& v = field(key);
    if (!v.is_boolean()) throw ParseError(ParseErrorKind::bad_header, std::string(key) + " must be boolean");
    return v.get<bool>();
  };
  FeatureSequence seq;
  seq.seq_len = count("T");
  seq.channels = count("D");
  seq.n_phases = count("n_phases");
  const bool labels = flag("labels");
  const bool progress = flag("progress");
  if (seq.seq_len < 1 || seq.channels < 1 || seq.seq_len > (1u << 28) || seq.channels > (1u << 20))
    throw ParseError(ParseErrorKind::bad_header, "T and D must be positive and reasonable");
  if (labels && (seq.n_phases < 1 || seq.n_phases > 255))
    throw ParseError(ParseErrorKind::bad_header, "n_phases must be in [1, 255]");
  if (seq.seq_len * seq.channels > (std::size_t{1} << 32))
    throw ParseError(ParseErrorKind::bad_header, "payload too large");

  const std::size_t expected =
      seq.seq_len * seq.channels * 4 + (labels ? seq.seq_len : 0) + (progress ? seq.seq_len * 4 : 0);
  const auto payload = bytes.substr(newline + 1);
  if (payload.size() < expected)
    throw ParseError(ParseErrorKind::truncated, "payload has " + std::to_string(payload.size()) + " bytes, expected " +
                                                    std::to_string(expected));
  if (payload.size() > expected)
    throw ParseError(ParseErrorKind::trailing_data, std::to_string(payload.size() - expected) + " unexpected bytes");

  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  seq.features.resize(seq.seq_len * seq.channels);
  for (auto& v : seq.features) {
    v = detail::get_f32(p);
    if (!std::isfinite(v)) throw ParseError(ParseErrorKind::bad_value, "non-finite feature value");
    p += 4;
  }
  if (labels) {
    seq.phases.resize(seq.seq_len);
    for (auto& v : seq.phases) {
      v = *p++;
      if (static_cast<std::size_t>(v) >= seq.n_phases)
        throw ParseError(ParseErrorKind::bad_value, "phase label " + std::to_string(v) + " >= n_phases");
    }
  }
  if (progress) {
    seq.progress.resize(seq.seq_len);
    for (auto& v : seq.progress) {
      v = detail::get_f32(p);
      if (!(v > 0.0f && v < 1.0f)) throw ParseError(ParseErrorKind::bad_value, "progress target outside (0, 1)");
      p += 4;
    }
  }
  return seq;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(ParseErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError(ParseErrorKind::io, "short write to " + path.string());
}

inline FeatureSequence load_features(const std::filesystem::path& path) { return decode_features(read_file_bytes(path)); }

inline void save_features(const FeatureSequence& seq, const std::filesystem::path& path) {
  write_file_bytes(path, encode_features(seq));
}

// ---- synthetic data -----------------------------------------------------

struct SyntheticSpec {
  std::size_t n_sequences = 20;
  std::size_t t_min = 100;
  std::size_t t_max = 100;
  std::size_t channels = 16;
  std::size_t n_phases = 7;
  double prototype_scale = 4.0;  // per-coordinate std of the phase prototypes
  double noise_std = 1.0;
  double drift = 1.0;            // half-range of the within-run linear drift
  std::size_t min_run = 5;
  std::size_t max_run = 30;
  bool monotone = true;          // phases 0..N_p-1 in order; otherwise interleaved
  std::uint64_t seed = 1;

  void validate() const {
    if (n_sequences < 1 || channels < 1 || n_phases < 1 || n_phases > 255 || t_min < 1 || t_max < t_min)
      throw SpecError("synthetic spec: counts must be positive, 1 <= n_phases <= 255, t_min <= t_max");
    if (!(noise_std >= 0.0) || !(prototype_scale >= 0.0) || !std::isfinite(drift))
      throw SpecError("synthetic spec: noise_std and prototype_scale must be >= 0");
    if (min_run < 1 || max_run < min_run) throw SpecError("synthetic spec: need 1 <= min_run <= max_run");
    if (!monotone && n_phases < 2) throw SpecError("synthetic spec: interleaving needs at least two phases");
    // some run count must fit every admissible length; checked per sequence too
    if (monotone && (n_phases * min_run > t_max || n_phases * max_run < t_min))
      throw SpecError("synthetic spec: run-length bounds cannot tile the requested lengths");
  }
};

struct SyntheticDataset {
  std::vector<FeatureSequence> sequences;
  Mat prototypes;        // N_p x D
  Mat drift_directions;  // N_p x D, unit rows
};

namespace detail {

// Splits `total` into `runs` lengths within [lo, hi].
inline std::vector<std::size_t> split_runs(std::size_t total, std::size_t runs, std::size_t lo, std::size_t hi,
                                           std::mt19937_64& rng) {
  std::vector<std::size_t> len(runs, lo);
  std::size_t rest = total - runs * lo;
  std::uniform_int_distribution<std::size_t> pick(0, runs - 1);
  while (rest > 0) {
    const std::size_t i = pick(rng);
    if (len[i] < hi) {
      ++len[i];
      --rest;
    }
  }
  return len;
}

}  // namespace detail

/// Phase-labeled sequences whose frames are a per-phase Gaussian prototype,
/// a linear drift across each run, and i.i.d. noise. Deterministic given the seed.
inline SyntheticDataset synth_generate(const SyntheticSpec& spec, std::size_t first_index = 0) {
  spec.validate();
  std::mt19937_64 proto_rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t D = spec.channels, P = spec.n_phases;
  SyntheticDataset ds{{}, Mat(P, D), Mat(P, D)};
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t d = 0; d < D; ++d) ds.prototypes(p, d) = spec.prototype_scale * normal(proto_rng);
    double norm = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      ds.drift_directions(p, d) = normal(proto_rng);
      norm += ds.drift_directions(p, d) * ds.drift_directions(p, d);
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < D; ++d) ds.drift_directions(p, d) = norm > 0 ? ds.drift_directions(p, d) / norm : 0.0;
  }

  for (std::size_t s = first_index; s < first_index + spec.n_sequences; ++s) {
    std::mt19937_64 rng(spec.seed ^ (0x9e3779b97f4a7c15ull * (s + 1)));
    std::uniform_int_distribution<std::size_t> len_dist(spec.t_min, spec.t_max);
    const std::size_t T = len_dist(rng);

    std::vector<int> run_labels;
    std::size_t n_runs = P;
    if (!spec.monotone) {
      const std::size_t lo = (T + spec.max_run - 1) / spec.max_run;
      const std::size_t hi = T / spec.min_run;
      if (lo > hi || hi < 1) throw SpecError("synthetic spec: no run count tiles T=" + std::to_string(T));
      n_runs = std::uniform_int_distribution<std::size_t>(std::max<std::size_t>(lo, 1), hi)(rng);
      std::uniform_int_distribution<int> phase_dist(0, static_cast<int>(P) - 1);
      for (std::size_t r = 0; r < n_runs; ++r) {
        int p = phase_dist(rng);
        while (!run_labels.empty() && p == run_labels.back()) p = phase_dist(rng);
        run_labels.push_back(p);
      }
    } else {
      if (P * spec.min_run > T || P * spec.max_run < T)
        throw SpecError("synthetic spec: run-length bounds cannot tile T=" + std::to_string(T));
      for (std::size_t p = 0; p < P; ++p) run_labels.push_back(static_cast<int>(p));
    }
    const auto lengths = detail::split_runs(T, n_runs, spec.min_run, spec.max_run, rng);

    FeatureSequence seq;
    seq.seq_len = T;
    seq.channels = D;
    seq.n_phases = P;
    seq.features.resize(T * D);
    std::size_t t = 0;
    for (std::size_t r = 0; r < n_runs; ++r) {
      const auto p = static_cast<std::size_t>(run_labels[r]);
      for (std::size_t i = 0; i < lengths[r]; ++i, ++t) {
        const double pos = 2.0 * static_cast<double>(i + 1) / static_cast<double>(lengths[r] + 1) - 1.0;
        for (std::size_t d = 0; d < D; ++d) {
          const double v = ds.prototypes(p, d) + spec.drift * pos * ds.drift_directions(p, d) +
                           spec.noise_std * normal(rng);
          seq.features[t * D + d] = static_cast<float>(v);
        }
        seq.phases.push_back(run_labels[r]);
      }
    }
    const auto prog = progress_targets(seq.phases);
    seq.progress.assign(prog.begin(), prog.end());
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

/// Frame indices offset, offset + interval, ... below t_full.
inline std::vector<std::size_t> sparsify_indices(std::size_t t_full, std::size_t interval, std::size_t offset) {
  if (interval < 1 || offset >= interval)
    throw ConfigError("sparsify_indices: need interval >= 1 and 0 <= offset < interval");
  std::vector<std::size_t> out;
  for (std::size_t t = offset; t < t_full; t += interval) out.push_back(t);
  return out;
}

inline FeatureSequence sparsify(const FeatureSequence& seq, std::size_t interval, std::size_t offset) {
  FeatureSequence out;
  out.channels = seq.channels;
  out.n_phases = seq.n_phases;
  for (std::size_t t : sparsify_indices(seq.seq_len, interval, offset)) {
    out.features.insert(out.features.end(), seq.features.begin() + t * seq.channels,
                        seq.features.begin() + (t + 1) * seq.channels);
    if (seq.has_labels()) out.phases.push_back(seq.phases[t]);
    ++out.seq_len;
  }
  if (out.has_labels()) {
    const auto prog = progress_targets(out.phases);
    out.progress.assign(prog.begin(), prog.end());
  }
  return out;
}

// ---- dataset manifests -------------------------------------------------------

inline constexpr std::string_view kManifestFormat = "hidssm-manifest";

/// Reads a manifest ({"format":"hidssm-manifest","version":1,"files":[...]}) and
/// loads every listed file; paths are relative to the manifest's directory.
inline std::vector<FeatureSequence> load_manifest(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::bad_header, std::string("manifest: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kManifestFormat || !j.contains("files") || !j["files"].is_array())
    throw ParseError(ParseErrorKind::bad_magic, "not a hidssm manifest: " + manifest.string());
  std::vector<FeatureSequence> out;
  for (const auto& f : j["files"]) {
    if (!f.is_string()) throw ParseError(ParseErrorKind::bad_header, "manifest entries must be strings");
    out.push_back(load_features(manifest.parent_path() / f.get<std::string>()));
  }
  if (out.empty()) throw ParseError(ParseErrorKind::bad_header, "manifest lists no files");
  return out;
}

}  // namespace hidssm
