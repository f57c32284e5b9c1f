#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "reto/binary_io.hpp"
#include "reto/error.hpp"
#include "reto/geometry_encoding.hpp"
#include "reto/linalg.hpp"
#include "reto/random.hpp"

namespace reto {

// One geometry/field pair. Stored in single precision, exactly as on disk.
struct SampleRecord {
  std::string sample_id;
  Matrix<float> coords;               // N x 3
  Matrix<float> fields;               // N x C
  std::vector<std::string> channels;  // C names, unique
  std::map<std::string, std::string> metadata;

  Eigen::Index points() const { return coords.rows(); }
  Eigen::Index channel_count() const { return fields.cols(); }

  int channel_index(std::string_view name) const {
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] == name) return static_cast<int>(i);
    }
    fail(ErrorCode::Configuration, "sample " + sample_id + " has no channel '" + std::string(name) + "'");
  }

  std::vector<Vec3> coordinate_list() const {
    std::vector<Vec3> out;
    out.reserve(static_cast<std::size_t>(points()));
    for (Eigen::Index i = 0; i < points(); ++i) out.emplace_back(coords(i, 0), coords(i, 1), coords(i, 2));
    return out;
  }

  void validate() const {
    require(points() >= 1, ErrorCode::EmptyDataset, "sample " + sample_id + " has no points");
    require(coords.cols() == 3, ErrorCode::Shape, "sample coords must be N x 3");
    require(fields.rows() == points() || fields.size() == 0, ErrorCode::Shape,
            "sample fields must have one row per point");
    require(static_cast<Eigen::Index>(channels.size()) == fields.cols(), ErrorCode::Shape,
            "channel name count does not match field columns");
    for (std::size_t i = 0; i < channels.size(); ++i) {
      for (std::size_t j = i + 1; j < channels.size(); ++j) {
        require(channels[i] != channels[j], ErrorCode::Format, "duplicate channel name " + channels[i]);
      }
    }
    require(coords.allFinite() && fields.allFinite(), ErrorCode::NonFiniteInput,
            "sample " + sample_id + " contains non-finite values");
  }

  bool operator==(const SampleRecord& o) const {
    return sample_id == o.sample_id && coords.rows() == o.coords.rows() && fields.rows() == o.fields.rows() &&
           fields.cols() == o.fields.cols() && coords == o.coords && fields == o.fields && channels == o.channels &&
           metadata == o.metadata;
  }
};

// ---------------------------------------------------------------------------
// Synthetic data: inviscid flow past a sphere of radius a centred at the
// origin in a uniform stream U along +x. Velocity potential
//   phi = U x (1 + a^3 / (2 r^3))
// so u = U (1 + a^3/(2 r^3)) e_x - (3/2) U a^3 x r^-5 (x, y, z), and the
// pressure coefficient follows from Bernoulli: Cp = 1 - |u|^2 / U^2.

struct FlowState {
  Vec3 velocity;
  double cp = 0.0;
};

inline FlowState potential_flow_at(const Vec3& p, double radius, double free_stream) {
  const double r2 = p.squaredNorm();
  require(r2 > 0.0, ErrorCode::Parameter, "potential flow undefined at the sphere centre");
  const double r = std::sqrt(r2);
  const double a3 = radius * radius * radius;
  const double r3 = r2 * r;
  const double r5 = r3 * r2;
  Vec3 u = -1.5 * free_stream * a3 * p.x() / r5 * p;
  u.x() += free_stream * (1.0 + a3 / (2.0 * r3));
  return {u, 1.0 - u.squaredNorm() / (free_stream * free_stream)};
}

enum class SamplingRegion { Surface, Shell };

struct FlowSampleSpec {
  double radius = 1.0;
  double free_stream = 1.0;
  Eigen::Index points = 512;
  SamplingRegion region = SamplingRegion::Shell;
  double outer_radius = 2.5;  // shell only: a < r <= outer_radius
};

inline std::string to_string(SamplingRegion r) { return r == SamplingRegion::Surface ? "surface" : "shell"; }

inline SamplingRegion parse_region(std::string_view s) {
  if (s == "surface") return SamplingRegion::Surface;
  if (s == "shell" || s == "volume") return SamplingRegion::Shell;
  fail(ErrorCode::Configuration, "unknown sampling region '" + std::string(s) + "'");
}

inline const std::vector<std::string>& flow_channels() {
  static const std::vector<std::string> names{"p", "u", "v", "w"};
  return names;
}

// Points uniform on the sphere surface or uniform in the shell volume; channels (p=Cp, u, v, w).
inline SampleRecord gen_potential_flow_sphere(const FlowSampleSpec& spec, std::uint64_t seed,
                                              std::string sample_id = "sample") {
  require(spec.radius > 0.0, ErrorCode::Parameter, "sphere radius must be positive");
  require(spec.free_stream > 0.0, ErrorCode::Parameter, "free-stream speed must be positive");
  require(spec.points >= 1, ErrorCode::Parameter, "point count must be >= 1");
  if (spec.region == SamplingRegion::Shell) {
    require(spec.outer_radius > spec.radius, ErrorCode::Parameter, "shell outer radius must exceed the sphere radius");
  }
  Rng rng(seed);
  SampleRecord rec;
  rec.sample_id = std::move(sample_id);
  rec.coords.resize(spec.points, 3);
  rec.fields.resize(spec.points, 4);
  rec.channels = flow_channels();
  const double a3 = std::pow(spec.radius, 3);
  const double b3 = std::pow(spec.outer_radius, 3);
  for (Eigen::Index i = 0; i < spec.points; ++i) {
    const double z = rng.uniform(-1.0, 1.0);
    const double azimuth = 2.0 * std::numbers::pi * rng.uniform();
    const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Vec3 dir(s * std::cos(azimuth), s * std::sin(azimuth), z);
    double r = spec.radius;
    if (spec.region == SamplingRegion::Shell) {
      // 1 - uniform() lies in (0, 1], so r is in (a, outer].
      r = std::cbrt(a3 + (1.0 - rng.uniform()) * (b3 - a3));
    }
    const Vec3 p = r * dir;
    const auto state = potential_flow_at(p, spec.radius, spec.free_stream);
    for (int c = 0; c < 3; ++c) rec.coords(i, c) = static_cast<float>(p[c]);
    rec.fields(i, 0) = static_cast<float>(state.cp);
    for (int c = 0; c < 3; ++c) rec.fields(i, 1 + c) = static_cast<float>(state.velocity[c]);
  }
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  rec.metadata["generator"] = "potential_flow_sphere";
  rec.metadata["radius"] = fmt(spec.radius);
  rec.metadata["free_stream"] = fmt(spec.free_stream);
  rec.metadata["region"] = to_string(spec.region);
  rec.metadata["outer_radius"] = fmt(spec.outer_radius);
  rec.metadata["seed"] = std::to_string(seed);
  return rec;
}

// Reads the generator parameters back from a sample's metadata.
inline FlowSampleSpec flow_spec_from_metadata(const SampleRecord& rec) {
  auto get = [&](const char* key) {
    const auto it = rec.metadata.find(key);
    if (it == rec.metadata.end()) {
      fail(ErrorCode::Parameter, "sample " + rec.sample_id + " lacks generator metadata '" + key + "'");
    }
    return it->second;
  };
  FlowSampleSpec spec;
  spec.radius = std::stod(get("radius"));
  spec.free_stream = std::stod(get("free_stream"));
  spec.region = parse_region(get("region"));
  spec.outer_radius = std::stod(get("outer_radius"));
  spec.points = rec.points();
  return spec;
}

// ---------------------------------------------------------------------------
// Channel selection and Z-score normalisation (population standard deviation).

inline Matrix<float> select_channels(const SampleRecord& rec, std::span<const std::string> names) {
  Matrix<float> out(rec.points(), static_cast<Eigen::Index>(names.size()));
  for (std::size_t c = 0; c < names.size(); ++c) {
    out.col(static_cast<Eigen::Index>(c)) = rec.fields.col(rec.channel_index(names[c]));
  }
  return out;
}

struct ZScoreStats {
  std::vector<std::string> channels;
  std::vector<double> mean;
  std::vector<double> stddev;

  std::size_t size() const { return channels.size(); }
  bool operator==(const ZScoreStats&) const = default;
};

inline constexpr double kMinChannelStd = 1e-12;

// Per-channel mean / population std over every point of every training sample.
inline ZScoreStats fit_zscore(std::span<const SampleRecord> train, std::span<const std::string> channels) {
  require(!train.empty(), ErrorCode::EmptyDataset, "fit_zscore: empty training split");
  ZScoreStats stats{{channels.begin(), channels.end()}, {}, {}};
  for (const auto& name : channels) {
    // Two passes with long double accumulation; order is fixed by the sample order.
    long double sum = 0;
    std::size_t count = 0;
    for (const auto& rec : train) {
      const auto col = rec.fields.col(rec.channel_index(name));
      for (Eigen::Index i = 0; i < col.size(); ++i) sum += col[i];
      count += static_cast<std::size_t>(col.size());
    }
    const long double mean = sum / static_cast<long double>(count);
    long double sq = 0;
    for (const auto& rec : train) {
      const auto col = rec.fields.col(rec.channel_index(name));
      for (Eigen::Index i = 0; i < col.size(); ++i) sq += (col[i] - mean) * (col[i] - mean);
    }
    const double stddev = static_cast<double>(std::sqrt(sq / static_cast<long double>(count)));
    require(stddev >= kMinChannelStd, ErrorCode::DegenerateChannel,
            "channel '" + name + "' is constant over the training split");
    stats.mean.push_back(static_cast<double>(mean));
    stats.stddev.push_back(stddev);
  }
  return stats;
}

// Columns of `fields` correspond to stats.channels in order.
template <std::floating_point T, std::floating_point U = T>
Matrix<T> apply_zscore(const Matrix<U>& fields, const ZScoreStats& stats) {
  require(fields.cols() == static_cast<Eigen::Index>(stats.size()), ErrorCode::Shape,
          "apply_zscore: channel count mismatch");
  Matrix<T> out(fields.rows(), fields.cols());
  for (Eigen::Index c = 0; c < fields.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    for (Eigen::Index i = 0; i < fields.rows(); ++i) {
      out(i, c) = static_cast<T>((static_cast<double>(fields(i, c)) - stats.mean[k]) / stats.stddev[k]);
    }
  }
  return out;
}

template <std::floating_point T, std::floating_point U = T>
Matrix<T> invert_zscore(const Matrix<U>& normalized, const ZScoreStats& stats) {
  require(normalized.cols() == static_cast<Eigen::Index>(stats.size()), ErrorCode::Shape,
          "invert_zscore: channel count mismatch");
  Matrix<T> out(normalized.rows(), normalized.cols());
  for (Eigen::Index c = 0; c < normalized.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    for (Eigen::Index i = 0; i < normalized.rows(); ++i) {
      out(i, c) = static_cast<T>(static_cast<double>(normalized(i, c)) * stats.stddev[k] + stats.mean[k]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// RSMP sample files (little-endian):
//   "RSMP" | u32 version | u64 N | u32 C | str id | C x str channel |
//   u32 M | M x (str key, str value) | N*3 f32 coords | N*C f32 fields | u32 crc32
// where str = u32 length + bytes and the CRC covers every preceding byte.

inline constexpr std::uint32_t kSampleFormatVersion = 1;

inline std::vector<std::uint8_t> encode_sample(const SampleRecord& rec) {
  rec.validate();
  ByteWriter w;
  w.raw("RSMP");
  w.u32(kSampleFormatVersion);
  w.u64(static_cast<std::uint64_t>(rec.points()));
  w.u32(static_cast<std::uint32_t>(rec.channel_count()));
  w.str(rec.sample_id);
  for (const auto& c : rec.channels) w.str(c);
  w.u32(static_cast<std::uint32_t>(rec.metadata.size()));
  for (const auto& [k, v] : rec.metadata) {
    w.str(k);
    w.str(v);
  }
  for (Eigen::Index i = 0; i < rec.coords.size(); ++i) w.f32(rec.coords.data()[i]);
  for (Eigen::Index i = 0; i < rec.fields.size(); ++i) w.f32(rec.fields.data()[i]);
  w.seal();
  return w.bytes();
}

// Bytes before the coordinate block.
inline std::size_t sample_header_size(const SampleRecord& rec) {
  std::size_t n = 4 + 4 + 8 + 4 + 4 + rec.sample_id.size();
  for (const auto& c : rec.channels) n += 4 + c.size();
  n += 4;
  for (const auto& [k, v] : rec.metadata) n += 8 + k.size() + v.size();
  return n;
}

inline SampleRecord decode_sample(const std::vector<std::uint8_t>& bytes, std::string_view source = "sample") {
  ByteReader r(bytes, source);
  if (bytes.size() < 8) r.corrupt(0, "file too short for header");
  if (r.raw(4) != "RSMP") r.corrupt(0, "bad magic (expected RSMP)");
  const auto version = r.u32();
  if (version != kSampleFormatVersion) {
    fail(ErrorCode::Version, std::string(source) + ": sample format version " + std::to_string(version) +
                                 ", this build reads version " + std::to_string(kSampleFormatVersion));
  }
  r.verify_trailing_checksum();
  SampleRecord rec;
  const auto n_at = r.offset();
  const auto n = r.u64();
  const auto c = r.u32();
  rec.sample_id = r.str();
  for (std::uint32_t i = 0; i < c; ++i) rec.channels.push_back(r.str());
  const auto m = r.u32();
  for (std::uint32_t i = 0; i < m; ++i) {
    auto key = r.str();
    rec.metadata[std::move(key)] = r.str();
  }
  const auto expected = n * (3 + static_cast<std::uint64_t>(c)) * 4;
  if (expected != r.remaining() - 4) {
    r.corrupt(n_at, "point/channel counts imply " + std::to_string(expected) + " payload bytes");
  }
  rec.coords.resize(static_cast<Eigen::Index>(n), 3);
  rec.fields.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < rec.coords.size(); ++i) rec.coords.data()[i] = r.f32();
  for (Eigen::Index i = 0; i < rec.fields.size(); ++i) rec.fields.data()[i] = r.f32();
  r.expect_end();
  rec.validate();
  return rec;
}

inline void save_sample(const std::filesystem::path& path, const SampleRecord& rec) {
  write_file_atomic(path, encode_sample(rec));
}

inline SampleRecord load_sample(const std::filesystem::path& path) {
  return decode_sample(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------

// n distinct rows drawn without replacement (seeded); coords and fields stay aligned.
inline SampleRecord random_subsample(const SampleRecord& rec, Eigen::Index n, std::uint64_t seed) {
  require(n >= 1 && n <= rec.points(), ErrorCode::Bounds,
          "subsample of " + std::to_string(n) + " from " + std::to_string(rec.points()) + " points");
  auto perm = random_permutation(static_cast<std::size_t>(rec.points()), seed);
  SampleRecord out;
  out.sample_id = rec.sample_id;
  out.channels = rec.channels;
  out.metadata = rec.metadata;
  out.coords.resize(n, 3);
  out.fields.resize(n, rec.fields.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
    out.coords.row(i) = rec.coords.row(src);
    if (rec.fields.cols() > 0) out.fields.row(i) = rec.fields.row(src);
  }
  return out;
}

enum class Split { Train, Val, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail(ErrorCode::Format, "unknown split tag '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string sample_id;
  std::string path;  // relative to the manifest directory
  Split split = Split::Train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string stats_provenance = "train";

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(e);
    }
    return out;
  }
  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) {
      return e.split == s;
    }));
  }

  bool operator==(const DatasetManifest&) const = default;
};

// Seeded shuffle, then contiguous train/val/test blocks of floor(S * ratio) (test takes the rest).
inline DatasetManifest make_splits(std::span<const std::string> sample_ids, std::array<double, 3> ratios,
                                   std::uint64_t seed) {
  require(!sample_ids.empty(), ErrorCode::EmptyDataset, "make_splits: no samples");
  require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9 && ratios[0] >= 0 && ratios[1] >= 0 &&
              ratios[2] >= 0,
          ErrorCode::Configuration, "split ratios must be non-negative and sum to 1");
  const auto s = sample_ids.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(s) * ratios[0] + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(s) * ratios[1] + 1e-9));
  const auto order = random_permutation(s, seed);
  DatasetManifest manifest;
  for (std::size_t i = 0; i < s; ++i) {
    const auto& id = sample_ids[order[i]];
    const Split split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    manifest.entries.push_back({id, id + ".rsmp", split});
  }
  return manifest;
}

// Plain text: header lines, then one "id<TAB>path<TAB>split" row per sample.
inline std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# reto dataset manifest v1\n";
  os << "stats_provenance\t" << m.stats_provenance << "\n";
  for (const auto& e : m.entries) os << e.sample_id << '\t' << e.path << '\t' << to_string(e.split) << '\n';
  return os.str();
}

inline DatasetManifest parse_manifest(std::istream& in, std::string_view source = "manifest") {
  DatasetManifest m;
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.starts_with("#")) {
      if (line.starts_with("# reto dataset manifest v")) {
        if (line != "# reto dataset manifest v1") fail(ErrorCode::Version, std::string(source) + ": " + line);
        header = true;
      }
      continue;
    }
    std::vector<std::string> cols;
    std::istringstream ls(line);
    for (std::string col; std::getline(ls, col, '\t');) cols.push_back(col);
    if (cols.size() == 2 && cols[0] == "stats_provenance") {
      if (cols[1] != "train") fail(ErrorCode::Format, std::string(source) + ": statistics must be fitted on train");
      m.stats_provenance = cols[1];
      continue;
    }
    if (cols.size() != 3) {
      fail(ErrorCode::Format, std::string(source) + " line " + std::to_string(line_no) + ": expected 3 columns");
    }
    m.entries.push_back({cols[0], cols[1], parse_split(cols[2])});
  }
  require(header, ErrorCode::Format, std::string(source) + ": missing manifest header");
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  write_text_atomic(path, format_manifest(m));
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open manifest " + path.string());
  return parse_manifest(in, path.string());
}

inline std::vector<SampleRecord> load_split(const std::filesystem::path& manifest_path, const DatasetManifest& m,
                                            Split split) {
  std::vector<SampleRecord> out;
  for (const auto& e : m.split(split)) out.push_back(load_sample(manifest_path.parent_path() / e.path));
  return out;
}

}  // namespace reto
