#pragma once

// Synthetic two-domain phantoms: a body ellipse with smooth organ blobs, one
// vessel curve that brightens in domain 2, and a few tiny bright plaques on
// the vessel that look the same in both domains.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixlat/error.hpp"
#include "mixlat/image_io.hpp"
#include "mixlat/patches.hpp"
#include "mixlat/rng.hpp"

namespace mixlat {

enum Label : std::uint16_t { kBackground = 0, kBody = 1, kVessel = 2, kFirstOrgan = 3 };

struct Range {
  double lo = 0;
  double hi = 0;
  bool operator==(const Range&) const = default;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntRange&) const = default;
};

struct PhantomSpec {
  int image_size = 256;
  IntRange num_organs{2, 4};
  Range organ_intensity{0.4, 0.7};
  double body_intensity = 0.2;
  double vessel_intensity = 0.4;
  double vessel_intensity_shift = 0.25;
  double vessel_radius = 3.0;
  IntRange num_plaques{1, 4};
  IntRange plaque_radius{1, 2};
  Range plaque_intensity{0.9, 1.0};
  double noise_sigma = 0.02;

  /// Detection threshold halfway between the organ and plaque ranges.
  double detection_threshold() const { return 0.5 * (organ_intensity.hi + plaque_intensity.lo); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("phantom spec: " + m); };
    if (image_size < 32) fail("image_size must be >= 32");
    if (num_organs.lo < 0 || num_organs.hi < num_organs.lo) fail("num_organs range invalid");
    if (num_plaques.lo < 0 || num_plaques.hi < num_plaques.lo) fail("num_plaques range invalid");
    if (plaque_radius.lo < 1 || plaque_radius.hi < plaque_radius.lo) fail("plaque_radius range invalid");
    if (organ_intensity.hi < organ_intensity.lo || plaque_intensity.hi < plaque_intensity.lo)
      fail("intensity range reversed");
    if (plaque_intensity.lo <= organ_intensity.hi) fail("plaque intensities must lie strictly above organ intensities");
    for (double v : {organ_intensity.lo, organ_intensity.hi, body_intensity, vessel_intensity, plaque_intensity.lo,
                     plaque_intensity.hi, vessel_intensity_shift})
      if (!(v >= 0.0 && v <= 1.0)) fail("intensities must lie in [0,1]");
    if (vessel_intensity + vessel_intensity_shift > 1.0) fail("enhanced vessel intensity exceeds 1");
    if (!(vessel_radius >= 1.0)) fail("vessel_radius must be >= 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be finite and >= 0");
  }
  bool operator==(const PhantomSpec&) const = default;
};

inline nlohmann::ordered_json to_json(const PhantomSpec& s) {
  nlohmann::ordered_json j;
  j["image_size"] = s.image_size;
  j["num_organs"] = {s.num_organs.lo, s.num_organs.hi};
  j["organ_intensity"] = {s.organ_intensity.lo, s.organ_intensity.hi};
  j["body_intensity"] = s.body_intensity;
  j["vessel_intensity"] = s.vessel_intensity;
  j["vessel_intensity_shift"] = s.vessel_intensity_shift;
  j["vessel_radius"] = s.vessel_radius;
  j["num_plaques"] = {s.num_plaques.lo, s.num_plaques.hi};
  j["plaque_radius"] = {s.plaque_radius.lo, s.plaque_radius.hi};
  j["plaque_intensity"] = {s.plaque_intensity.lo, s.plaque_intensity.hi};
  j["noise_sigma"] = s.noise_sigma;
  return j;
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    s.image_size = j.at("image_size").get<int>();
    s.num_organs = {j.at("num_organs")[0].get<int>(), j.at("num_organs")[1].get<int>()};
    s.organ_intensity = {j.at("organ_intensity")[0].get<double>(), j.at("organ_intensity")[1].get<double>()};
    s.body_intensity = j.at("body_intensity").get<double>();
    s.vessel_intensity = j.at("vessel_intensity").get<double>();
    s.vessel_intensity_shift = j.at("vessel_intensity_shift").get<double>();
    s.vessel_radius = j.at("vessel_radius").get<double>();
    s.num_plaques = {j.at("num_plaques")[0].get<int>(), j.at("num_plaques")[1].get<int>()};
    s.plaque_radius = {j.at("plaque_radius")[0].get<int>(), j.at("plaque_radius")[1].get<int>()};
    s.plaque_intensity = {j.at("plaque_intensity")[0].get<double>(), j.at("plaque_intensity")[1].get<double>()};
    s.noise_sigma = j.at("noise_sigma").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct PhantomPair {
  Image image_a;  // domain 1 (non-enhanced)
  Image image_b;  // domain 2 (vessel enhanced)
  Image plaque_mask;  // 0/1
  LabelMap labels;    // background, body, vessel, organs 3..
  std::uint64_t seed = 0;

  bool has_masks() const { return plaque_mask.size() > 0 && !labels.labels.empty(); }
  std::vector<bool> vessel_mask() const {
    std::vector<bool> m(labels.labels.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.labels[i] == kVessel && plaque_mask.pixels[i] == 0.0f;
    return m;
  }
  std::vector<bool> organ_mask() const {
    std::vector<bool> m(labels.labels.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.labels[i] >= kFirstOrgan;
    return m;
  }
};

namespace detail {

struct Point {
  double r, c;
};

inline bool in_ellipse(double r, double c, double cr, double cc, double ar, double ac, double angle) {
  const double dr = r - cr, dc = c - cc;
  const double u = dr * std::cos(angle) + dc * std::sin(angle);
  const double v = -dr * std::sin(angle) + dc * std::cos(angle);
  return (u * u) / (ar * ar) + (v * v) / (ac * ac) <= 1.0;
}

}  // namespace detail

/// Deterministic in (spec, seed). Plaques are corner-centred discs, so radius
/// 1 gives a 2x2 block and radius 2 a 4-pixel-wide disc.
inline PhantomPair generate_phantom_pair(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const int n = spec.image_size;
  const double s = n;
  PhantomPair out;
  out.seed = seed;
  out.labels = LabelMap(n, n);
  out.plaque_mask = Image(n, n);
  Image base(n, n);

  // body
  const double body_cr = s / 2 + rng.uniform(-0.03, 0.03) * s, body_cc = s / 2 + rng.uniform(-0.03, 0.03) * s;
  const double body_ar = rng.uniform(0.36, 0.44) * s, body_ac = rng.uniform(0.40, 0.46) * s;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (detail::in_ellipse(r + 0.5, c + 0.5, body_cr, body_cc, body_ar, body_ac, 0.0)) {
        out.labels.at(r, c) = kBody;
        base.at(r, c) = static_cast<float>(spec.body_intensity);
      }
  auto inside_body = [&](double r, double c, double margin) {
    return detail::in_ellipse(r, c, body_cr, body_cc, body_ar - margin, body_ac - margin, 0.0);
  };

  // organs: ellipses with a low-order radial ripple
  const int organs = static_cast<int>(rng.uniform_int(spec.num_organs.lo, spec.num_organs.hi));
  for (int o = 0; o < organs; ++o) {
    const double ar = rng.uniform(0.06, 0.13) * s, ac = rng.uniform(0.06, 0.13) * s;
    double cr = 0, cc = 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw GenerationError("phantom: no room for organ " + std::to_string(o));
      cr = rng.uniform(0.15, 0.85) * s;
      cc = rng.uniform(0.15, 0.85) * s;
      if (inside_body(cr, cc, std::max(ar, ac) + 2)) break;
    }
    const double angle = rng.uniform(0, std::numbers::pi);
    const double ripple = rng.uniform(0.0, 0.15), phase = rng.uniform(0, 2 * std::numbers::pi);
    const int lobes = static_cast<int>(rng.uniform_int(2, 4));
    const float value = static_cast<float>(rng.uniform(spec.organ_intensity.lo, spec.organ_intensity.hi));
    const auto label = static_cast<std::uint16_t>(kFirstOrgan + o);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        if (out.labels.at(r, c) == kBackground) continue;
        const double dr = r + 0.5 - cr, dc = c + 0.5 - cc;
        const double theta = std::atan2(dr, dc);
        const double scale = 1.0 + ripple * std::sin(lobes * theta + phase);
        if (detail::in_ellipse(r + 0.5, c + 0.5, cr, cc, ar * scale, ac * scale, angle)) {
          out.labels.at(r, c) = label;
          base.at(r, c) = value;
        }
      }
  }

  // vessel: a sinusoid across the body
  const bool horizontal = rng.uniform() < 0.5;
  const double offset = rng.uniform(-0.15, 0.15) * s;
  const double amp = rng.uniform(0.04, 0.12) * s, freq = rng.uniform(1.0, 2.5), phase = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<detail::Point> centre;
  for (double t = 0; t <= s; t += 0.25) {
    const double across = s / 2 + offset + amp * std::sin(2 * std::numbers::pi * freq * t / s + phase);
    const detail::Point p = horizontal ? detail::Point{across, t} : detail::Point{t, across};
    if (inside_body(p.r, p.c, spec.vessel_radius + 2)) centre.push_back(p);
  }
  if (centre.size() < 8) throw GenerationError("phantom: vessel does not fit inside the body");
  const double rad2 = spec.vessel_radius * spec.vessel_radius;
  for (const auto& p : centre) {
    const int r0 = static_cast<int>(std::floor(p.r - spec.vessel_radius)), r1 = static_cast<int>(std::ceil(p.r + spec.vessel_radius));
    const int c0 = static_cast<int>(std::floor(p.c - spec.vessel_radius)), c1 = static_cast<int>(std::ceil(p.c + spec.vessel_radius));
    for (int r = std::max(r0, 0); r <= std::min(r1, n - 1); ++r)
      for (int c = std::max(c0, 0); c <= std::min(c1, n - 1); ++c) {
        const double dr = r + 0.5 - p.r, dc = c + 0.5 - p.c;
        if (dr * dr + dc * dc <= rad2) {
          out.labels.at(r, c) = kVessel;
          base.at(r, c) = static_cast<float>(spec.vessel_intensity);
        }
      }
  }

  // plaques on the vessel, separated by at least one pixel
  struct Plaque {
    int r, c, radius;
  };
  std::vector<Plaque> plaques;
  const int count = static_cast<int>(rng.uniform_int(spec.num_plaques.lo, spec.num_plaques.hi));
  int attempts = 0;
  while (static_cast<int>(plaques.size()) < count) {
    if (++attempts > 1000)
      throw GenerationError("phantom: could not place " + std::to_string(count) + " plaques in 1000 attempts");
    const auto& p = centre[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(centre.size()) - 1))];
    const int radius = static_cast<int>(rng.uniform_int(spec.plaque_radius.lo, spec.plaque_radius.hi));
    const double jitter = rng.uniform(-spec.vessel_radius, spec.vessel_radius);
    const double ang = rng.uniform(0, 2 * std::numbers::pi);
    const Plaque q{static_cast<int>(std::lround(p.r + jitter * std::sin(ang))),
                   static_cast<int>(std::lround(p.c + jitter * std::cos(ang))), radius};
    if (q.r - radius < 0 || q.c - radius < 0 || q.r + radius > n || q.c + radius > n) continue;
    bool clash = false;
    for (const auto& o : plaques) {
      const double d = std::hypot(q.r - o.r, q.c - o.c);
      clash = clash || d < q.radius + o.radius + 2;
    }
    if (clash) continue;
    plaques.push_back(q);
  }
  for (const auto& q : plaques) {
    const float value = static_cast<float>(rng.uniform(spec.plaque_intensity.lo, spec.plaque_intensity.hi));
    for (int r = q.r - q.radius; r < q.r + q.radius; ++r)
      for (int c = q.c - q.radius; c < q.c + q.radius; ++c) {
        const double dr = r + 0.5 - q.r, dc = c + 0.5 - q.c;
        if (dr * dr + dc * dc <= static_cast<double>(q.radius * q.radius)) {
          out.plaque_mask.at(r, c) = 1.0f;
          base.at(r, c) = value;
          if (out.labels.at(r, c) == kBackground) out.labels.at(r, c) = kBody;
        }
      }
  }

  // domains: additive vessel enhancement in b, independent noise
  Rng noise_a = rng.split(), noise_b = rng.split();
  out.image_a = base;
  out.image_b = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (out.labels.labels[i] == kVessel && out.plaque_mask.pixels[i] == 0.0f)
      out.image_b.pixels[i] += static_cast<float>(spec.vessel_intensity_shift);
    if (spec.noise_sigma > 0) {
      out.image_a.pixels[i] += static_cast<float>(spec.noise_sigma * noise_a.normal());
      out.image_b.pixels[i] += static_cast<float>(spec.noise_sigma * noise_b.normal());
    }
    out.image_a.pixels[i] = std::clamp(out.image_a.pixels[i], 0.0f, 1.0f);
    out.image_b.pixels[i] = std::clamp(out.image_b.pixels[i], 0.0f, 1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directories

enum class Role { TrainA, TrainB, Val, Test };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::TrainA: return "train_a";
    case Role::TrainB: return "train_b";
    case Role::Val: return "val";
    case Role::Test: return "test";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "train_a") return Role::TrainA;
  if (s == "train_b") return Role::TrainB;
  if (s == "val") return Role::Val;
  if (s == "test") return Role::Test;
  throw ConfigError("unknown dataset role '" + s + "'");
}

struct ManifestRecord {
  std::uint64_t seed = 0;
  Role role = Role::TrainA;
  std::vector<std::string> files;  // relative to the dataset root
  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  PhantomSpec spec;
  std::vector<ManifestRecord> records;

  std::vector<const ManifestRecord*> with_role(Role r) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& rec : records)
      if (rec.role == r) out.push_back(&rec);
    return out;
  }
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kPhantomSpecFile = "phantom.json";

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string index_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}
}  // namespace detail

/// Per-record phantom seeds; distinct across every role.
inline std::uint64_t record_seed(std::uint64_t dataset_seed, Role role, std::size_t index) {
  return detail::splitmix64(detail::splitmix64(dataset_seed) ^
                            (static_cast<std::uint64_t>(role) << 40 | static_cast<std::uint64_t>(index)));
}

inline void write_manifest(const DatasetManifest& m) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : m.records) arr.push_back({{"seed", r.seed}, {"role", to_string(r.role)}, {"files", r.files}});
  auto write = [&](const char* name, const std::string& text) {
    const std::vector<unsigned char> bytes(text.begin(), text.end());
    detail::write_bytes_atomic(m.root / name, bytes);
  };
  write(kPhantomSpecFile, to_json(m.spec).dump(2) + "\n");
  write(kManifestFile, arr.dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  auto parse = [&](const char* name) {
    const auto bytes = detail::read_bytes(root / name);
    try {
      return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError((root / name).string() + ": " + e.what(), e.byte);
    }
  };
  if (std::filesystem::exists(root / kPhantomSpecFile)) m.spec = phantom_spec_from_json(parse(kPhantomSpecFile));
  const auto arr = parse(kManifestFile);
  if (!arr.is_array()) throw ParseError((root / kManifestFile).string() + ": expected a JSON array", 0);
  for (const auto& j : arr) {
    ManifestRecord r;
    try {
      r.seed = j.at("seed").get<std::uint64_t>();
      r.role = parse_role(j.at("role").get<std::string>());
      r.files = j.at("files").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError((root / kManifestFile).string() + ": bad record: " + e.what(), 0);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

struct DatasetCounts {
  int train_a = 70;
  int train_b = 70;
  int val = 10;
  int test = 20;
};

/// Writes root/{train_a,train_b,val,test}. Training splits hold one domain each
/// from disjoint seeds; val/test hold full pairs with masks as
/// NNNN_a.png, NNNN_b.png, NNNN_plaque.png, NNNN_organs.png.
inline DatasetManifest build_dataset(const PhantomSpec& spec, const DatasetCounts& counts,
                                     const std::filesystem::path& root, std::uint64_t seed) {
  spec.validate();
  for (int c : {counts.train_a, counts.train_b, counts.val, counts.test})
    if (c < 1) throw ConfigError("dataset counts must be >= 1");
  std::error_code ec;
  for (Role r : {Role::TrainA, Role::TrainB, Role::Val, Role::Test}) {
    std::filesystem::create_directories(root / to_string(r), ec);
    if (ec) throw IoError("cannot create " + (root / to_string(r)).string() + ": " + ec.message());
  }
  DatasetManifest m;
  m.root = root;
  m.spec = spec;
  std::set<std::uint64_t> used;
  auto add = [&](Role role, int n) {
    for (int i = 0; i < n; ++i) {
      const std::uint64_t s = record_seed(seed, role, static_cast<std::size_t>(i));
      if (!used.insert(s).second) throw GenerationError("dataset: seed collision");
      const auto pair = generate_phantom_pair(spec, s);
      const std::string dir = to_string(role), stem = detail::index_name(static_cast<std::size_t>(i));
      ManifestRecord rec{s, role, {}};
      if (role == Role::TrainA || role == Role::TrainB) {
        rec.files.push_back(dir + "/" + stem + ".png");
        write_image(role == Role::TrainA ? pair.image_a : pair.image_b, root / rec.files.back());
      } else {
        rec.files = {dir + "/" + stem + "_a.png", dir + "/" + stem + "_b.png", dir + "/" + stem + "_plaque.png",
                     dir + "/" + stem + "_organs.png"};
        write_image(pair.image_a, root / rec.files[0]);
        write_image(pair.image_b, root / rec.files[1]);
        write_image(pair.plaque_mask, root / rec.files[2]);
        write_labels(pair.labels, root / rec.files[3]);
      }
      m.records.push_back(std::move(rec));
    }
  };
  add(Role::TrainA, counts.train_a);
  add(Role::TrainB, counts.train_b);
  add(Role::Val, counts.val);
  add(Role::Test, counts.test);
  write_manifest(m);
  return m;
}

/// Loads one training image (train_a/train_b records).
inline Image load_record_image(const DatasetManifest& m, const ManifestRecord& r) {
  require(!r.files.empty(), "manifest record without files");
  return read_image(m.root / r.files.front());
}

/// Loads a full evaluation pair (val/test records).
inline PhantomPair load_record_pair(const DatasetManifest& m, const ManifestRecord& r) {
  require(r.files.size() == 4, "evaluation record must list image_a, image_b, plaque and organ files");
  PhantomPair p;
  p.seed = r.seed;
  p.image_a = read_image(m.root / r.files[0]);
  p.image_b = read_image(m.root / r.files[1]);
  p.plaque_mask = read_image(m.root / r.files[2]);
  for (auto& v : p.plaque_mask.pixels) v = v >= 0.5f ? 1.0f : 0.0f;
  p.labels = read_labels(m.root / r.files[3]);
  return p;
}

}  // namespace mixlat
