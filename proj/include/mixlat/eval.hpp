#pragma once

// Whole-image translation, small-structure metrics against phantom ground
// truth, a discriminator/high-frequency quality score, and latent dumps.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixlat/networks.hpp"
#include "mixlat/patches.hpp"
#include "mixlat/phantom.hpp"

namespace mixlat {

enum class Direction { AtoB, BtoA };

inline std::string to_string(Direction d) { return d == Direction::AtoB ? "1to2" : "2to1"; }
inline Direction parse_direction(const std::string& s) {
  if (s == "1to2") return Direction::AtoB;
  if (s == "2to1") return Direction::BtoA;
  throw ConfigError("unknown direction '" + s + "' (expected 1to2 or 2to1)");
}
inline int source_domain(Direction d) { return d == Direction::AtoB ? 1 : 2; }
inline int target_domain(Direction d) { return d == Direction::AtoB ? 2 : 1; }

/// Runs fn(i) for i in [0,n) on up to `threads` workers. Results must be
/// written to per-index slots so the outcome does not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <class T>
void check_model(const ModelBundle<T>& b) {
  if (!b.all_finite_params()) throw ModelError("model has non-finite parameters");
}

struct TranslationResult {
  Image output;
  Direction direction = Direction::AtoB;
  int stride = 0;
  std::vector<float> patch_scores;  // target-domain realness per grid patch
};

/// Index of the most probable component per row of the posterior.
template <class T>
std::vector<int> argmax_components(const PosteriorParams<T>& q) {
  const auto w = q.weights();
  const int k = q.num_components(), n = q.batch();
  const bool shared = q.mixture_logits.dim(0) == 1;
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto row = w.begin() + static_cast<std::ptrdiff_t>((shared ? 0 : i) * k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

/// Mean of the selected component for each row, [N,d].
template <class T>
Var<T> component_means(const PosteriorParams<T>& q, const std::vector<int>& comp) {
  const int n = q.batch(), k = q.num_components(), d = q.latent_dim();
  const auto& mu = q.comp_means.value();
  std::vector<T> z(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy_n(mu.begin() + static_cast<std::ptrdiff_t>((i * k + comp[static_cast<std::size_t>(i)]) * d), d,
                z.begin() + static_cast<std::ptrdiff_t>(i) * d);
  return Var<T>::constant({n, d}, std::move(z));
}

inline constexpr int kInferenceChunk = 256;

/// Deterministic patch translation: posterior mean of the most probable
/// component, decoded in the target domain.
template <class T>
std::vector<Patch> translate_patches(const ModelBundle<T>& b, const std::vector<Patch>& patches, Direction dir,
                                     std::vector<float>* scores = nullptr) {
  const int p = b.spec.patch_size;
  std::vector<Patch> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += kInferenceChunk) {
    const std::size_t end = std::min(patches.size(), start + kInferenceChunk);
    const std::vector<Patch> chunk(patches.begin() + static_cast<std::ptrdiff_t>(start),
                                   patches.begin() + static_cast<std::ptrdiff_t>(end));
    const auto q = encode(b, source_domain(dir), patch_batch<T>(chunk, p));
    const auto y = generate(b, target_domain(dir), component_means(q, argmax_components(q)));
    const auto& v = y.value();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Patch patch(static_cast<std::size_t>(p) * p);
      for (std::size_t j = 0; j < patch.size(); ++j) patch[j] = static_cast<float>(v[i * patch.size() + j]);
      out.push_back(std::move(patch));
    }
    if (scores) {
      const auto realness = discriminate(b, target_domain(dir), y);
      for (T s : realness.values()) scores->push_back(static_cast<float>(s));
    }
  }
  return out;
}

/// stride 0 selects the default patch_size / 2.
template <class T>
TranslationResult translate_image(const ModelBundle<T>& b, const Image& img, Direction dir, int stride = 0) {
  check_model(b);
  const int p = b.spec.patch_size;
  if (stride == 0) stride = std::max(1, p / 2);
  require(img.height >= p && img.width >= p, "translate_image: image smaller than the patch size");
  const auto grid = make_grid(img.height, img.width, p, stride);
  TranslationResult r;
  r.direction = dir;
  r.stride = stride;
  const auto translated = translate_patches(b, extract(img, grid), dir, &r.patch_scores);
  r.output = stitch(translated, grid);
  for (auto& v : r.output.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return r;
}

// ---------------------------------------------------------------------------
// Structure metrics

struct Thresholds {
  double detection = 0.8;  // plaque binarization
  double organ = 0.3;      // organ binarization (plaque pixels excluded)

  static Thresholds from_spec(const PhantomSpec& s) {
    return {s.detection_threshold(), 0.5 * (s.body_intensity + s.organ_intensity.lo)};
  }
};

struct StructureMetrics {
  int gt_plaques = 0, predicted = 0, matched_predicted = 0, matched_gt = 0, retained = 0;
  long pixel_tp = 0, pixel_fp = 0, pixel_fn = 0;
  double precision = 0, recall = 0, dice = 0, plaque_retention = 0, plaque_mae = 0, organ_dice = 0;
  double vessel_mean_source = 0, vessel_mean_translated = 0, vessel_mean_target = 0, vessel_shift_fraction = 0;
};

inline double ratio_or_zero(double num, double den) { return den > 0 ? num / den : 0.0; }

/// 8-connected components of a binary mask; returns labels (0 = none) and count.
inline std::vector<int> connected_components(const std::vector<bool>& mask, int height, int width, int& count) {
  std::vector<int> lab(mask.size(), 0);
  std::vector<std::size_t> stack;
  count = 0;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    if (!mask[s] || lab[s]) continue;
    ++count;
    lab[s] = count;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(i / static_cast<std::size_t>(width)), c = static_cast<int>(i % static_cast<std::size_t>(width));
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= height || cc >= width) continue;
          const auto j = static_cast<std::size_t>(rr) * width + cc;
          if (mask[j] && !lab[j]) {
            lab[j] = count;
            stack.push_back(j);
          }
        }
    }
  }
  return lab;
}

/// Compares a translated image with the ground-truth pair. `target` selects
/// which pair image is the reference (2 = image_b for 1->2 translation).
inline StructureMetrics structure_metrics(const Image& translated, const PhantomPair& gt, Thresholds th,
                                          int target = 2) {
  require(gt.has_masks(), "structure_metrics: ground-truth masks missing");
  require(target == 1 || target == 2, "structure_metrics: target must be 1 or 2");
  const Image& ref = target == 2 ? gt.image_b : gt.image_a;
  const Image& src = target == 2 ? gt.image_a : gt.image_b;
  require(translated.height == ref.height && translated.width == ref.width,
          "structure_metrics: translated image size differs from ground truth");
  const int h = translated.height, w = translated.width;
  const std::size_t n = translated.size();
  std::vector<bool> pred(n), truth(n);
  for (std::size_t i = 0; i < n; ++i) {
    pred[i] = translated.pixels[i] >= th.detection;
    truth[i] = gt.plaque_mask.pixels[i] > 0.5f;
  }
  StructureMetrics m;
  const auto pred_lab = connected_components(pred, h, w, m.predicted);
  const auto gt_lab = connected_components(truth, h, w, m.gt_plaques);
  std::vector<char> pred_hit(static_cast<std::size_t>(m.predicted) + 1, 0), gt_hit(static_cast<std::size_t>(m.gt_plaques) + 1, 0);
  std::vector<float> gt_peak(static_cast<std::size_t>(m.gt_plaques) + 1, -1.0f);
  double mae = 0;
  long plaque_pixels = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pred[i] && truth[i]) {
      pred_hit[static_cast<std::size_t>(pred_lab[i])] = 1;
      gt_hit[static_cast<std::size_t>(gt_lab[i])] = 1;
    }
    m.pixel_tp += pred[i] && truth[i];
    m.pixel_fp += pred[i] && !truth[i];
    m.pixel_fn += !pred[i] && truth[i];
    if (truth[i]) {
      auto& peak = gt_peak[static_cast<std::size_t>(gt_lab[i])];
      peak = std::max(peak, translated.pixels[i]);
      mae += std::abs(static_cast<double>(translated.pixels[i]) - ref.pixels[i]);
      ++plaque_pixels;
    }
  }
  for (int c = 1; c <= m.predicted; ++c) m.matched_predicted += pred_hit[static_cast<std::size_t>(c)];
  for (int c = 1; c <= m.gt_plaques; ++c) {
    m.matched_gt += gt_hit[static_cast<std::size_t>(c)];
    m.retained += gt_peak[static_cast<std::size_t>(c)] >= th.detection;
  }
  m.precision = ratio_or_zero(m.matched_predicted, m.predicted);
  m.recall = ratio_or_zero(m.matched_gt, m.gt_plaques);
  m.dice = ratio_or_zero(2.0 * m.pixel_tp, 2.0 * m.pixel_tp + m.pixel_fp + m.pixel_fn);
  m.plaque_retention = ratio_or_zero(m.retained, m.gt_plaques);
  m.plaque_mae = ratio_or_zero(mae, static_cast<double>(plaque_pixels));

  long otp = 0, ofp = 0, ofn = 0;
  const auto organs = gt.organ_mask();
  for (std::size_t i = 0; i < n; ++i) {
    if (truth[i]) continue;
    const bool p = translated.pixels[i] >= th.organ && translated.pixels[i] < th.detection;
    otp += p && organs[i];
    ofp += p && !organs[i];
    ofn += !p && organs[i];
  }
  m.organ_dice = ratio_or_zero(2.0 * otp, 2.0 * otp + ofp + ofn);

  const auto vessel = gt.vessel_mask();
  double s = 0, t = 0, r = 0;
  long nv = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (vessel[i]) {
      s += src.pixels[i];
      t += translated.pixels[i];
      r += ref.pixels[i];
      ++nv;
    }
  if (nv > 0) {
    m.vessel_mean_source = s / nv;
    m.vessel_mean_translated = t / nv;
    m.vessel_mean_target = r / nv;
    m.vessel_shift_fraction =
        ratio_or_zero(m.vessel_mean_translated - m.vessel_mean_source, m.vessel_mean_target - m.vessel_mean_source);
  }
  return m;
}

inline nlohmann::ordered_json to_json(const StructureMetrics& m) {
  return {{"precision", m.precision},
          {"recall", m.recall},
          {"dice", m.dice},
          {"plaque_retention", m.plaque_retention},
          {"plaque_mae", m.plaque_mae},
          {"organ_dice", m.organ_dice},
          {"vessel_shift_fraction", m.vessel_shift_fraction},
          {"vessel_mean_source", m.vessel_mean_source},
          {"vessel_mean_translated", m.vessel_mean_translated},
          {"vessel_mean_target", m.vessel_mean_target},
          {"gt_plaques", m.gt_plaques},
          {"predicted", m.predicted},
          {"matched_predicted", m.matched_predicted},
          {"matched_gt", m.matched_gt},
          {"retained", m.retained},
          {"pixel_tp", m.pixel_tp},
          {"pixel_fp", m.pixel_fp},
          {"pixel_fn", m.pixel_fn}};
}

struct MeanStd {
  double mean = 0, std = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) return {};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

struct EvalReport {
  Direction direction = Direction::AtoB;
  std::vector<std::uint64_t> seeds;
  std::vector<StructureMetrics> per_image;

  MeanStd aggregate(double StructureMetrics::*field) const {
    std::vector<double> v;
    for (const auto& m : per_image) v.push_back(m.*field);
    return mean_std(v);
  }
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["direction"] = to_string(r.direction);
  j["images"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.per_image.size(); ++i) {
    auto row = to_json(r.per_image[i]);
    row["seed"] = r.seeds[i];
    j["images"].push_back(row);
  }
  nlohmann::ordered_json agg;
  const std::pair<const char*, double StructureMetrics::*> fields[] = {
      {"precision", &StructureMetrics::precision},
      {"recall", &StructureMetrics::recall},
      {"dice", &StructureMetrics::dice},
      {"plaque_retention", &StructureMetrics::plaque_retention},
      {"plaque_mae", &StructureMetrics::plaque_mae},
      {"organ_dice", &StructureMetrics::organ_dice},
      {"vessel_shift_fraction", &StructureMetrics::vessel_shift_fraction}};
  for (const auto& [name, f] : fields) {
    const auto ms = r.aggregate(f);
    agg[name] = {{"mean", ms.mean}, {"std", ms.std}};
  }
  agg["count"] = r.per_image.size();
  j["aggregate"] = agg;
  return j;
}

/// Translates every pair's source image and scores it against the target.
template <class T>
EvalReport evaluate_pairs(const ModelBundle<T>& b, const std::vector<PhantomPair>& pairs, Direction dir,
                          Thresholds th, int stride = 0, int threads = 1) {
  EvalReport r;
  r.direction = dir;
  r.per_image.resize(pairs.size());
  r.seeds.resize(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const auto& src = dir == Direction::AtoB ? pairs[i].image_a : pairs[i].image_b;
    r.per_image[i] = structure_metrics(translate_image(b, src, dir, stride).output, pairs[i], th, target_domain(dir));
    r.seeds[i] = pairs[i].seed;
  });
  return r;
}

// ---------------------------------------------------------------------------
// Quality control

/// Mean squared 4-neighbour Laplacian over interior pixels.
inline double high_frequency_energy(const Image& img) {
  double acc = 0;
  long n = 0;
  for (int r = 1; r + 1 < img.height; ++r)
    for (int c = 1; c + 1 < img.width; ++c) {
      const double lap = 4.0 * img.at(r, c) - img.at(r - 1, c) - img.at(r + 1, c) - img.at(r, c - 1) - img.at(r, c + 1);
      acc += lap * lap;
      ++n;
    }
  return n ? acc / static_cast<double>(n) : 0.0;
}

/// score = mean target-domain realness * 1 / (1 + excess), where excess is
/// the high-frequency energy above the real-image reference, relative to it.
template <class T>
class QualityScorer {
 public:
  QualityScorer(const ModelBundle<T>& b, int domain, const std::vector<Image>& real_references)
      : bundle_(&b), domain_(domain) {
    require(domain == 1 || domain == 2, "QualityScorer: domain must be 1 or 2");
    require(!real_references.empty(), "QualityScorer: need at least one real reference image");
    double acc = 0;
    for (const auto& img : real_references) acc += high_frequency_energy(img);
    reference_hf_ = std::max(acc / static_cast<double>(real_references.size()), 1e-12);
  }

  double realness(const Image& img) const {
    const int p = bundle_->spec.patch_size;
    const auto grid = make_grid(img.height, img.width, p, p);
    const auto patches = extract(img, grid);
    double acc = 0;
    for (std::size_t start = 0; start < patches.size(); start += kInferenceChunk) {
      const std::size_t end = std::min(patches.size(), start + kInferenceChunk);
      const std::vector<Patch> chunk(patches.begin() + static_cast<std::ptrdiff_t>(start),
                                     patches.begin() + static_cast<std::ptrdiff_t>(end));
      const auto judged = discriminate(*bundle_, domain_, patch_batch<T>(chunk, p));
      for (T s : judged.values()) acc += static_cast<double>(s);
    }
    return acc / static_cast<double>(patches.size());
  }

  double excess_high_frequency(const Image& img) const {
    return std::max(0.0, high_frequency_energy(img) / reference_hf_ - 1.0);
  }

  double score(const Image& img) const { return realness(img) / (1.0 + excess_high_frequency(img)); }
  double reference_high_frequency() const { return reference_hf_; }

 private:
  const ModelBundle<T>* bundle_;
  int domain_;
  double reference_hf_ = 1;
};

struct FilterResult {
  std::vector<std::size_t> kept, removed;
  std::vector<double> scores;
};

template <class T>
FilterResult filter_synthetic(const std::vector<Image>& images, const QualityScorer<T>& scorer,
                              double score_threshold) {
  FilterResult r;
  for (std::size_t i = 0; i < images.size(); ++i) {
    r.scores.push_back(scorer.score(images[i]));
    (r.scores.back() >= score_threshold ? r.kept : r.removed).push_back(i);
  }
  return r;
}

/// Adds a +/- amplitude checkerboard over a square region (clamped to [0,1]).
inline Image inject_checkerboard(const Image& img, int row, int col, int size, float amplitude) {
  Image out = img;
  for (int r = row; r < std::min(img.height, row + size); ++r)
    for (int c = col; c < std::min(img.width, col + size); ++c)
      out.at(r, c) = std::clamp(out.at(r, c) + ((r + c) % 2 ? amplitude : -amplitude), 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Latent cluster export

struct ClusterRow {
  std::size_t image_id = 0;
  Anchor anchor;
  int component = 0;
  double entropy = 0;
  std::vector<double> z;
};

/// Samples n_patches random patches (image chosen uniformly), encodes them in
/// `domain` and records the most probable component with its mean.
template <class T>
std::vector<ClusterRow> latent_cluster_rows(const ModelBundle<T>& b, const std::vector<Image>& images, int domain,
                                            int n_patches, Rng& rng) {
  require(!images.empty(), "latent_cluster_dump: no images");
  require(n_patches >= 1, "latent_cluster_dump: n_patches must be >= 1");
  check_model(b);
  const int p = b.spec.patch_size, k = b.spec.num_components, d = b.spec.latent_dim;
  std::vector<ClusterRow> rows;
  std::vector<Patch> patches;
  for (int i = 0; i < n_patches; ++i) {
    ClusterRow row;
    row.image_id = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1));
    auto s = sample_random_patches(images[row.image_id], 1, p, rng);
    row.anchor = s[0].anchor;
    patches.push_back(std::move(s[0].patch));
    rows.push_back(std::move(row));
  }
  for (std::size_t start = 0; start < patches.size(); start += kInferenceChunk) {
    const std::size_t end = std::min(patches.size(), start + kInferenceChunk);
    const std::vector<Patch> chunk(patches.begin() + static_cast<std::ptrdiff_t>(start),
                                   patches.begin() + static_cast<std::ptrdiff_t>(end));
    const auto q = encode(b, domain, patch_batch<T>(chunk, p));
    const auto comp = argmax_components(q);
    const auto w = q.weights();
    const bool shared = q.mixture_logits.dim(0) == 1;
    const auto z = component_means(q, comp).values();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      auto& row = rows[start + i];
      row.component = comp[i];
      double h = 0;
      for (int c = 0; c < k; ++c) {
        const double pc = w[(shared ? 0 : i) * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)];
        if (pc > 0) h -= pc * std::log(pc);
      }
      row.entropy = h;
      row.z.assign(z.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(d)),
                   z.begin() + static_cast<std::ptrdiff_t>((i + 1) * static_cast<std::size_t>(d)));
    }
  }
  return rows;
}

inline void write_cluster_csv(const std::vector<ClusterRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image_id,row,col,component,entropy";
  const std::size_t d = rows.empty() ? 0 : rows.front().z.size();
  for (std::size_t j = 0; j < d; ++j) out << ",z" << j;
  out << "\n";
  char buf[32];
  for (const auto& r : rows) {
    out << r.image_id << "," << r.anchor.row << "," << r.anchor.col << "," << r.component << ",";
    std::snprintf(buf, sizeof buf, "%.9g", r.entropy);
    out << buf;
    for (double v : r.z) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for " + path.string());
}

template <class T>
std::vector<ClusterRow> latent_cluster_dump(const ModelBundle<T>& b, const std::vector<Image>& images, int domain,
                                            int n_patches, Rng& rng, const std::filesystem::path& out_path) {
  auto rows = latent_cluster_rows(b, images, domain, n_patches, rng);
  write_cluster_csv(rows, out_path);
  return rows;
}

}  // namespace mixlat
