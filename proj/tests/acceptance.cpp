// Acceptance runner. Prints one [PASS]/[FAIL] line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance                      all criteria
//   acceptance --criterion 7 -c 8   a subset
//   acceptance --work DIR           scratch directory for datasets and runs

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "mixlat/cli.hpp"
#include "mixlat/eval.hpp"
#include "mixlat/training.hpp"
#include "oracles.hpp"

using namespace mixlat;
namespace fs = std::filesystem;
using mixlat::testing::check_gradients;
using mixlat::testing::GradCheckResult;

namespace {

// Pinned tolerances and budgets.
constexpr int kKlInstances = 50;
constexpr int kKlSeeds = 20;
constexpr int kKlSamples = 256;
constexpr double kKlSeMultiple = 3.0;
constexpr double kKlSeconds = 10;

constexpr double kBoundSlack = 1e-6;
constexpr double kBoundSeconds = 30;

constexpr double kGradStep = 1e-4;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradAbsFloor = 1e-6;
constexpr std::size_t kGradMaxParams = 5000;
constexpr double kGradSeconds = 300;

constexpr int kPatchCases = 100;
constexpr double kPatchTol = 1e-6;
constexpr double kPatchSeconds = 10;

constexpr long kDeterminismSteps = 200;
constexpr double kDeterminismSeconds = 600;

constexpr long kAuditSteps = 100;

constexpr int kStructureSeeds = 3;
constexpr long kStructureSteps = 2000;
constexpr double kRetentionMargin = 0.05;
constexpr double kStructureSeconds = 90 * 60;
constexpr int kClusterPatches = 4000;
constexpr double kClusterRateFactor = 2.0;
constexpr int kClusterTopComponents = 2;

constexpr double kVesselShiftFloor = 0.5;

const std::vector<int> kSelectKGrid = {1, 8, 25};

constexpr int kQualityCases = 20;
constexpr int kQualityRequired = 18;
constexpr int kQualityArtifactSize = 16;
constexpr float kQualityArtifactAmplitude = 0.25f;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> details;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Context {
  fs::path work;
  fs::path config_path;
  int threads = 1;
  std::ostream* log = &std::cerr;
};

TrainConfig acceptance_config(const Context& ctx) { return load_config_file(ctx.config_path); }

/// Default phantom dataset (70+70 training images, 10 val, 20 test), built once per work dir.
const DatasetManifest& default_dataset(const Context& ctx) {
  static std::map<fs::path, DatasetManifest> cache;
  const auto root = ctx.work / "dataset";
  if (auto it = cache.find(root); it != cache.end()) return it->second;
  fs::remove_all(root);
  *ctx.log << "building default phantom dataset in " << root << "\n";
  return cache[root] = build_dataset(PhantomSpec{}, DatasetCounts{}, root, 1);
}

// ---------------------------------------------------------------------------
// 1. K=1 Monte Carlo KL against the closed form

double independent_gaussian_kl(const std::vector<double>& mq, const std::vector<double>& lq,
                               const std::vector<double>& mp, const std::vector<double>& lp) {
  double kl = 0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double vq = std::exp(lq[i]), vp = std::exp(lp[i]);
    kl += 0.5 * (std::log(vp / vq) + (vq + (mq[i] - mp[i]) * (mq[i] - mp[i])) / vp - 1);
  }
  return kl;
}

Outcome criterion_kl_correctness(const Context&) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(7001);
  std::uniform_real_distribution<double> mean(-2, 2), lv(-1, 1);
  int within = 0;
  double worst = 0, oracle_gap = 0;
  for (int i = 0; i < kKlInstances; ++i) {
    const int d = i % 2 ? 4 : 1;
    std::vector<double> mq(d), lq(d), mp(d), lp(d);
    for (int j = 0; j < d; ++j) {
      mq[j] = mean(g);
      lq[j] = lv(g);
      mp[j] = mean(g);
      lp[j] = lv(g);
    }
    const PosteriorParams<double> q{Var<double>::constant({1, 1, d}, mq), Var<double>::constant({1, d}, lq),
                                    Var<double>::constant({1, 1}, {0.0}), 1};
    const auto p = GmmParams<double>::make(1, d, {0.0}, mp, lp);
    const double closed = gaussian_kl_diag<double>(mq, lq, mp, lp);
    oracle_gap = std::max(oracle_gap, std::abs(closed - independent_gaussian_kl(mq, lq, mp, lp)));
    std::vector<double> draws;
    for (int s = 0; s < kKlSeeds; ++s) {
      Rng rng(static_cast<std::uint64_t>(1000 * i + s));
      const auto terms = kl_mc_terms(q, p, kKlSamples, rng).values();
      draws.insert(draws.end(), terms.begin(), terms.end());
    }
    const auto [m, se] = mixlat::testing::mean_se(draws);
    const double z = std::abs(m - closed) / se;
    worst = std::max(worst, z);
    within += z <= kKlSeMultiple;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = within == kKlInstances && secs < kKlSeconds && oracle_gap < 1e-12;
  o.summary = fmt("%d/%d instances within %.0f pooled SE (worst %.2f SE), %.1f s", within, kKlInstances,
                  kKlSeMultiple, worst, secs);
  o.details.push_back(fmt("closed form vs independent oracle: max gap %.2e", oracle_gap));
  return o;
}

// ---------------------------------------------------------------------------
// 2. Matched-component bound against quadrature

Outcome criterion_mixture_bound(const Context&) {
  const auto t0 = Clock::now();
  int ok = 0, n = 0;
  double tightest = 1e300;
  for (const auto& m : mixlat::testing::fixed_suite(kKlInstances)) {
    const int k = static_cast<int>(m.q_logits.size());
    const PosteriorParams<double> q{Var<double>::constant({1, k, 1}, m.q_means),
                                    Var<double>::constant({k, 1}, m.q_lv), Var<double>::constant({1, k}, m.q_logits),
                                    1};
    const auto p = GmmParams<double>::make(k, 1, m.p_logits, m.p_means, m.p_lv);
    const double bound = kl_matched_upper_bound(q, p).item();
    const double oracle = mixlat::testing::quadrature_kl(mixlat::testing::to_mixture(m.q_logits, m.q_means, m.q_lv),
                                                         mixlat::testing::to_mixture(m.p_logits, m.p_means, m.p_lv));
    ok += bound >= oracle - kBoundSlack;
    tightest = std::min(tightest, bound - oracle);
    ++n;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ok == n && secs < kBoundSeconds;
  o.summary = fmt("%d/%d instances satisfy bound >= quadrature - 1e-6 (min gap %.3g), %.1f s", ok, n, tightest, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient suite

Var<double> probe(const Var<double>& y, unsigned seed = 99) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> w(y.size());
  for (auto& x : w) x = u(g);
  return sum(y * Var<double>::constant(y.shape(), w));
}

Var<double> param(Shape s, unsigned seed, double scale = 1.0) { return mixlat::testing::random_param(std::move(s), seed, scale); }

Var<double> patches_param(int n, int p, unsigned seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> v(static_cast<std::size_t>(n) * p * p);
  for (auto& x : v) x = u(g);
  return Var<double>::parameter({n, 1, p, p}, std::move(v));
}

Var<double> patches_const(int n, int p, unsigned seed) { return detach(patches_param(n, p, seed)); }

NetSpec gradient_spec(Activation a) {
  NetSpec s;
  s.patch_size = 8;
  s.latent_dim = 3;
  s.num_components = 2;
  s.channel_widths = {2, 3};
  s.activation = a;
  return s;
}

std::vector<Var<double>> named_params(const ModelBundle<double>& b, const std::string& prefix) {
  std::vector<Var<double>> out;
  for (const auto& p : b.parameters())
    if (p.name.rfind(prefix, 0) == 0 && p.name.find("global_logits") == std::string::npos) out.push_back(p.var);
  return out;
}

std::vector<Var<double>> generator_side(const ModelBundle<double>& b) {
  std::vector<Var<double>> out;
  for (const auto& p : b.parameters())
    if (p.name.rfind("discriminator", 0) != 0 && p.name.find("global_logits") == std::string::npos)
      out.push_back(p.var);
  return out;
}

std::size_t count(const std::vector<Var<double>>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.size();
  return n;
}

struct GradCase {
  std::string name;
  std::function<Var<double>()> loss;
  std::vector<Var<double>> params;
};

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add = [&](std::string name, std::function<Var<double>()> f, std::vector<Var<double>> ps) {
    cases.push_back({std::move(name), std::move(f), std::move(ps)});
  };

  // Autodiff ops.
  {
    auto a = param({3, 4}, 1), b = param({3, 4}, 2), c = param({4}, 3);
    add("add/sub/mul/neg", [=] { return probe(a * b - c + (-a) * c); }, {a, b, c});
    add("scale/add_scalar/exp/log/square",
        [=] { return probe(exp(scale(a, 0.5))) + probe(log(add_scalar(square(b), 1.0)), 5); }, {a, b});
    add("abs", [=] { return probe(abs(add_scalar(a, 0.05))); }, {a});
    add("sigmoid/softplus/tanh", [=] { return probe(sigmoid(a)) + probe(softplus(b), 3) + probe(tanh(a), 4); }, {a, b});
    add("leaky_relu/elu", [=] { return probe(leaky_relu(a, 0.2)) + probe(elu(b), 6); }, {a, b});
    add("clamp01/clamp_min", [=] { return probe(clamp01(scale(a, 0.4))) + probe(clamp_min(b, -0.3), 7); }, {a, b});
    add("reshape/tile_rows", [=] { return probe(reshape(a, {2, 6})) + probe(tile_rows(a, 3), 8); }, {a});
    add("sum/mean/sum_last", [=] { return sum(a * b) + scale(mean(square(a)), 2.0) + probe(sum_last(b), 9); },
        {a, b});
    add("logsumexp/log_softmax/softmax",
        [=] { return probe(logsumexp_last(a)) + probe(log_softmax_last(b), 10) + probe(softmax_last(a), 11); },
        {a, b});
    auto x = param({3, 5}, 12), w = param({4, 5}, 13), bias = param({4}, 14);
    add("linear", [=] { return probe(linear(x, w, bias)); }, {x, w, bias});
    auto xi = param({2, 2, 6, 6}, 15), wc = param({3, 2, 4, 4}, 16), bc = param({3}, 17);
    add("conv2d", [=] { return probe(conv2d(xi, wc, bc, 2, 1)); }, {xi, wc, bc});
    auto xt = param({2, 3, 3, 3}, 18), wt = param({3, 2, 4, 4}, 19), bt = param({2}, 20);
    add("conv_transpose2d", [=] { return probe(conv_transpose2d(xt, wt, bt, 2, 1)); }, {xt, wt, bt});
    auto mw = param({3, 2}, 21), mc = param({3, 2, 4}, 22);
    add("mix", [=] { return probe(mix(softmax_last(mw), mc)); }, {mw, mc});
    auto z = param({3, 2}, 23), mu = param({2, 2}, 24), lv = param({2, 2}, 25, 0.5), mur = param({3, 2, 2}, 26);
    add("gaussian_log_pdf", [=] { return probe(gaussian_log_pdf(z, mu, lv)) + probe(gaussian_log_pdf(z, mur, lv), 3); },
        {z, mu, lv, mur});
    auto mq = param({3, 2, 4}, 27), lq = param({2, 4}, 28, 0.5), mp = param({2, 4}, 29), lp = param({2, 4}, 30, 0.5);
    add("gaussian_kl", [=] { return probe(gaussian_kl(mq, lq, mp, lp)); }, {mq, lq, mp, lp});
  }

  // Mixture latent.
  {
    const int k = 3, d = 2, n = 4;
    auto pl = param({k}, 40), pm = param({k, d}, 41), pv = param({k, d}, 42, 0.3);
    const GmmParams<double> prior{pl, pm, pv};
    auto qm = param({n, k, d}, 43), qv = param({k, d}, 44, 0.3), ql = param({n, k}, 45);
    const PosteriorParams<double> q{qm, qv, ql, 1};
    auto z = param({n, d}, 46);
    add("mixture_log_density (prior)", [=] { return probe(mixture_log_density(z, prior)); }, {z, pl, pm, pv});
    add("mixture_log_density (posterior)", [=] { return probe(mixture_log_density(z, q)); }, {z, qm, qv, ql});
    add("sample_posterior (relaxed)",
        [=] {
          Rng rng(47);
          const auto s = sample_posterior(q, 0.7, SampleMode::Relaxed, rng);
          return probe(s.z) + probe(s.soft_assignment, 3);
        },
        {qm, qv, ql});
    add("kl_mc_terms",
        [=] {
          Rng rng(48);
          return probe(kl_mc_terms(q, prior, 3, rng));
        },
        {qm, qv, ql, pl, pm, pv});
    add("kl_matched_bound_rows", [=] { return probe(kl_matched_bound_rows(q, prior)); }, {qm, qv, ql, pl, pm, pv});
  }

  // Networks.
  for (Activation act : {Activation::LeakyRelu, Activation::Elu, Activation::Tanh}) {
    const auto b = std::make_shared<ModelBundle<double>>(init_params<double>(gradient_spec(act), 50));
    const std::string tag = " [" + to_string(act) + "]";
    auto x = patches_const(2, 8, 51);
    auto z = param({2, 3}, 52);
    auto xin = patches_param(2, 8, 53);
    for (int dom : {1, 2}) {
      const std::string ds = std::to_string(dom);
      add("encode " + ds + tag,
          [=] {
            const auto q = encode(*b, dom, x);
            return probe(q.comp_means) + probe(q.mixture_logits, 3) + probe(q.comp_log_vars, 4);
          },
          named_params(*b, "encoder_" + ds));
      auto gp = named_params(*b, "generator_" + ds);
      gp.push_back(z);
      add("generate " + ds + tag, [=] { return probe(generate(*b, dom, z)); }, gp);
      auto dp = named_params(*b, "discriminator_" + ds);
      dp.push_back(xin);
      add("discriminate " + ds + tag, [=] { return probe(discriminate(*b, dom, xin)); }, dp);
    }
  }

  // Loss terms.
  {
    const auto b = std::make_shared<ModelBundle<double>>(init_params<double>(gradient_spec(Activation::Elu), 60));
    auto x1 = patches_const(2, 8, 61), x2 = patches_const(2, 8, 62);
    auto xa = patches_param(2, 8, 63), xb = patches_param(2, 8, 64);
    const LossWeights w;
    add("reconstruction_nll", [=] { return reconstruction_nll(xa, xb); }, {xa, xb});
    for (auto kl : {KlEstimator::MonteCarlo, KlEstimator::Matched}) {
      const LossContext lc{0.8, kl, SampleMode::Relaxed};
      const std::string tag = " [" + to_string(kl) + "]";
      add("vae_loss" + tag,
          [=] {
            Rng rng(65);
            return vae_loss(*b, 1, x1, w, rng, lc);
          },
          generator_side(*b));
      add("cycle_loss" + tag,
          [=] {
            Rng rng(66);
            return cycle_loss(*b, 2, x2, w, rng, lc);
          },
          generator_side(*b));
    }
    add("gan_loss_generator",
        [=] {
          Rng rng(67);
          return gan_loss_generator(*b, 1, 2, x1, w, rng);
        },
        generator_side(*b));
    // the fake batch enters D's loss detached, so only D's parameters are checked
    auto fake = patches_const(2, 8, 68);
    add("gan_loss_discriminator", [=] { return gan_loss_discriminator(*b, 2, x2, fake); },
        named_params(*b, "discriminator_2"));
    add("total objective (generator side)",
        [=] {
          Rng rng(69);
          return total_objective(*b, x1, x2, w, rng).total_gen;
        },
        generator_side(*b));
    add("total objective (discriminator side)",
        [=] {
          Rng rng(70);
          return total_objective(*b, x1, x2, w, rng).total_disc;
        },
        named_params(*b, "discriminator"));
  }
  return cases;
}

Outcome criterion_gradients(const Context&) {
  const auto t0 = Clock::now();
  Outcome o;
  int passed = 0, total = 0;
  double worst = 0;
  std::size_t largest = 0;
  for (auto& c : gradient_cases()) {
    const std::size_t n = count(c.params);
    largest = std::max(largest, n);
    const auto r = check_gradients(c.loss, c.params, {}, kGradStep, -1, kGradAbsFloor);
    const bool ok = r.worst_rel_error < kGradRelTol && n <= kGradMaxParams;
    passed += ok;
    ++total;
    worst = std::max(worst, r.worst_rel_error);
    o.details.push_back(fmt("%s %-44s params %5zu  checked %5d  worst rel %.2e %s", ok ? "ok  " : "FAIL", c.name.c_str(),
                            n, r.checked, r.worst_rel_error, ok ? "" : r.worst_where.c_str()));
  }
  const double secs = seconds_since(t0);
  o.pass = passed == total && secs < kGradSeconds;
  o.summary = fmt("%d/%d gradient cases within rel %.0e (worst %.2e, largest instance %zu params), %.1f s", passed,
                  total, kGradRelTol, worst, largest, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Patch round trip

Outcome criterion_patch_round_trip(const Context&) {
  const auto t0 = Clock::now();
  Rng rng(4004);
  const int sizes[] = {4, 8, 16, 32};
  int ok = 0;
  double worst = 0;
  for (int i = 0; i < kPatchCases; ++i) {
    const int p = sizes[rng.uniform_int(0, 3)];
    const int h = static_cast<int>(rng.uniform_int(p, 96)), w = static_cast<int>(rng.uniform_int(p, 96));
    const int stride = static_cast<int>(rng.uniform_int(1, p));
    Image img(h, w);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    const auto grid = make_grid(h, w, p, stride);
    const auto back = stitch(extract(img, grid), grid);
    double err = 0;
    if (back.height != h || back.width != w) err = 1e300;
    else
      for (std::size_t j = 0; j < img.size(); ++j) err = std::max(err, std::abs(double(back.pixels[j]) - img.pixels[j]));
    worst = std::max(worst, err);
    ok += err <= kPatchTol;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ok == kPatchCases && secs < kPatchSeconds;
  o.summary = fmt("%d/%d random size/stride cases reassemble within %.0e (worst %.2e), %.2f s", ok, kPatchCases,
                  kPatchTol, worst, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 5. Determinism of full train runs

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion_determinism(const Context& ctx) {
  const auto t0 = Clock::now();
  const auto& data = default_dataset(ctx);
  const auto runs = ctx.work / "determinism";
  fs::remove_all(runs);
  for (const char* name : {"a", "b"}) {
    *ctx.log << "determinism: train run " << name << " (" << kDeterminismSteps << " steps, default config)\n";
    std::ostringstream out, err;
    const int code = cli::run({"--quiet", "train", "--data", data.root.string(), "--out", (runs / name).string(),
                               "--steps", std::to_string(kDeterminismSteps), "--checkpoint-interval", "100"},
                              out, err);
    if (code != 0) return {false, "train exited " + std::to_string(code), {err.str()}};
  }
  Outcome o;
  int compared = 0, identical = 0;
  for (const auto& e : fs::directory_iterator(runs / "a")) {
    const auto name = e.path().filename();
    if (name == cli::kRunManifestFile) continue;
    ++compared;
    const bool same = fs::exists(runs / "b" / name) && file_bytes(e.path()) == file_bytes(runs / "b" / name);
    identical += same;
    o.details.push_back(fmt("%s %s", same ? "identical" : "DIFFERS  ", name.string().c_str()));
  }
  const double secs = seconds_since(t0);
  o.pass = compared >= 4 && identical == compared && secs < kDeterminismSeconds;
  o.summary = fmt("%d/%d run artifacts byte-identical (loss log and checkpoints), %.0f s", identical, compared, secs);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Min-max separation audit

std::vector<Image> phantom_images(int n, int size, std::uint64_t seed, bool domain_b) {
  PhantomSpec spec;
  spec.image_size = size;
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) {
    auto pair = generate_phantom_pair(spec, detail::splitmix64(seed + static_cast<std::uint64_t>(i)));
    out.push_back(domain_b ? pair.image_b : pair.image_a);
  }
  return out;
}

Outcome criterion_min_max_separation(const Context&) {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.patches_per_image = 2;
  cfg.steps = kAuditSteps;
  auto state = init_state<float>(cfg);
  const auto a = phantom_images(4, 64, 600, false), b = phantom_images(4, 64, 700, true);
  int d_ok = 0, g_ok = 0;
  for (long s = 0; s < kAuditSteps; ++s) {
    const auto ba = sample_domain_batch<float>(a, cfg, state.rng);
    const auto bb = sample_domain_batch<float>(b, cfg, state.rng);
    auto gen = parameter_hash(state.bundle, Side::Generator);
    auto disc = parameter_hash(state.bundle, Side::Discriminator);
    train_step(state, ba, bb, [&](Phase ph) {
      const auto g2 = parameter_hash(state.bundle, Side::Generator);
      const auto d2 = parameter_hash(state.bundle, Side::Discriminator);
      if (ph == Phase::Discriminator) d_ok += g2 == gen && d2 != disc;
      else g_ok += d2 == disc && g2 != gen;
      gen = g2;
      disc = d2;
    });
  }
  Outcome o;
  o.pass = d_ok == kAuditSteps && g_ok == kAuditSteps;
  o.summary = fmt("D phase touched only D in %d/%ld steps; G phase touched only G in %d/%ld steps", d_ok,
                  kAuditSteps, g_ok, kAuditSteps);
  return o;
}

// ---------------------------------------------------------------------------
// 7 and 8. Structure preservation, K=8 vs K=1

struct StructureRun {
  int k = 0;
  std::uint64_t seed = 0;
  EvalReport report;
  TrainState<float> state;
};

struct StructureStudy {
  std::vector<StructureRun> runs;
  double seconds = 0;
  std::string error;
};

const StructureStudy& structure_study(const Context& ctx) {
  static std::optional<StructureStudy> cached;
  if (cached) return *cached;
  cached.emplace();
  auto& study = *cached;
  const auto t0 = Clock::now();
  try {
    const auto& data = default_dataset(ctx);
    const auto test = load_eval_pairs(data, Role::Test);
    const auto th = Thresholds::from_spec(data.spec);
    for (int seed = 1; seed <= kStructureSeeds; ++seed)
      for (int k : {1, 8}) {
        auto cfg = acceptance_config(ctx);
        cfg.num_components = k;
        cfg.seed = static_cast<std::uint64_t>(seed);
        cfg.steps = kStructureSteps;
        cfg.checkpoint_interval = kStructureSteps;
        const auto run_t0 = Clock::now();
        auto res = train(data, cfg, ctx.work / "structure" / fmt("k%d_s%d", k, seed));
        auto report = evaluate_pairs(res.state.bundle, test, Direction::AtoB, th, 0, ctx.threads);
        *ctx.log << fmt("structure: K=%d seed=%d retention %.3f dice %.3f (%.0f s)\n", k, seed,
                        report.aggregate(&StructureMetrics::plaque_retention).mean,
                        report.aggregate(&StructureMetrics::dice).mean, seconds_since(run_t0));
        study.runs.push_back({k, cfg.seed, std::move(report), std::move(res.state)});
      }
  } catch (const std::exception& e) {
    study.error = e.what();
  }
  study.seconds = seconds_since(t0);
  return study;
}

double mean_over(const StructureStudy& s, int k, double StructureMetrics::*f) {
  double acc = 0;
  int n = 0;
  for (const auto& r : s.runs)
    if (r.k == k) {
      acc += r.report.aggregate(f).mean;
      ++n;
    }
  return n ? acc / n : 0.0;
}

Outcome criterion_structure(const Context& ctx) {
  const auto& s = structure_study(ctx);
  if (!s.error.empty()) return {false, "training failed: " + s.error, {}};
  Outcome o;
  for (const auto& r : s.runs)
    o.details.push_back(fmt("K=%d seed=%llu  retention %.3f  dice %.3f  precision %.3f  recall %.3f  organ_dice %.3f",
                            r.k, static_cast<unsigned long long>(r.seed),
                            r.report.aggregate(&StructureMetrics::plaque_retention).mean,
                            r.report.aggregate(&StructureMetrics::dice).mean,
                            r.report.aggregate(&StructureMetrics::precision).mean,
                            r.report.aggregate(&StructureMetrics::recall).mean,
                            r.report.aggregate(&StructureMetrics::organ_dice).mean));
  const double ret1 = mean_over(s, 1, &StructureMetrics::plaque_retention);
  const double ret8 = mean_over(s, 8, &StructureMetrics::plaque_retention);
  const double dice1 = mean_over(s, 1, &StructureMetrics::dice);
  const double dice8 = mean_over(s, 8, &StructureMetrics::dice);
  o.pass = ret8 - ret1 >= kRetentionMargin && dice8 > dice1 && s.seconds <= kStructureSeconds;
  o.summary = fmt("retention K=8 %.3f vs K=1 %.3f (margin %.3f, need >= %.2f); dice K=8 %.3f vs K=1 %.3f; %.0f s",
                  ret8, ret1, ret8 - ret1, kRetentionMargin, dice8, dice1, s.seconds);
  return o;
}

/// Plaque-patch concentration in the latent clusters of the K=8 models.
Outcome criterion_cluster_concentration(const Context& ctx) {
  const auto& s = structure_study(ctx);
  if (!s.error.empty()) return {false, "training failed: " + s.error, {}};
  const auto& data = default_dataset(ctx);
  const auto test = load_eval_pairs(data, Role::Test);
  std::vector<Image> images;
  for (const auto& p : test) images.push_back(p.image_a);
  Outcome o;
  int ok = 0, n = 0;
  for (const auto& r : s.runs) {
    if (r.k != 8) continue;
    ++n;
    Rng rng(8080 + r.seed);
    const auto rows = latent_cluster_rows(r.state.bundle, images, 1, kClusterPatches, rng);
    const int p = r.state.bundle.spec.patch_size;
    std::vector<int> hits(8, 0);
    int plaque_patches = 0;
    for (const auto& row : rows) {
      const auto& mask = test[row.image_id].plaque_mask;
      bool any = false;
      for (int y = 0; y < p && !any; ++y)
        for (int x = 0; x < p && !any; ++x) any = mask.at(row.anchor.row + y, row.anchor.col + x) > 0.5f;
      if (!any) continue;
      ++plaque_patches;
      ++hits[static_cast<std::size_t>(row.component)];
    }
    std::sort(hits.rbegin(), hits.rend());
    const int top = hits[0] + hits[1];
    const double share = plaque_patches ? double(top) / plaque_patches : 0.0;
    const double floor = kClusterRateFactor * kClusterTopComponents / 8.0;
    const bool pass = plaque_patches > 0 && share >= floor;
    ok += pass;
    o.details.push_back(fmt("seed %llu: %d plaque patches of %d, top-%d components hold %.2f (need >= %.2f)",
                            static_cast<unsigned long long>(r.seed), plaque_patches, kClusterPatches,
                            kClusterTopComponents, share, floor));
  }
  o.pass = n > 0 && ok == n;
  o.summary = fmt("plaque patches concentrate in <= %d components in %d/%d K=8 models", kClusterTopComponents, ok, n);
  return o;
}

Outcome criterion_vessel_shift(const Context& ctx) {
  const auto& s = structure_study(ctx);
  if (!s.error.empty()) return {false, "training failed: " + s.error, {}};
  Outcome o;
  std::vector<double> all;
  for (const auto& r : s.runs) {
    if (r.k != 8) continue;
    const auto ms = r.report.aggregate(&StructureMetrics::vessel_shift_fraction);
    for (const auto& m : r.report.per_image) all.push_back(m.vessel_shift_fraction);
    o.details.push_back(fmt("K=8 seed=%llu vessel shift fraction %.3f +- %.3f",
                            static_cast<unsigned long long>(r.seed), ms.mean, ms.std));
  }
  const auto ms = mean_std(all);
  o.pass = !all.empty() && ms.mean >= kVesselShiftFloor;
  o.summary = fmt("1->2 moves vessel mean %.3f of the way to the domain-2 truth (need >= %.2f, %zu held-out pairs)",
                  ms.mean, kVesselShiftFloor, all.size());
  return o;
}

// ---------------------------------------------------------------------------
// 9. K selection

Outcome criterion_select_k(const Context& ctx) {
  const auto t0 = Clock::now();
  const auto& data = default_dataset(ctx);
  SelectKOptions opts;
  opts.thresholds = Thresholds::from_spec(data.spec);
  opts.threads = ctx.threads;
  opts.on_row = [&](const SelectKRow& r) { *ctx.log << fmt("select_k: K=%d dice %.3f\n", r.k, r.dice); };
  SelectKResult res;
  try {
    res = select_k(data, acceptance_config(ctx), kSelectKGrid, opts);
  } catch (const std::exception& e) {
    return {false, std::string("select_k failed: ") + e.what(), {}};
  }
  Outcome o;
  std::istringstream table(format_table(res));
  for (std::string line; std::getline(table, line);) o.details.push_back(line);
  bool rows_ok = res.table.size() == kSelectKGrid.size();
  bool dice_monotone = true;
  for (std::size_t i = 0; rows_ok && i < res.table.size(); ++i) {
    const auto& r = res.table[i];
    rows_ok = r.k == kSelectKGrid[i];
    for (double v : {r.dice, r.plaque_retention, r.precision, r.recall, r.organ_dice})
      rows_ok = rows_ok && std::isfinite(v) && v >= 0 && v <= 1;
    if (i > 0) dice_monotone = dice_monotone && r.dice >= res.table[i - 1].dice;
  }
  const bool best_ok = rows_ok && res.best_k == pick_best_k(res.table);
  o.pass = rows_ok && best_ok;
  o.summary = fmt("%zu rows in ascending K, metrics finite in [0,1]: %s; best K = %d; dice %s in K; %.0f s",
                  res.table.size(), rows_ok ? "yes" : "no", res.best_k, dice_monotone ? "monotone" : "not monotone",
                  seconds_since(t0));
  return o;
}

// ---------------------------------------------------------------------------
// 10. Quality filter ordering

Outcome criterion_quality_filter(const Context&) {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.patches_per_image = 4;
  cfg.steps = 100;
  auto state = init_state<float>(cfg);
  const auto a = phantom_images(8, 64, 1000, false), b = phantom_images(8, 64, 1100, true);
  run_steps(state, a, b, cfg.steps);
  const QualityScorer<float> scorer(state.bundle, 2, b);
  const auto sources = phantom_images(kQualityCases, 64, 1200, false);
  Rng rng(1300);
  int ordered = 0;
  double worst = 1e300;
  for (const auto& src : sources) {
    const auto clean = translate_image(state.bundle, src, Direction::AtoB).output;
    const int r = static_cast<int>(rng.uniform_int(0, clean.height - kQualityArtifactSize));
    const int c = static_cast<int>(rng.uniform_int(0, clean.width - kQualityArtifactSize));
    const auto dirty = inject_checkerboard(clean, r, c, kQualityArtifactSize, kQualityArtifactAmplitude);
    const double sc = scorer.score(clean), sd = scorer.score(dirty);
    ordered += sd < sc;
    worst = std::min(worst, sc - sd);
  }
  Outcome o;
  o.pass = ordered >= kQualityRequired;
  o.summary = fmt("artifact scored strictly below clean in %d/%d cases (need >= %d; smallest gap %.3g)", ordered,
                  kQualityCases, kQualityRequired, worst);
  return o;
}

struct Criterion {
  int id;
  const char* title;
  Outcome (*run)(const Context&);
};

const Criterion kCriteria[] = {
    {1, "K=1 Monte Carlo KL matches the closed form", criterion_kl_correctness},
    {2, "matched-component bound dominates the mixture KL", criterion_mixture_bound},
    {3, "finite-difference gradient suite", criterion_gradients},
    {4, "patch extract/stitch round trip", criterion_patch_round_trip},
    {5, "determinism of full train runs", criterion_determinism},
    {6, "min-max separation", criterion_min_max_separation},
    {7, "fine-structure preservation, K=8 vs K=1", criterion_structure},
    {7, "plaque cluster concentration (K=8)", criterion_cluster_concentration},
    {8, "translation direction sanity", criterion_vessel_shift},
    {9, "select_k over {1, 8, 25}", criterion_select_k},
    {10, "quality filter ordering", criterion_quality_filter},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> selected;
  std::string work, config = std::string(MIXLAT_SOURCE_DIR) + "/configs/acceptance.cfg";
  app.add_option("-c,--criterion", selected, "criterion number (repeatable; default all)")->check(CLI::Range(1, 10));
  app.add_option("--work", work, "scratch directory");
  app.add_option("--config", config, "training config for criteria 7-9")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  std::set<int> want(selected.begin(), selected.end());
  if (want.empty())
    for (int i = 1; i <= 10; ++i) want.insert(i);

  Context ctx;
  ctx.config_path = config;
  ctx.threads = cli::default_threads();
  if (work.empty()) {
    std::string tag;
    for (int i : want) tag += (tag.empty() ? "" : "_") + std::to_string(i);
    work = (fs::temp_directory_path() / ("mixlat_acceptance_" + tag)).string();
  }
  ctx.work = work;
  fs::create_directories(ctx.work);

  int failures = 0;
  for (const auto& c : kCriteria) {
    if (!want.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what(), {}};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << c.id << " (" << c.title << "): " << o.summary
              << "\n";
    for (const auto& d : o.details) std::cout << "       " << d << "\n";
    std::cout.flush();
  }
  return failures ? 1 : 0;
}
