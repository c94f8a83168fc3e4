#pragma once

// Objective terms of the joint min-max problem: per-domain VAE losses,
// translation GAN losses, cycle-consistency losses and their composition.

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "mixlat/autodiff.hpp"
#include "mixlat/gmm_latent.hpp"
#include "mixlat/networks.hpp"
#include "mixlat/rng.hpp"

namespace mixlat {

struct LossWeights {
  double lambda0 = 1.0;   // GAN
  double lambda1 = 0.1;   // VAE KL
  double lambda2 = 10.0;  // VAE reconstruction
  double lambda3 = 0.1;   // cycle KL of the source encoding
  double lambda4 = 10.0;  // cycle KL of the translated encoding and cycle reconstruction

  void validate() const {
    const double ls[] = {lambda0, lambda1, lambda2, lambda3, lambda4};
    for (int i = 0; i < 5; ++i)
      if (!std::isfinite(ls[i]) || ls[i] < 0)
        throw ConfigError("lambda" + std::to_string(i) + " must be finite and >= 0");
  }
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double vae_1 = 0, vae_2 = 0, gan_1 = 0, gan_2 = 0, cc_1 = 0, cc_2 = 0, disc_1 = 0, disc_2 = 0;
  double total_gen = 0, total_disc = 0;

  /// Name of the first non-finite field, or empty.
  std::string first_non_finite() const {
    const std::pair<const char*, double> fields[] = {{"vae_1", vae_1},   {"vae_2", vae_2},        {"gan_1", gan_1},
                                                     {"gan_2", gan_2},   {"cc_1", cc_1},          {"cc_2", cc_2},
                                                     {"disc_1", disc_1}, {"disc_2", disc_2},      {"total_gen", total_gen},
                                                     {"total_disc", total_disc}};
    for (const auto& [n, v] : fields)
      if (!std::isfinite(v)) return n;
    return {};
  }
};

inline nlohmann::ordered_json to_json(const LossReport& r, long step) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["vae_1"] = r.vae_1;
  j["vae_2"] = r.vae_2;
  j["gan_1"] = r.gan_1;
  j["gan_2"] = r.gan_2;
  j["cc_1"] = r.cc_1;
  j["cc_2"] = r.cc_2;
  j["disc_1"] = r.disc_1;
  j["disc_2"] = r.disc_2;
  j["total_gen"] = r.total_gen;
  j["total_disc"] = r.total_disc;
  return j;
}

enum class KlEstimator { MonteCarlo, Matched };

inline std::string to_string(KlEstimator k) { return k == KlEstimator::Matched ? "matched" : "mc"; }
inline KlEstimator parse_kl_estimator(const std::string& s) {
  if (s == "mc") return KlEstimator::MonteCarlo;
  if (s == "matched") return KlEstimator::Matched;
  throw ConfigError("unknown kl_estimator '" + s + "' (expected mc or matched)");
}

/// Per-evaluation settings that are not loss weights.
struct LossContext {
  double temperature = 1.0;
  KlEstimator kl = KlEstimator::MonteCarlo;
  SampleMode mode = SampleMode::Relaxed;
};

/// Sum of absolute errors per patch (Laplace NLL with unit scale, constant
/// dropped), averaged over the batch.
template <class T>
Var<T> reconstruction_nll(const Var<T>& x, const Var<T>& x_hat) {
  require(x.shape() == x_hat.shape(),
          "reconstruction_nll: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()));
  const int n = x.rank() == 0 ? 1 : (x.rank() == 4 ? x.dim(0) : 1);
  return scale(sum(abs(x - x_hat)), T(1) / static_cast<T>(n));
}

/// Per-row KL(q || p) under the configured estimator, [N].
template <class T>
Var<T> kl_rows(const PosteriorParams<T>& q, const GmmParams<T>& p, const LatentSample<T>& s, KlEstimator est) {
  return est == KlEstimator::Matched ? kl_matched_bound_rows(q, p) : kl_log_ratio(s.z, q, p);
}

/// Everything computed from one batch of source-domain patches: the VAE
/// reconstruction, the translation into the other domain, and the cycle back.
template <class T>
struct DomainPass {
  int source = 1;
  Var<T> x;
  PosteriorParams<T> q;
  LatentSample<T> z;
  Var<T> kl;  // [N]
  Var<T> reconstruction;
  Var<T> translated;
  PosteriorParams<T> q_translated;
  LatentSample<T> z_translated;
  Var<T> kl_translated;  // [N]
  Var<T> cycled;
};

inline int other_domain(int d) { return d == 1 ? 2 : 1; }

template <class T>
DomainPass<T> run_domain(const ModelBundle<T>& b, int source, const Var<T>& x, const LossContext& ctx, Rng& rng,
                         bool with_cycle = true) {
  const int target = other_domain(source);
  const T tau = static_cast<T>(ctx.temperature);
  DomainPass<T> p;
  p.source = source;
  p.x = x;
  p.q = encode(b, source, x);
  p.z = sample_posterior(p.q, tau, ctx.mode, rng);
  p.kl = kl_rows(p.q, b.prior, p.z, ctx.kl);
  p.reconstruction = generate(b, source, p.z.z);
  p.translated = generate(b, target, p.z.z);
  if (with_cycle) {
    p.q_translated = encode(b, target, p.translated);
    p.z_translated = sample_posterior(p.q_translated, tau, ctx.mode, rng);
    p.kl_translated = kl_rows(p.q_translated, b.prior, p.z_translated, ctx.kl);
    p.cycled = generate(b, source, p.z_translated.z);
  }
  return p;
}

template <class T>
Var<T> vae_term(const DomainPass<T>& p, const LossWeights& w) {
  return scale(mean(p.kl), static_cast<T>(w.lambda1)) +
         scale(reconstruction_nll(p.x, p.reconstruction), static_cast<T>(w.lambda2));
}

template <class T>
struct CycleTerms {
  Var<T> kl_source, kl_translated, reconstruction, total;
};

template <class T>
CycleTerms<T> cycle_terms(const DomainPass<T>& p, const LossWeights& w) {
  CycleTerms<T> c;
  c.kl_source = mean(p.kl);
  c.kl_translated = mean(p.kl_translated);
  c.reconstruction = reconstruction_nll(p.x, p.cycled);
  c.total = scale(c.kl_source, static_cast<T>(w.lambda3)) + scale(c.kl_translated, static_cast<T>(w.lambda4)) +
            scale(c.reconstruction, static_cast<T>(w.lambda4));
  return c;
}

/// Non-saturating generator loss lambda0 * -log D_t(fake), batch mean. D is
/// frozen: the loss carries no gradient to discriminator parameters.
template <class T>
Var<T> gan_generator_term(const ModelBundle<T>& b, int target, const Var<T>& fake, const LossWeights& w) {
  return scale(mean(softplus(-discriminator_logits(b, target, fake, true))), static_cast<T>(w.lambda0));
}

/// -log D(real) - log(1 - D(fake)), batch mean. The fake batch is detached.
template <class T>
Var<T> gan_loss_discriminator(const ModelBundle<T>& b, int domain, const Var<T>& real, const Var<T>& fake) {
  require(real.shape() == fake.shape() || (real.rank() == 4 && fake.rank() == 4 && real.dim(2) == fake.dim(2)),
          "gan_loss_discriminator: real/fake patch shapes differ");
  const Var<T> real_term = mean(softplus(-discriminator_logits(b, domain, real)));
  const Var<T> fake_term = mean(softplus(discriminator_logits(b, domain, detach(fake))));
  return real_term + fake_term;
}

// Standalone terms.

template <class T>
Var<T> vae_loss(const ModelBundle<T>& b, int domain, const Var<T>& patches, const LossWeights& w, Rng& rng,
                const LossContext& ctx = {}) {
  return vae_term(run_domain(b, domain, patches, ctx, rng, false), w);
}

template <class T>
Var<T> gan_loss_generator(const ModelBundle<T>& b, int source, int target, const Var<T>& patches,
                          const LossWeights& w, Rng& rng, const LossContext& ctx = {}) {
  require(source != target, "gan_loss_generator: source and target domains must differ");
  const auto q = encode(b, source, patches);
  const auto z = sample_posterior(q, static_cast<T>(ctx.temperature), ctx.mode, rng);
  return gan_generator_term(b, target, generate(b, target, z.z), w);
}

template <class T>
CycleTerms<T> cycle_loss_terms(const ModelBundle<T>& b, int source, const Var<T>& patches, const LossWeights& w,
                               Rng& rng, const LossContext& ctx = {}) {
  return cycle_terms(run_domain(b, source, patches, ctx, rng, true), w);
}

template <class T>
Var<T> cycle_loss(const ModelBundle<T>& b, int source, const Var<T>& patches, const LossWeights& w, Rng& rng,
                  const LossContext& ctx = {}) {
  return cycle_loss_terms(b, source, patches, w, rng, ctx).total;
}

/// Generator-side graph for both domains, built once per step.
template <class T>
struct GeneratorGraph {
  DomainPass<T> pass_1, pass_2;
  Var<T> vae_1, vae_2, cc_1, cc_2;
};

template <class T>
GeneratorGraph<T> build_generator_graph(const ModelBundle<T>& b, const Var<T>& batch_1, const Var<T>& batch_2,
                                        const LossWeights& w, const LossContext& ctx, Rng& rng) {
  require(batch_1.dim(0) > 0 && batch_2.dim(0) > 0, "total_objective: batches must be nonempty");
  GeneratorGraph<T> g;
  g.pass_1 = run_domain(b, 1, batch_1, ctx, rng);
  g.pass_2 = run_domain(b, 2, batch_2, ctx, rng);
  g.vae_1 = vae_term(g.pass_1, w);
  g.vae_2 = vae_term(g.pass_2, w);
  g.cc_1 = cycle_terms(g.pass_1, w).total;
  g.cc_2 = cycle_terms(g.pass_2, w).total;
  return g;
}

/// Discriminator objective for both domains. D1 judges domain-1 reals against
/// translations 2->1; D2 judges domain-2 reals against translations 1->2.
template <class T>
std::pair<Var<T>, Var<T>> discriminator_terms(const ModelBundle<T>& b, const GeneratorGraph<T>& g) {
  return {gan_loss_discriminator(b, 1, g.pass_1.x, g.pass_2.translated),
          gan_loss_discriminator(b, 2, g.pass_2.x, g.pass_1.translated)};
}

template <class T>
std::pair<Var<T>, Var<T>> generator_gan_terms(const ModelBundle<T>& b, const GeneratorGraph<T>& g,
                                              const LossWeights& w) {
  return {gan_generator_term(b, 1, g.pass_2.translated, w), gan_generator_term(b, 2, g.pass_1.translated, w)};
}

template <class T>
struct Objective {
  LossReport report;
  Var<T> total_gen;
  Var<T> total_disc;
};

template <class T>
Var<T> sum_gen(const GeneratorGraph<T>& g, const Var<T>& gan_1, const Var<T>& gan_2) {
  return g.vae_1 + g.vae_2 + g.cc_1 + g.cc_2 + gan_1 + gan_2;
}

/// Full objective at the current parameters. total_gen reaches exactly the
/// encoder/generator/prior/variance parameters; total_disc exactly D1 and D2.
template <class T>
Objective<T> total_objective(const ModelBundle<T>& b, const Var<T>& batch_1, const Var<T>& batch_2,
                             const LossWeights& w, Rng& rng, const LossContext& ctx = {}) {
  const auto g = build_generator_graph(b, batch_1, batch_2, w, ctx, rng);
  const auto [disc_1, disc_2] = discriminator_terms(b, g);
  const auto [gan_1, gan_2] = generator_gan_terms(b, g, w);
  Objective<T> o;
  o.total_gen = sum_gen(g, gan_1, gan_2);
  o.total_disc = disc_1 + disc_2;
  auto& r = o.report;
  r.vae_1 = g.vae_1.item();
  r.vae_2 = g.vae_2.item();
  r.cc_1 = g.cc_1.item();
  r.cc_2 = g.cc_2.item();
  r.gan_1 = gan_1.item();
  r.gan_2 = gan_2.item();
  r.disc_1 = disc_1.item();
  r.disc_2 = disc_2.item();
  r.total_gen = o.total_gen.item();
  r.total_disc = o.total_disc.item();
  return o;
}

}  // namespace mixlat
