#pragma once

// Probability math for the shared Gaussian-mixture latent space: prior and
// posterior mixtures, differentiable sampling, and KL estimators.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mixlat/autodiff.hpp"
#include "mixlat/error.hpp"
#include "mixlat/rng.hpp"

namespace mixlat {

/// Shared latent prior p(z) = sum_k pi_k N(z | mean_k, diag(exp(log_var_k))).
template <class T>
struct GmmParams {
  Var<T> weight_logits;  // [K]
  Var<T> means;          // [K,d]
  Var<T> log_vars;       // [K,d]

  int num_components() const { return means.dim(0); }
  int latent_dim() const { return means.dim(1); }

  static GmmParams make(int k, int d, std::vector<T> logits, std::vector<T> means, std::vector<T> log_vars,
                        bool trainable = false) {
    require(k >= 1 && d >= 1, "GmmParams: K and d must be >= 1");
    auto mk = [trainable](Shape s, std::vector<T> v) {
      return trainable ? Var<T>::parameter(std::move(s), std::move(v)) : Var<T>::constant(std::move(s), std::move(v));
    };
    GmmParams p{mk({k}, std::move(logits)), mk({k, d}, std::move(means)), mk({k, d}, std::move(log_vars))};
    for (const auto* v : {&p.weight_logits, &p.means, &p.log_vars})
      if (!all_finite(v->value())) throw NumericError("GmmParams: non-finite parameter");
    return p;
  }

  /// softmax(weight_logits).
  std::vector<T> weights() const { return softmax_last(detach(weight_logits)).values(); }
};

/// Posterior mixture q_d(z|x) for a batch of N inputs. Component variances are
/// domain-level and shared by every row; mixture logits are either per-row
/// ([N,K]) or shared by the domain ([1,K]).
template <class T>
struct PosteriorParams {
  Var<T> comp_means;      // [N,K,d]
  Var<T> comp_log_vars;   // [K,d]
  Var<T> mixture_logits;  // [N,K] or [1,K]
  int domain_id = 1;

  int batch() const { return comp_means.dim(0); }
  int num_components() const { return comp_means.dim(1); }
  int latent_dim() const { return comp_means.dim(2); }

  /// Per-row softmax of the mixture logits, [N,K] or [1,K].
  std::vector<T> weights() const { return softmax_last(detach(mixture_logits)).values(); }
};

/// A reparameterized draw z ~ q(z|x) together with the relaxed selector.
template <class T>
struct LatentSample {
  Var<T> z;                // [N,d]
  Var<T> soft_assignment;  // [N,K]
  T temperature = T(1);
};

enum class SampleMode { Relaxed, Hard };

namespace detail {

template <class T>
void check_finite(const Var<T>& v, const char* what) {
  if (!all_finite(v.value())) throw NumericError(std::string(what) + ": non-finite input");
}

template <class T>
Var<T> as_row(const Var<T>& logits) {
  return logits.rank() == 1 ? reshape(logits, {1, logits.dim(0)}) : logits;
}

}  // namespace detail

/// log p(z) for each row of z [N,d] under the prior. Returns [N].
template <class T>
Var<T> mixture_log_density(const Var<T>& z, const GmmParams<T>& p) {
  require(z.rank() == 2 && z.dim(1) == p.latent_dim(),
          "mixture_log_density: z " + shape_str(z.shape()) + " vs latent dim " + std::to_string(p.latent_dim()));
  detail::check_finite(z, "mixture_log_density");
  const Var<T> comp = gaussian_log_pdf(z, p.means, p.log_vars);
  return logsumexp_last(comp + log_softmax_last(detail::as_row(p.weight_logits)));
}

/// log q(z_n | x_n) for each row, using row n's own mixture. Returns [N].
template <class T>
Var<T> mixture_log_density(const Var<T>& z, const PosteriorParams<T>& q) {
  require(z.rank() == 2 && z.dim(0) == q.batch() && z.dim(1) == q.latent_dim(),
          "mixture_log_density: z " + shape_str(z.shape()) + " vs posterior " + shape_str(q.comp_means.shape()));
  detail::check_finite(z, "mixture_log_density");
  const Var<T> comp = gaussian_log_pdf(z, q.comp_means, q.comp_log_vars);
  return logsumexp_last(comp + log_softmax_last(q.mixture_logits));
}

/// Draws one latent per posterior row. Relaxed mode uses a Gumbel-softmax
/// selector so gradients reach the mixture logits; hard mode uses the
/// Gumbel-max one-hot and only the selected component is differentiated.
template <class T>
LatentSample<T> sample_posterior(const PosteriorParams<T>& q, T temperature, SampleMode mode, Rng& rng) {
  if (!(temperature > T(0)) || !std::isfinite(temperature))
    throw ConfigError("sample_posterior: temperature must be > 0");
  const int n = q.batch(), k = q.num_components(), d = q.latent_dim();
  require(q.comp_log_vars.size() == static_cast<std::size_t>(k) * d,
          "sample_posterior: comp_log_vars must be [K,d]");
  require(q.mixture_logits.size() == static_cast<std::size_t>(k) ||
              q.mixture_logits.size() == static_cast<std::size_t>(n) * k,
          "sample_posterior: mixture_logits must be [N,K] or [1,K]");
  std::vector<T> gumbel(static_cast<std::size_t>(n) * k);
  std::vector<T> eps(static_cast<std::size_t>(n) * k * d);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < k; ++c) gumbel[static_cast<std::size_t>(r) * k + c] = static_cast<T>(rng.gumbel());
    for (int i = 0; i < k * d; ++i) eps[static_cast<std::size_t>(r) * k * d + i] = static_cast<T>(rng.normal());
  }
  const Var<T> noise = Var<T>::constant({n, k, d}, std::move(eps));
  const Var<T> stddev = exp(scale(clamp_min(q.comp_log_vars, kLogVarFloor<T>), T(0.5)));
  const Var<T> comps = q.comp_means + stddev * noise;

  Var<T> soft;
  if (mode == SampleMode::Relaxed) {
    soft = softmax_last(scale(q.mixture_logits + Var<T>::constant({n, k}, gumbel), T(1) / temperature));
  } else {
    const auto& lv = q.mixture_logits.values();
    const std::size_t nl = lv.size();
    std::vector<T> onehot(static_cast<std::size_t>(n) * k, T(0));
    for (int r = 0; r < n; ++r) {
      int best = 0;
      T best_v = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < k; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * k + c;
        const T v = lv[i % nl] + gumbel[i];
        if (v > best_v) best_v = v, best = c;
      }
      onehot[static_cast<std::size_t>(r) * k + best] = T(1);
    }
    soft = Var<T>::constant({n, k}, std::move(onehot));
  }
  return {mix(soft, comps), soft, temperature};
}

/// Closed-form KL between diagonal Gaussians.
template <class T>
T gaussian_kl_diag(std::span<const T> mu_q, std::span<const T> logvar_q, std::span<const T> mu_p,
                   std::span<const T> logvar_p) {
  const std::size_t d = mu_q.size();
  require(logvar_q.size() == d && mu_p.size() == d && logvar_p.size() == d, "gaussian_kl_diag: dimension mismatch");
  for (auto s : {mu_q, logvar_q, mu_p, logvar_p})
    if (!all_finite(s)) throw NumericError("gaussian_kl_diag: non-finite input");
  T kl = T(0);
  for (std::size_t i = 0; i < d; ++i) {
    const T lq = std::max(logvar_q[i], kLogVarFloor<T>), lp = std::max(logvar_p[i], kLogVarFloor<T>);
    const T diff = mu_q[i] - mu_p[i];
    kl += T(0.5) * (lp - lq + (std::exp(lq) + diff * diff) * std::exp(-lp) - T(1));
  }
  return kl;
}

/// Per-row log q(z) - log p(z): the single-sample MC KL integrand. Returns [N].
template <class T>
Var<T> kl_log_ratio(const Var<T>& z, const PosteriorParams<T>& q, const GmmParams<T>& p) {
  return mixture_log_density(z, q) - mixture_log_density(z, p);
}

struct KlSampling {
  double temperature = 1.0;
  SampleMode mode = SampleMode::Relaxed;
};

/// Per-draw MC KL terms for S draws of every posterior row; draw-major, [S*N].
template <class T>
Var<T> kl_mc_terms(const PosteriorParams<T>& q, const GmmParams<T>& p, int num_samples, Rng& rng,
                   KlSampling sampling = {}) {
  if (num_samples <= 0) throw ConfigError("kl_mc_estimate: num_samples must be positive");
  require(q.num_components() >= 1 && q.latent_dim() == p.latent_dim(), "kl_mc_estimate: latent dims differ");
  PosteriorParams<T> tiled{tile_rows(q.comp_means, num_samples), q.comp_log_vars,
                           q.mixture_logits.dim(0) == 1 ? q.mixture_logits
                                                        : tile_rows(q.mixture_logits, num_samples),
                           q.domain_id};
  const auto s = sample_posterior(tiled, static_cast<T>(sampling.temperature), sampling.mode, rng);
  return kl_log_ratio(s.z, tiled, p);
}

/// (1/S) sum_s [log q(z_s) - log p(z_s)], averaged over posterior rows.
template <class T>
Var<T> kl_mc_estimate(const PosteriorParams<T>& q, const GmmParams<T>& p, int num_samples, Rng& rng,
                      KlSampling sampling = {}) {
  return mean(kl_mc_terms(q, p, num_samples, rng, sampling));
}

/// KL(w_q || pi) + sum_k w_q,k KL(N_q,k || N_p,k) per posterior row, [N].
/// Upper-bounds the mixture KL when components are paired by index.
template <class T>
Var<T> kl_matched_bound_rows(const PosteriorParams<T>& q, const GmmParams<T>& p) {
  require(q.num_components() == p.num_components(), "kl_matched_upper_bound: K differs between q and p");
  require(q.latent_dim() == p.latent_dim(), "kl_matched_upper_bound: d differs between q and p");
  const Var<T> log_wq = log_softmax_last(q.mixture_logits);
  const Var<T> wq = exp(log_wq);
  const Var<T> log_pi = log_softmax_last(detail::as_row(p.weight_logits));
  const Var<T> cat = sum_last(wq * (log_wq - log_pi));
  const Var<T> comp = gaussian_kl(q.comp_means, q.comp_log_vars, p.means, p.log_vars);  // [N,K]
  return cat + sum_last(wq * comp);
}

template <class T>
Var<T> kl_matched_upper_bound(const PosteriorParams<T>& q, const GmmParams<T>& p) {
  return mean(kl_matched_bound_rows(q, p));
}

}  // namespace mixlat
