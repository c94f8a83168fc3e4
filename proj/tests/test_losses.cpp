#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "grad_check.hpp"
#include "mixlat/losses.hpp"
#include "mixlat/optim.hpp"

using namespace mixlat;

namespace {

const double kLn2 = std::numbers::ln2;

NetSpec tiny_spec() {
  NetSpec s;
  s.patch_size = 8;
  s.latent_dim = 3;
  s.num_components = 2;
  s.channel_widths = {2, 3};
  s.activation = Activation::Elu;
  return s;
}

Var<double> random_patches(int n, int p, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n) * p * p);
  for (auto& x : v) x = rng.uniform();
  return Var<double>::constant({n, 1, p, p}, std::move(v));
}

std::vector<Var<double>> params_with_prefix(const ModelBundle<double>& b, const std::string& prefix) {
  std::vector<Var<double>> out;
  for (const auto& p : b.parameters())
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.var);
  return out;
}

void zero_discriminator(ModelBundle<double>& b) {
  for (int d : {1, 2}) {
    for (auto& v : b.discriminator(d).head.weight.mutable_value()) v = 0;
    for (auto& v : b.discriminator(d).head.bias.mutable_value()) v = 0;
  }
}

void set_values(Var<double>& v, const std::vector<double>& x) {
  auto m = v.mutable_value();
  ASSERT_EQ(m.size(), x.size());
  std::copy(x.begin(), x.end(), m.begin());
}

void set_identity(Var<double>& w) {
  auto m = w.mutable_value();
  const int rows = w.dim(0), cols = w.dim(1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m[static_cast<std::size_t>(r * cols + c)] = r == c ? 1.0 : 0.0;
}

// Linear single-component model on binary 8x8 patches: E(x) = 3x - 1 and
// G(z) = clamp(z), so G(E(x)) = x even after adding small posterior noise.
// The prior sits exactly on E(x) for the given patch, so q = p there.
ModelBundle<double> identity_bundle(const std::vector<double>& binary_patch) {
  NetSpec s;
  s.patch_size = 8;
  s.latent_dim = 64;
  s.num_components = 1;
  s.channel_widths = {};
  s.mixture_mode = MixtureMode::Global;
  s.output_squash = OutputSquash::Clamp;
  auto b = init_params<double>(s, 1);
  const double lv = -10.0;
  std::vector<double> prior_mean(64);
  for (int i = 0; i < 64; ++i) prior_mean[static_cast<std::size_t>(i)] = 3 * binary_patch[static_cast<std::size_t>(i)] - 1;
  for (int d : {1, 2}) {
    auto& e = d == 1 ? b.encoder_1 : b.encoder_2;
    set_identity(e.mean_heads.weight);
    for (auto& w : e.mean_heads.weight.mutable_value()) w *= 3;
    for (auto& v : e.mean_heads.bias.mutable_value()) v = -1;
    auto& g = d == 1 ? b.generator_1 : b.generator_2;
    set_identity(g.stem.weight);
    for (auto& v : g.stem.bias.mutable_value()) v = 0;
    for (auto& v : b.domain_log_vars(d).mutable_value()) v = lv;
  }
  set_values(b.prior.means, prior_mean);
  for (auto& v : b.prior.log_vars.mutable_value()) v = lv;
  return b;
}

std::vector<double> checkerboard() {
  std::vector<double> x(64);
  for (int i = 0; i < 64; ++i) x[static_cast<std::size_t>(i)] = ((i / 8 + i % 8) % 2) ? 1.0 : 0.0;
  return x;
}

}  // namespace

TEST(ReconstructionNll, HandValues) {
  auto zeros = Var<double>::constant({1, 1, 32, 32}, 0.0);
  auto ones = Var<double>::constant({1, 1, 32, 32}, 1.0);
  EXPECT_DOUBLE_EQ(reconstruction_nll(zeros, ones).item(), 1024.0);
  EXPECT_DOUBLE_EQ(reconstruction_nll(ones, ones).item(), 0.0);
  EXPECT_THROW(reconstruction_nll(ones, Var<double>::constant({1, 1, 16, 16})), ContractViolation);
}

TEST(ReconstructionNll, SymmetricProperty) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto a = random_patches(3, 8, s), b = random_patches(3, 8, s + 100);
    EXPECT_DOUBLE_EQ(reconstruction_nll(a, b).item(), reconstruction_nll(b, a).item());
  }
}

TEST(ReconstructionNll, AveragesOverBatch) {
  auto zeros = Var<double>::constant({4, 1, 8, 8}, 0.0);
  auto halves = Var<double>::constant({4, 1, 8, 8}, 0.5);
  EXPECT_DOUBLE_EQ(reconstruction_nll(zeros, halves).item(), 32.0);
}

TEST(LossWeights, ValidateRejectsNegativeAndNonFinite) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.lambda3 = -1;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.lambda0 = std::nan("");
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(VaeLoss, ZeroWeightsGiveZero) {
  auto b = init_params<double>(tiny_spec(), 1);
  Rng rng(2);
  EXPECT_EQ(vae_loss(b, 1, random_patches(2, 8, 3), LossWeights{1, 0, 0, 1, 1}, rng).item(), 0.0);
}

TEST(VaeLoss, IdentityModelReconstructsExactly) {
  const auto x = checkerboard();
  auto b = identity_bundle(x);
  auto patch = Var<double>::constant({1, 1, 8, 8}, x);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    EXPECT_EQ(vae_loss(b, 1, patch, LossWeights{1, 0, 10, 0, 0}, rng).item(), 0.0);
  }
}

TEST(VaeLoss, KlNullWhenPosteriorEqualsPrior) {
  // Posterior copies the prior for every input: constant heads, shared
  // logits and variances.
  auto s = tiny_spec();
  s.mixture_mode = MixtureMode::Global;
  auto b = init_params<double>(s, 5);
  set_values(b.prior.log_vars, {0.3, -0.2, 0.1, -0.4, 0.5, 0.0});
  set_values(b.prior.weight_logits, {0.7, -0.3});
  for (auto& w : b.encoder_1.mean_heads.weight.mutable_value()) w = 0;
  set_values(b.encoder_1.mean_heads.bias, b.prior.means.values());
  set_values(b.encoder_1.global_logits, b.prior.weight_logits.values());
  set_values(b.domain_log_vars_1, b.prior.log_vars.values());
  std::vector<double> estimates;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    estimates.push_back(vae_loss(b, 1, random_patches(4, 8, seed), LossWeights{1, 1, 0, 1, 1}, rng).item());
  }
  double m = 0, v = 0;
  for (double e : estimates) m += e / 20;
  for (double e : estimates) v += (e - m) * (e - m) / 19;
  EXPECT_LE(std::abs(m), 3 * std::sqrt(v / 20) + 1e-12);
}

TEST(VaeLoss, LinearInReconstructionWeightProperty) {
  auto b = init_params<double>(tiny_spec(), 6);
  auto x = random_patches(3, 8, 7);
  auto eval = [&](double l2) {
    Rng rng(8);
    return vae_loss(b, 2, x, LossWeights{1, 0.5, l2, 0, 0}, rng).item();
  };
  const double base = eval(0);
  EXPECT_NEAR(eval(2.0) - base, 2 * (eval(1.0) - base), 1e-9 * std::abs(eval(2.0)));
}

TEST(VaeLoss, SingleGaussianReducesToClosedFormKl) {
  auto s = tiny_spec();
  s.num_components = 1;
  s.mixture_mode = MixtureMode::Global;
  auto b = init_params<double>(s, 9);
  set_values(b.domain_log_vars_1, {0.4, -0.3, 0.2});
  set_values(b.prior.log_vars, {-0.1, 0.2, 0.0});
  auto x = random_patches(3, 8, 10);
  const auto q = encode(b, 1, x);
  double closed = 0;
  for (int n = 0; n < 3; ++n) {
    auto mu = q.comp_means.values();
    closed += gaussian_kl_diag<double>(std::span(mu).subspan(static_cast<std::size_t>(n) * 3, 3),
                                       b.domain_log_vars_1.values(), b.prior.means.values(),
                                       b.prior.log_vars.values()) /
              3;
  }
  const LossWeights kl_only{1, 1, 0, 0, 0};
  Rng r0(0);
  EXPECT_NEAR(vae_loss(b, 1, x, kl_only, r0, {1.0, KlEstimator::Matched}).item(), closed, 1e-12);

  const int runs = 400;
  double m = 0, m2 = 0;
  for (int i = 0; i < runs; ++i) {
    Rng rng(static_cast<std::uint64_t>(i));
    const double e = vae_loss(b, 1, x, kl_only, rng).item();
    m += e / runs;
    m2 += e * e / runs;
  }
  const double se = std::sqrt((m2 - m * m) / (runs - 1));
  EXPECT_NEAR(m, closed, 4 * se);
}

TEST(GanLossGenerator, FreshDiscriminatorGivesLn2) {
  auto b = init_params<double>(tiny_spec(), 11);
  zero_discriminator(b);
  Rng rng(1);
  EXPECT_NEAR(gan_loss_generator(b, 1, 2, random_patches(3, 8, 12), LossWeights{}, rng).item(), kLn2, 1e-12);
  LossWeights w;
  w.lambda0 = 2.5;
  EXPECT_NEAR(gan_loss_generator(b, 2, 1, random_patches(3, 8, 12), w, rng).item(), 2.5 * kLn2, 1e-12);
  w.lambda0 = 0;
  EXPECT_EQ(gan_loss_generator(b, 2, 1, random_patches(3, 8, 12), w, rng).item(), 0.0);
  EXPECT_THROW(gan_loss_generator(b, 1, 1, random_patches(1, 8, 12), w, rng), ContractViolation);
}

TEST(GanLossGenerator, NoGradientReachesDiscriminator) {
  auto b = init_params<double>(tiny_spec(), 13);
  Rng rng(1);
  b.zero_grad();
  backward(gan_loss_generator(b, 1, 2, random_patches(2, 8, 14), LossWeights{}, rng));
  for (const auto& p : b.parameters())
    if (p.name.rfind("discriminator", 0) == 0)
      for (double g : p.var.grad()) ASSERT_EQ(g, 0.0) << p.name;
  bool encoder_moved = false;
  for (const auto& v : params_with_prefix(b, "encoder_1"))
    for (double g : v.grad()) encoder_moved = encoder_moved || g != 0.0;
  EXPECT_TRUE(encoder_moved);
}

TEST(GanLossGenerator, DecreasesAgainstFrozenDiscriminator) {
  auto b = init_params<double>(tiny_spec(), 15);
  auto x = random_patches(4, 8, 16);
  auto params = params_with_prefix(b, "encoder_1");
  for (const auto& p : params_with_prefix(b, "generator_2")) params.push_back(p);
  Adam<double> opt(1e-2);
  auto loss_at = [&] {
    Rng rng(17);
    return gan_loss_generator(b, 1, 2, x, LossWeights{}, rng);
  };
  const double initial = loss_at().item();
  for (int i = 0; i < 100; ++i) {
    b.zero_grad();
    backward(loss_at());
    opt.step(params);
  }
  EXPECT_LT(loss_at().item(), initial);
}

TEST(GanLossDiscriminator, FreshDiscriminatorGivesTwoLn2) {
  auto b = init_params<double>(tiny_spec(), 18);
  zero_discriminator(b);
  EXPECT_NEAR(gan_loss_discriminator(b, 1, random_patches(3, 8, 1), random_patches(3, 8, 2)).item(), 2 * kLn2,
              1e-12);
}

TEST(GanLossDiscriminator, PerfectDiscriminatorLimit) {
  // Linear D: logit = c*(mean pixel - 1/2), so all-ones -> c/2 and all-zeros -> -c/2.
  NetSpec s = tiny_spec();
  s.channel_widths = {};
  s.latent_dim = 2;
  auto b = init_params<double>(s, 19);
  const double c = 20;
  for (auto& w : b.discriminator_1.head.weight.mutable_value()) w = c / 64;
  b.discriminator_1.head.bias.mutable_value()[0] = -c / 2;
  const double eps = 1.0 / (1.0 + std::exp(c / 2));
  const double loss =
      gan_loss_discriminator(b, 1, Var<double>::constant({2, 1, 8, 8}, 1.0), Var<double>::constant({2, 1, 8, 8}, 0.0))
          .item();
  EXPECT_NEAR(loss, 2 * eps, 1e-3 * 2 * eps);
}

TEST(GanLossDiscriminator, GradientOnlyReachesDiscriminator) {
  auto b = init_params<double>(tiny_spec(), 20);
  auto fake = generate(b, 1, mixlat::testing::random_param({2, 3}, 21));
  b.zero_grad();
  backward(gan_loss_discriminator(b, 1, random_patches(2, 8, 22), fake));
  for (const auto& p : b.parameters()) {
    const bool is_d1 = p.name.rfind("discriminator_1", 0) == 0;
    double mag = 0;
    for (double g : p.var.grad()) mag += std::abs(g);
    if (is_d1)
      EXPECT_GT(mag, 0.0) << p.name;
    else
      EXPECT_EQ(mag, 0.0) << p.name;
  }
}

TEST(GanLossDiscriminator, DecreasesOnSeparableBatches) {
  auto b = init_params<double>(tiny_spec(), 23);
  std::vector<double> ramp;
  for (int n = 0; n < 8; ++n)
    for (int i = 0; i < 64; ++i) ramp.push_back(0.1 + 0.8 * (i % 8) / 7.0);
  auto real = Var<double>::constant({8, 1, 8, 8}, ramp);
  auto noise = random_patches(8, 8, 24);
  auto dp = params_with_prefix(b, "discriminator_1");
  Adam<double> opt(1e-2);
  const double initial = gan_loss_discriminator(b, 1, real, noise).item();
  for (int i = 0; i < 200; ++i) {
    b.zero_grad();
    backward(gan_loss_discriminator(b, 1, real, noise));
    opt.step(dp);
  }
  EXPECT_LT(gan_loss_discriminator(b, 1, real, noise).item(), 0.5 * initial);
}

TEST(CycleLoss, ZeroWeightsGiveZero) {
  auto b = init_params<double>(tiny_spec(), 25);
  Rng rng(1);
  EXPECT_EQ(cycle_loss(b, 1, random_patches(2, 8, 26), LossWeights{1, 1, 1, 0, 0}, rng).item(), 0.0);
}

TEST(CycleLoss, IdentityModelHasZeroTerms) {
  const auto x = checkerboard();
  auto b = identity_bundle(x);
  auto patch = Var<double>::constant({1, 1, 8, 8}, x);
  for (int source : {1, 2})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const auto t = cycle_loss_terms(b, source, patch, LossWeights{1, 1, 1, 1, 1}, rng);
      EXPECT_EQ(t.reconstruction.item(), 0.0);
      EXPECT_NEAR(t.kl_source.item(), 0.0, 1e-9);
      EXPECT_NEAR(t.kl_translated.item(), 0.0, 1e-9);
    }
}

TEST(CycleLoss, PositiveAndDifferentiableAtRandomInit) {
  auto b = init_params<double>(tiny_spec(), 27);
  auto x = random_patches(2, 8, 28);
  const LossWeights ones{1, 1, 1, 1, 1};
  auto loss = [&] {
    Rng rng(29);
    return cycle_loss(b, 1, x, ones, rng);
  };
  const double v = loss().item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
  std::vector<Var<double>> ps;
  std::vector<std::string> names;
  for (const auto& p : b.parameters())
    if (p.name.rfind("discriminator", 0) != 0) {
      ps.push_back(p.var);
      names.push_back(p.name);
    }
  auto r = mixlat::testing::check_gradients(loss, ps, names, 1e-5, 6);
  EXPECT_LT(r.worst_rel_error, 1e-3) << r.worst_where;
}

TEST(TotalObjective, ReportAdditivityAndFiniteness) {
  auto b = init_params<double>(tiny_spec(), 30);
  Rng rng(31);
  const auto o = total_objective(b, random_patches(3, 8, 32), random_patches(3, 8, 33), LossWeights{}, rng);
  const auto& r = o.report;
  EXPECT_TRUE(r.first_non_finite().empty());
  EXPECT_NEAR(r.total_gen, r.vae_1 + r.vae_2 + r.cc_1 + r.cc_2 + r.gan_1 + r.gan_2, 1e-6);
  EXPECT_NEAR(r.total_disc, r.disc_1 + r.disc_2, 1e-6);
  EXPECT_GE(r.gan_1, 0.0);
  EXPECT_GE(r.gan_2, 0.0);
  EXPECT_GT(r.disc_1, 0.0);
  EXPECT_GT(r.cc_1, 0.0);
  EXPECT_GT(r.vae_2, 0.0);
}

TEST(TotalObjective, ZeroWeightsLeaveOnlyDiscriminatorTerms) {
  auto b = init_params<double>(tiny_spec(), 34);
  Rng rng(35);
  const auto r = total_objective(b, random_patches(2, 8, 36), random_patches(2, 8, 37), LossWeights{0, 0, 0, 0, 0},
                                 rng)
                     .report;
  for (double v : {r.vae_1, r.vae_2, r.gan_1, r.gan_2, r.cc_1, r.cc_2, r.total_gen}) EXPECT_EQ(v, 0.0);
  EXPECT_GT(r.disc_1, 0.0);
  EXPECT_GT(r.disc_2, 0.0);
}

TEST(TotalObjective, RejectsEmptyBatch) {
  auto b = init_params<double>(tiny_spec(), 38);
  Rng rng(1);
  EXPECT_THROW(total_objective(b, Var<double>::constant({0, 1, 8, 8}), random_patches(1, 8, 1), LossWeights{}, rng),
               ContractViolation);
}

TEST(TotalObjective, GradientPartition) {
  auto b = init_params<double>(tiny_spec(), 39);
  Rng rng(40);
  const auto o = total_objective(b, random_patches(2, 8, 41), random_patches(2, 8, 42), LossWeights{}, rng);
  auto magnitudes = [&] {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& p : b.parameters()) {
      double m = 0;
      for (double g : p.var.grad()) m += std::abs(g);
      out.emplace_back(p.name, m);
    }
    return out;
  };
  b.zero_grad();
  backward(o.total_gen);
  for (const auto& [name, m] : magnitudes()) {
    if (name.find("global_logits") != std::string::npos) continue;  // unused in input-dependent mode
    if (name.rfind("discriminator", 0) == 0)
      EXPECT_EQ(m, 0.0) << name;
    else
      EXPECT_GT(m, 0.0) << name;
  }
  b.zero_grad();
  backward(o.total_disc);
  for (const auto& [name, m] : magnitudes()) {
    if (name.rfind("discriminator", 0) == 0)
      EXPECT_GT(m, 0.0) << name;
    else
      EXPECT_EQ(m, 0.0) << name;
  }
}

TEST(TotalObjective, GeneratorGradientMatchesFiniteDifferences) {
  auto b = init_params<double>(tiny_spec(), 43);
  auto x1 = random_patches(1, 8, 44), x2 = random_patches(1, 8, 45);
  auto loss = [&] {
    Rng rng(46);
    return total_objective(b, x1, x2, LossWeights{}, rng).total_gen;
  };
  std::vector<std::pair<std::string, Var<double>>> gen_params;
  for (const auto& p : b.parameters())
    if (p.name.rfind("discriminator", 0) != 0 && p.name.find("global_logits") == std::string::npos)
      gen_params.emplace_back(p.name, p.var);
  b.zero_grad();
  backward(loss());
  Rng pick(47);
  const double h = 1e-5;
  double worst = 0;
  std::string where;
  for (int t = 0; t < 20; ++t) {
    auto& [name, var] = gen_params[static_cast<std::size_t>(pick.uniform_int(0, static_cast<long>(gen_params.size()) - 1))];
    const auto i = static_cast<std::size_t>(pick.uniform_int(0, static_cast<long>(var.size()) - 1));
    const double analytic = var.grad()[i];
    auto v = var.mutable_value();
    const double orig = v[i];
    v[i] = orig + h;
    const double up = loss().item();
    v[i] = orig - h;
    const double down = loss().item();
    v[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    if (denom < 1e-6) continue;
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > worst) {
      worst = rel;
      where = name + "[" + std::to_string(i) + "]";
    }
  }
  EXPECT_LT(worst, 1e-3) << where;
}

TEST(LossReport, JsonFieldNames) {
  LossReport r;
  r.vae_1 = 1.5;
  r.total_disc = 2.0;
  const auto j = to_json(r, 7);
  EXPECT_EQ(j["step"], 7);
  EXPECT_EQ(j["vae_1"], 1.5);
  EXPECT_EQ(j["total_disc"], 2.0);
  EXPECT_EQ(j.size(), 11u);
}
