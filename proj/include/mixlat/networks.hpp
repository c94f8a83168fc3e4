#pragma once

// The six subnetworks (E1, E2, G1, G2, D1, D2), the learned prior and the
// per-domain component variances, bundled as one value type.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mixlat/autodiff.hpp"
#include "mixlat/error.hpp"
#include "mixlat/gmm_latent.hpp"
#include "mixlat/rng.hpp"

namespace mixlat {

enum class Activation { LeakyRelu, Elu, Tanh };
enum class MixtureMode { InputDependent, Global };
enum class OutputSquash { Sigmoid, Clamp };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::LeakyRelu: return "lrelu";
    case Activation::Elu: return "elu";
    case Activation::Tanh: return "tanh";
  }
  return "?";
}
inline Activation parse_activation(const std::string& s) {
  if (s == "lrelu") return Activation::LeakyRelu;
  if (s == "elu") return Activation::Elu;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + s + "' (expected lrelu, elu or tanh)");
}
inline std::string to_string(MixtureMode m) { return m == MixtureMode::Global ? "global" : "input"; }
inline MixtureMode parse_mixture_mode(const std::string& s) {
  if (s == "input") return MixtureMode::InputDependent;
  if (s == "global") return MixtureMode::Global;
  throw ConfigError("unknown mixture mode '" + s + "' (expected input or global)");
}
inline std::string to_string(OutputSquash o) { return o == OutputSquash::Clamp ? "clamp" : "sigmoid"; }
inline OutputSquash parse_output_squash(const std::string& s) {
  if (s == "sigmoid") return OutputSquash::Sigmoid;
  if (s == "clamp") return OutputSquash::Clamp;
  throw ConfigError("unknown output squash '" + s + "' (expected sigmoid or clamp)");
}

struct NetSpec {
  int patch_size = 32;
  int latent_dim = 64;
  int num_components = 25;
  std::vector<int> channel_widths{16, 32, 64};
  Activation activation = Activation::LeakyRelu;
  MixtureMode mixture_mode = MixtureMode::InputDependent;
  OutputSquash output_squash = OutputSquash::Sigmoid;
  // High-level stages tied across the two domains: the last encoder convs and
  // the generator stem with the first transposed convs. Capped at stages - 1
  // so each domain keeps its own pixel-level layers.
  int shared_stages = 1;

  int effective_shared_stages() const {
    return std::clamp(shared_stages, 0, std::max(0, static_cast<int>(channel_widths.size()) - 1));
  }
  int downsampling() const { return 1 << channel_widths.size(); }
  int bottleneck_size() const { return patch_size / downsampling(); }
  int bottleneck_channels() const { return channel_widths.empty() ? 1 : channel_widths.back(); }
  int feature_size() const { return bottleneck_channels() * bottleneck_size() * bottleneck_size(); }

  void validate() const {
    if (latent_dim < 1) throw ConfigError("NetSpec: latent_dim must be >= 1");
    if (shared_stages < 0) throw ConfigError("NetSpec: shared_stages must be >= 0");
    if (num_components < 1) throw ConfigError("NetSpec: num_components must be >= 1");
    for (int w : channel_widths)
      if (w < 1) throw ConfigError("NetSpec: channel widths must be positive");
    if (channel_widths.size() > 8) throw ConfigError("NetSpec: too many stages");
    if (patch_size < 1 || patch_size % downsampling() != 0)
      throw ConfigError("NetSpec: patch_size " + std::to_string(patch_size) + " is not a positive multiple of " +
                        std::to_string(downsampling()));
  }
  bool operator==(const NetSpec&) const = default;
};

/// Which side of the min-max game a parameter belongs to.
enum class Side { Generator, Discriminator };

template <class T>
struct Dense {
  Var<T> weight;  // [out,in]
  Var<T> bias;    // [out]
};

template <class T>
struct Conv {
  Var<T> weight;  // conv: [out,in,k,k]; transposed: [in,out,k,k]
  Var<T> bias;    // [out]
};

template <class T>
struct EncoderParams {
  std::vector<Conv<T>> stages;
  Dense<T> mean_heads;   // F -> K*d; rows [k*d, (k+1)*d) form head k
  Dense<T> logit_head;   // F -> K (input-dependent mode)
  Var<T> global_logits;  // [1,K] (global mode)
};

template <class T>
struct GeneratorParams {
  Dense<T> stem;
  std::vector<Conv<T>> stages;
};

template <class T>
struct DiscriminatorParams {
  std::vector<Conv<T>> stages;
  Dense<T> head;
};

constexpr int kKernel = 4;
constexpr int kStride = 2;
constexpr int kPad = 1;
constexpr double kLeakySlope = 0.2;

template <class T>
class ModelBundle {
 public:
  NetSpec spec;
  EncoderParams<T> encoder_1, encoder_2;
  GeneratorParams<T> generator_1, generator_2;
  DiscriminatorParams<T> discriminator_1, discriminator_2;
  GmmParams<T> prior;
  Var<T> domain_log_vars_1, domain_log_vars_2;  // [K,d]

  ModelBundle() = default;
  ModelBundle(const ModelBundle& o) : ModelBundle(shallow(o)) {
    for_each_param([](const std::string&, Var<T>& v, Side) { v = v.clone(); });
    tie_shared();
  }
  ModelBundle& operator=(const ModelBundle& o) {
    if (this != &o) *this = ModelBundle(o);
    return *this;
  }
  ModelBundle(ModelBundle&&) noexcept = default;
  ModelBundle& operator=(ModelBundle&&) noexcept = default;

  EncoderParams<T>& encoder(int domain) { return domain == 1 ? encoder_1 : encoder_2; }
  const EncoderParams<T>& encoder(int domain) const { return domain == 1 ? encoder_1 : encoder_2; }
  GeneratorParams<T>& generator(int domain) { return domain == 1 ? generator_1 : generator_2; }
  const GeneratorParams<T>& generator(int domain) const { return domain == 1 ? generator_1 : generator_2; }
  DiscriminatorParams<T>& discriminator(int domain) { return domain == 1 ? discriminator_1 : discriminator_2; }
  const DiscriminatorParams<T>& discriminator(int domain) const {
    return domain == 1 ? discriminator_1 : discriminator_2;
  }
  Var<T>& domain_log_vars(int domain) { return domain == 1 ? domain_log_vars_1 : domain_log_vars_2; }
  const Var<T>& domain_log_vars(int domain) const { return domain == 1 ? domain_log_vars_1 : domain_log_vars_2; }

  /// Points domain 2's shared stages at domain 1's tensors.
  void tie_shared() {
    const int n = spec.effective_shared_stages();
    if (n == 0) return;
    const std::size_t stages = encoder_1.stages.size();
    for (std::size_t i = stages - static_cast<std::size_t>(n); i < stages; ++i) encoder_2.stages[i] = encoder_1.stages[i];
    generator_2.stem = generator_1.stem;
    for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) generator_2.stages[i] = generator_1.stages[i];
  }

  /// Visits every trainable tensor in a fixed order with a stable name.
  /// Shared stages are visited once, under domain 1's name.
  template <class F>
  void for_each_param(F&& f) {
    const std::size_t shared = static_cast<std::size_t>(spec.effective_shared_stages());
    auto convs = [&](const std::string& prefix, std::vector<Conv<T>>& cs, Side side, std::size_t skip_from,
                     std::size_t skip_to) {
      for (std::size_t i = 0; i < cs.size(); ++i) {
        if (i >= skip_from && i < skip_to) continue;
        f(prefix + ".stage" + std::to_string(i) + ".weight", cs[i].weight, side);
        f(prefix + ".stage" + std::to_string(i) + ".bias", cs[i].bias, side);
      }
    };
    auto dense = [&](const std::string& prefix, Dense<T>& d, Side side) {
      f(prefix + ".weight", d.weight, side);
      f(prefix + ".bias", d.bias, side);
    };
    for (int dom : {1, 2}) {
      const std::string e = "encoder_" + std::to_string(dom);
      auto& enc = dom == 1 ? encoder_1 : encoder_2;
      const std::size_t n = enc.stages.size();
      convs(e, enc.stages, Side::Generator, dom == 2 ? n - shared : n, n);
      dense(e + ".mean_heads", enc.mean_heads, Side::Generator);
      if (spec.mixture_mode == MixtureMode::InputDependent)
        dense(e + ".logit_head", enc.logit_head, Side::Generator);
      else
        f(e + ".global_logits", enc.global_logits, Side::Generator);
    }
    for (int dom : {1, 2}) {
      const std::string g = "generator_" + std::to_string(dom);
      auto& gen = dom == 1 ? generator_1 : generator_2;
      if (dom == 1 || shared == 0) dense(g + ".stem", gen.stem, Side::Generator);
      convs(g, gen.stages, Side::Generator, 0, dom == 2 ? shared : 0);
    }
    f("prior.weight_logits", prior.weight_logits, Side::Generator);
    f("prior.means", prior.means, Side::Generator);
    f("prior.log_vars", prior.log_vars, Side::Generator);
    f("domain_log_vars_1", domain_log_vars_1, Side::Generator);
    f("domain_log_vars_2", domain_log_vars_2, Side::Generator);
    for (int dom : {1, 2}) {
      const std::string dn = "discriminator_" + std::to_string(dom);
      auto& disc = dom == 1 ? discriminator_1 : discriminator_2;
      convs(dn, disc.stages, Side::Discriminator, 0, 0);
      dense(dn + ".head", disc.head, Side::Discriminator);
    }
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<ModelBundle*>(this)->for_each_param(
        [&](const std::string& n, Var<T>& v, Side s) { f(n, static_cast<const Var<T>&>(v), s); });
  }

  struct NamedParam {
    std::string name;
    Var<T> var;
    Side side;
  };
  /// Handles (not copies) to every parameter.
  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    for_each_param([&](const std::string& n, const Var<T>& v, Side s) { out.push_back({n, v, s}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Var<T>& v, Side) { n += v.size(); });
    return n;
  }

  bool all_finite_params() const {
    bool ok = true;
    for_each_param([&](const std::string&, const Var<T>& v, Side) { ok = ok && all_finite(v.value()); });
    return ok;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Var<T>& v, Side) { v.zero_grad(); });
  }

 private:
  static ModelBundle shallow(const ModelBundle& o) {
    ModelBundle b;
    b.spec = o.spec;
    b.encoder_1 = o.encoder_1;
    b.encoder_2 = o.encoder_2;
    b.generator_1 = o.generator_1;
    b.generator_2 = o.generator_2;
    b.discriminator_1 = o.discriminator_1;
    b.discriminator_2 = o.discriminator_2;
    b.prior = o.prior;
    b.domain_log_vars_1 = o.domain_log_vars_1;
    b.domain_log_vars_2 = o.domain_log_vars_2;
    return b;
  }
};

namespace detail {

template <class T>
Var<T> random_param(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Var<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Dense<T> make_dense(int in, int out, Rng& rng, double gain = 1.0) {
  return {random_param<T>({out, in}, gain / std::sqrt(static_cast<double>(in)), rng), Var<T>::parameter({out})};
}

template <class T>
Conv<T> make_conv(int in, int out, Rng& rng) {
  return {random_param<T>({out, in, kKernel, kKernel}, std::sqrt(2.0 / (in * kKernel * kKernel)), rng),
          Var<T>::parameter({out})};
}

// Each output pixel of a stride-2 transposed conv sees a quarter of the taps.
template <class T>
Conv<T> make_conv_transpose(int in, int out, Rng& rng) {
  return {random_param<T>({in, out, kKernel, kKernel}, std::sqrt(2.0 / (in * kKernel * kKernel / 4.0)), rng),
          Var<T>::parameter({out})};
}

template <class T>
Var<T> activate(const Var<T>& x, Activation a) {
  switch (a) {
    case Activation::LeakyRelu: return leaky_relu(x, static_cast<T>(kLeakySlope));
    case Activation::Elu: return elu(x);
    case Activation::Tanh: return tanh(x);
  }
  return x;
}

template <class T>
Var<T> maybe_frozen(const Var<T>& v, bool frozen) {
  return frozen ? detach(v) : v;
}

template <class T>
Var<T> conv_trunk(const std::vector<Conv<T>>& stages, Var<T> h, Activation a, bool frozen = false) {
  for (const auto& c : stages)
    h = activate(conv2d(h, maybe_frozen(c.weight, frozen), maybe_frozen(c.bias, frozen), kStride, kPad), a);
  return reshape(h, {h.dim(0), static_cast<int>(h.size() / static_cast<std::size_t>(h.dim(0)))});
}

inline void check_domain(int domain) { require(domain == 1 || domain == 2, "domain must be 1 or 2"); }

}  // namespace detail

/// Reproducible initialization from a seed.
template <class T>
ModelBundle<T> init_params(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ModelBundle<T> b;
  b.spec = spec;
  const int k = spec.num_components, d = spec.latent_dim, feat = spec.feature_size();
  const auto& widths = spec.channel_widths;
  const int stages = static_cast<int>(widths.size());
  for (int dom : {1, 2}) {
    auto& e = dom == 1 ? b.encoder_1 : b.encoder_2;
    int in = 1;
    for (int w : widths) {
      e.stages.push_back(detail::make_conv<T>(in, w, rng));
      in = w;
    }
    e.mean_heads = detail::make_dense<T>(feat, k * d, rng);
    e.logit_head = detail::make_dense<T>(feat, k, rng, 0.1);
    e.global_logits = Var<T>::parameter({1, k});
  }
  for (int dom : {1, 2}) {
    auto& g = dom == 1 ? b.generator_1 : b.generator_2;
    const int side = spec.bottleneck_size();
    g.stem = detail::make_dense<T>(d, spec.bottleneck_channels() * side * side, rng);
    for (int s = stages - 1; s >= 0; --s) {
      const int out = s == 0 ? 1 : widths[static_cast<std::size_t>(s - 1)];
      g.stages.push_back(detail::make_conv_transpose<T>(widths[static_cast<std::size_t>(s)], out, rng));
    }
  }
  for (int dom : {1, 2}) {
    auto& disc = dom == 1 ? b.discriminator_1 : b.discriminator_2;
    int in = 1;
    for (int w : widths) {
      disc.stages.push_back(detail::make_conv<T>(in, w, rng));
      in = w;
    }
    disc.head = detail::make_dense<T>(feat, 1, rng);
  }
  std::vector<T> means(static_cast<std::size_t>(k) * d);
  for (auto& m : means) m = static_cast<T>(0.5 * rng.normal());
  b.prior = GmmParams<T>::make(k, d, std::vector<T>(static_cast<std::size_t>(k), T(0)), std::move(means),
                               std::vector<T>(static_cast<std::size_t>(k) * d, T(0)), true);
  b.domain_log_vars_1 = Var<T>::parameter({k, d});
  b.domain_log_vars_2 = Var<T>::parameter({k, d});
  b.tie_shared();
  return b;
}

/// Patches as a [N,1,P,P] tensor.
template <class T>
void check_patch_batch(const NetSpec& spec, const Var<T>& x) {
  require(x.rank() == 4 && x.dim(1) == 1 && x.dim(2) == spec.patch_size && x.dim(3) == spec.patch_size,
          "expected patches [N,1," + std::to_string(spec.patch_size) + "," + std::to_string(spec.patch_size) +
              "], got " + shape_str(x.shape()));
}

/// Posterior mixture of the domain encoder for a batch of patches.
template <class T>
PosteriorParams<T> encode(const ModelBundle<T>& b, int domain, const Var<T>& patches) {
  detail::check_domain(domain);
  check_patch_batch(b.spec, patches);
  const auto& e = b.encoder(domain);
  const int n = patches.dim(0), k = b.spec.num_components, d = b.spec.latent_dim;
  const Var<T> feat = detail::conv_trunk(e.stages, patches, b.spec.activation);
  const Var<T> means = reshape(linear(feat, e.mean_heads.weight, e.mean_heads.bias), {n, k, d});
  const Var<T> logits = b.spec.mixture_mode == MixtureMode::InputDependent
                            ? linear(feat, e.logit_head.weight, e.logit_head.bias)
                            : e.global_logits;
  return {means, b.domain_log_vars(domain), logits, domain};
}

/// Decodes latents [N,d] to patches [N,1,P,P] in [0,1].
template <class T>
Var<T> generate(const ModelBundle<T>& b, int domain, const Var<T>& z) {
  detail::check_domain(domain);
  const auto& spec = b.spec;
  require(z.rank() == 2 && z.dim(1) == spec.latent_dim,
          "generate: z " + shape_str(z.shape()) + " vs latent dim " + std::to_string(spec.latent_dim));
  const auto& g = b.generator(domain);
  const int n = z.dim(0), side = spec.bottleneck_size();
  Var<T> h = linear(z, g.stem.weight, g.stem.bias);
  if (!g.stages.empty()) {
    h = detail::activate(reshape(h, {n, spec.bottleneck_channels(), side, side}), spec.activation);
    for (std::size_t i = 0; i < g.stages.size(); ++i) {
      h = conv_transpose2d(h, g.stages[i].weight, g.stages[i].bias, kStride, kPad);
      if (i + 1 < g.stages.size()) h = detail::activate(h, spec.activation);
    }
  }
  h = reshape(h, {n, 1, spec.patch_size, spec.patch_size});
  return spec.output_squash == OutputSquash::Sigmoid ? sigmoid(h) : clamp01(h);
}

template <class T>
Var<T> generate(const ModelBundle<T>& b, int domain, const LatentSample<T>& s) {
  return generate(b, domain, s.z);
}

/// Pre-sigmoid discriminator output, [N]. A frozen pass treats D's
/// parameters as constants so no gradient reaches them.
template <class T>
Var<T> discriminator_logits(const ModelBundle<T>& b, int domain, const Var<T>& patches, bool frozen = false) {
  detail::check_domain(domain);
  check_patch_batch(b.spec, patches);
  const auto& disc = b.discriminator(domain);
  const Var<T> feat = detail::conv_trunk(disc.stages, patches, b.spec.activation, frozen);
  const Var<T> logit = linear(feat, detail::maybe_frozen(disc.head.weight, frozen),
                              detail::maybe_frozen(disc.head.bias, frozen));
  return reshape(logit, {patches.dim(0)});
}

/// Realness score in (0,1) per patch, [N].
template <class T>
Var<T> discriminate(const ModelBundle<T>& b, int domain, const Var<T>& patches) {
  return sigmoid(discriminator_logits(b, domain, patches));
}

/// Stacks flat P*P patches into a [N,1,P,P] constant.
template <class T, class Range>
Var<T> patch_batch(const Range& patches, int patch_size) {
  std::vector<T> v;
  v.reserve(patches.size() * static_cast<std::size_t>(patch_size) * patch_size);
  for (const auto& p : patches) {
    require(p.size() == static_cast<std::size_t>(patch_size) * patch_size, "patch_batch: patch size mismatch");
    for (auto x : p) v.push_back(static_cast<T>(x));
  }
  return Var<T>::constant({static_cast<int>(patches.size()), 1, patch_size, patch_size}, std::move(v));
}

}  // namespace mixlat
