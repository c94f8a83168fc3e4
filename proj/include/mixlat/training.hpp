#pragma once

// Alternating min-max optimization over random patches, the flat-text config
// format, the binary checkpoint container and validation-driven K selection.

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mixlat/eval.hpp"
#include "mixlat/losses.hpp"
#include "mixlat/networks.hpp"
#include "mixlat/optim.hpp"
#include "mixlat/phantom.hpp"

namespace mixlat {

struct TrainConfig {
  LossWeights weights;
  int num_components = 25;
  int latent_dim = 64;
  int patch_size = 32;
  std::vector<int> channel_widths{16, 32, 64};
  Activation activation = Activation::LeakyRelu;
  MixtureMode mixture_mode = MixtureMode::InputDependent;
  OutputSquash output_squash = OutputSquash::Sigmoid;
  int shared_stages = 1;
  int patches_per_image = 8;
  int batch_size = 8;
  long steps = 2000;
  double learning_rate_gen = 1e-4;
  double learning_rate_disc = 4e-4;
  double temperature_start = 1.0;
  double temperature_end = 0.3;
  KlEstimator kl_estimator = KlEstimator::MonteCarlo;
  std::uint64_t seed = 1;
  long checkpoint_interval = 500;
  double select_k_fraction = 0.25;

  NetSpec net_spec() const {
    NetSpec s;
    s.patch_size = patch_size;
    s.latent_dim = latent_dim;
    s.num_components = num_components;
    s.channel_widths = channel_widths;
    s.activation = activation;
    s.mixture_mode = mixture_mode;
    s.output_squash = output_squash;
    s.shared_stages = shared_stages;
    return s;
  }

  /// Temperature of the relaxed component selector at 0-based step s.
  double temperature_at(long s) const {
    if (steps <= 1) return temperature_start;
    const double f = std::min(1.0, static_cast<double>(s) / static_cast<double>(steps - 1));
    return temperature_start + (temperature_end - temperature_start) * f;
  }

  /// Every invalid field with a reason; empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <class I>
bool parse_int(const std::string& s, I& out) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) return false;
    out = static_cast<I>(v);
    return static_cast<long long>(out) == v;
  } catch (...) {
    return false;
  }
}

inline bool parse_u64(const std::string& s, std::uint64_t& out) {
  if (s.empty() || s[0] == '-') return false;
  try {
    std::size_t pos = 0;
    out = std::stoull(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t pos = 0;
    out = std::stod(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

}  // namespace detail

/// Canonical key/value view, in file order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  using detail::fmt_double;
  return {{"lambda0", fmt_double(c.weights.lambda0)},
          {"lambda1", fmt_double(c.weights.lambda1)},
          {"lambda2", fmt_double(c.weights.lambda2)},
          {"lambda3", fmt_double(c.weights.lambda3)},
          {"lambda4", fmt_double(c.weights.lambda4)},
          {"num_components", std::to_string(c.num_components)},
          {"latent_dim", std::to_string(c.latent_dim)},
          {"patch_size", std::to_string(c.patch_size)},
          {"channel_widths", detail::join_ints(c.channel_widths)},
          {"activation", to_string(c.activation)},
          {"mixture_mode", to_string(c.mixture_mode)},
          {"output_squash", to_string(c.output_squash)},
          {"shared_stages", std::to_string(c.shared_stages)},
          {"patches_per_image", std::to_string(c.patches_per_image)},
          {"batch_size", std::to_string(c.batch_size)},
          {"steps", std::to_string(c.steps)},
          {"learning_rate_gen", fmt_double(c.learning_rate_gen)},
          {"learning_rate_disc", fmt_double(c.learning_rate_disc)},
          {"temperature_start", fmt_double(c.temperature_start)},
          {"temperature_end", fmt_double(c.temperature_end)},
          {"kl_estimator", to_string(c.kl_estimator)},
          {"seed", std::to_string(c.seed)},
          {"checkpoint_interval", std::to_string(c.checkpoint_interval)},
          {"select_k_fraction", fmt_double(c.select_k_fraction)}};
}

inline std::string to_text(const TrainConfig& c) {
  std::string s;
  for (const auto& [k, v] : config_entries(c)) s += k + " = " + v + "\n";
  return s;
}

/// Applies one key/value; on failure appends "key: reason" to errors.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& raw,
                             std::vector<std::string>& errors) {
  const std::string v = detail::trim(raw);
  auto bad = [&](const std::string& why) { errors.push_back(key + ": " + why + " (got '" + v + "')"); };
  auto dbl = [&](double& out) {
    if (!detail::parse_double(v, out)) bad("expected a number");
  };
  auto integer = [&](auto& out) {
    if (!detail::parse_int(v, out)) bad("expected an integer");
  };
  if (key == "lambda0") dbl(c.weights.lambda0);
  else if (key == "lambda1") dbl(c.weights.lambda1);
  else if (key == "lambda2") dbl(c.weights.lambda2);
  else if (key == "lambda3") dbl(c.weights.lambda3);
  else if (key == "lambda4") dbl(c.weights.lambda4);
  else if (key == "num_components") integer(c.num_components);
  else if (key == "latent_dim") integer(c.latent_dim);
  else if (key == "patch_size") integer(c.patch_size);
  else if (key == "channel_widths") {
    std::vector<int> w;
    std::stringstream ss(v);
    std::string item;
    bool ok = true;
    while (std::getline(ss, item, ',')) {
      int x = 0;
      ok = ok && detail::parse_int(detail::trim(item), x);
      w.push_back(x);
    }
    if (ok) c.channel_widths = w;
    else bad("expected a comma-separated list of integers");
  } else if (key == "activation" || key == "mixture_mode" || key == "output_squash" || key == "kl_estimator") {
    try {
      if (key == "activation") c.activation = parse_activation(v);
      else if (key == "mixture_mode") c.mixture_mode = parse_mixture_mode(v);
      else if (key == "output_squash") c.output_squash = parse_output_squash(v);
      else c.kl_estimator = parse_kl_estimator(v);
    } catch (const ConfigError& e) {
      errors.push_back(key + ": " + e.what());
    }
  } else if (key == "shared_stages") integer(c.shared_stages);
  else if (key == "patches_per_image") integer(c.patches_per_image);
  else if (key == "batch_size") integer(c.batch_size);
  else if (key == "steps") integer(c.steps);
  else if (key == "learning_rate_gen") dbl(c.learning_rate_gen);
  else if (key == "learning_rate_disc") dbl(c.learning_rate_disc);
  else if (key == "temperature_start") dbl(c.temperature_start);
  else if (key == "temperature_end") dbl(c.temperature_end);
  else if (key == "seed") {
    if (!detail::parse_u64(v, c.seed)) bad("expected a nonnegative integer");
  } else if (key == "checkpoint_interval") integer(c.checkpoint_interval);
  else if (key == "select_k_fraction") dbl(c.select_k_fraction);
  else errors.push_back(key + ": unknown key");
}

inline std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> p;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) p.push_back(msg);
  };
  const double ls[] = {weights.lambda0, weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4};
  for (int i = 0; i < 5; ++i)
    check(std::isfinite(ls[i]) && ls[i] >= 0, "lambda" + std::to_string(i) + ": must be finite and >= 0");
  check(num_components >= 1, "num_components: must be >= 1");
  check(latent_dim >= 1, "latent_dim: must be >= 1");
  const int down = channel_widths.size() <= 8 ? 1 << channel_widths.size() : 1;
  check(patch_size >= 1 && patch_size % down == 0,
        "patch_size: must be a positive multiple of " + std::to_string(down));
  for (int w : channel_widths) check(w >= 1, "channel_widths: every width must be >= 1");
  check(channel_widths.size() <= 8, "channel_widths: at most 8 stages");
  check(shared_stages >= 0, "shared_stages: must be >= 0");
  check(patches_per_image >= 1, "patches_per_image: must be >= 1");
  check(batch_size >= 1, "batch_size: must be >= 1");
  check(steps >= 0, "steps: must be >= 0");
  check(learning_rate_gen > 0 && learning_rate_gen < 1, "learning_rate_gen: must lie in (0, 1)");
  check(learning_rate_disc > 0 && learning_rate_disc < 1, "learning_rate_disc: must lie in (0, 1)");
  check(temperature_start > 0 && std::isfinite(temperature_start), "temperature_start: must be > 0");
  check(temperature_end > 0 && std::isfinite(temperature_end), "temperature_end: must be > 0");
  check(checkpoint_interval >= 1, "checkpoint_interval: must be >= 1");
  check(select_k_fraction > 0 && select_k_fraction <= 1, "select_k_fraction: must lie in (0, 1]");
  return p;
}

inline std::string describe_problems(const std::vector<std::string>& p) {
  std::string s = "invalid config:";
  for (const auto& m : p) s += "\n  " + m;
  return s;
}

inline void TrainConfig::validate() const {
  const auto p = problems();
  if (!p.empty()) throw ConfigError(describe_problems(p));
}

/// Parses `key = value` lines (`#` starts a comment) over `base`. Collects
/// every syntax and value error before throwing. Does not run validate().
inline TrainConfig parse_config_text(const std::string& text, TrainConfig base = {},
                                     std::vector<std::string>* errors_out = nullptr) {
  std::vector<std::string> errors;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
      continue;
    }
    set_config_value(base, detail::trim(line.substr(0, eq)), line.substr(eq + 1), errors);
  }
  if (errors_out) {
    errors_out->insert(errors_out->end(), errors.begin(), errors.end());
  } else if (!errors.empty()) {
    throw ConfigError(describe_problems(errors));
  }
  return base;
}

inline TrainConfig load_config_file(const std::filesystem::path& path, std::vector<std::string>* errors_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), {}, errors_out);
}

/// Fields that may differ between a checkpoint and the run resuming from it.
inline bool resumable_field(const std::string& key) { return key == "steps" || key == "checkpoint_interval"; }

/// Throws IncompatibleError naming the first field that differs.
inline void check_config_compatible(const TrainConfig& saved, const TrainConfig& expected) {
  const auto a = config_entries(saved), b = config_entries(expected);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!resumable_field(a[i].first) && a[i].second != b[i].second)
      throw IncompatibleError("checkpoint config mismatch in field '" + a[i].first + "': checkpoint has " +
                              a[i].second + ", expected " + b[i].second);
}

// ---------------------------------------------------------------------------
// Training state and one optimization step

template <class T>
struct TrainState {
  TrainConfig config;
  ModelBundle<T> bundle;
  Adam<T> gen_opt;
  Adam<T> disc_opt;
  long step = 0;  // completed steps
  Rng rng;
};

template <class T>
TrainState<T> init_state(const TrainConfig& cfg) {
  TrainState<T> s;
  s.config = cfg;
  s.bundle = init_params<T>(cfg.net_spec(), cfg.seed);
  s.gen_opt = Adam<T>(cfg.learning_rate_gen);
  s.disc_opt = Adam<T>(cfg.learning_rate_disc);
  s.rng = Rng(detail::splitmix64(cfg.seed));
  return s;
}

template <class T>
std::vector<Var<T>> side_params(const ModelBundle<T>& b, Side side) {
  std::vector<Var<T>> out;
  b.for_each_param([&](const std::string&, const Var<T>& v, Side s) {
    if (s == side) out.push_back(v);
  });
  return out;
}

/// FNV-1a over the raw bytes of every parameter on one side.
template <class T>
std::uint64_t parameter_hash(const ModelBundle<T>& b, Side side) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  b.for_each_param([&](const std::string&, const Var<T>& v, Side s) {
    if (s != side) return;
    const auto& vals = v.value();
    const auto* bytes = reinterpret_cast<const unsigned char*>(vals.data());
    for (std::size_t i = 0; i < vals.size() * sizeof(T); ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  });
  return h;
}

enum class Phase { Discriminator, Generator };

/// Optional observer called after each phase's parameter update.
using PhaseHook = std::function<void(Phase)>;

namespace detail {
template <class T>
void check_params_finite(const ModelBundle<T>& b, long step) {
  b.for_each_param([&](const std::string& name, const Var<T>& v, Side) {
    if (!all_finite(v.value()))
      throw NumericError("training aborted at step " + std::to_string(step) + ": parameter " + name +
                         " became non-finite");
  });
}
}  // namespace detail

/// One discriminator update on total_disc, then one update of the encoder,
/// generator, prior and variance parameters on total_gen against the updated
/// (frozen) discriminators. Returns the losses the two updates were computed
/// from. Learning rates are taken from the state's optimizers.
template <class T>
LossReport train_step(TrainState<T>& s, const Var<T>& batch_a, const Var<T>& batch_b, const PhaseHook& hook = {}) {
  const auto& cfg = s.config;
  const auto spec = cfg.net_spec();
  check_patch_batch(spec, batch_a);
  check_patch_batch(spec, batch_b);
  require(batch_a.dim(0) > 0 && batch_b.dim(0) > 0, "train_step: batches must be nonempty");
  const LossContext ctx{cfg.temperature_at(s.step), cfg.kl_estimator, SampleMode::Relaxed};
  auto& b = s.bundle;
  const long step_no = s.step + 1;

  const auto g = [&] {
    try {
      return build_generator_graph(b, batch_a, batch_b, cfg.weights, ctx, s.rng);
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(step_no) + ": " + e.what());
    }
  }();
  const auto [disc_1, disc_2] = discriminator_terms(b, g);
  const Var<T> total_disc = disc_1 + disc_2;
  LossReport r;
  r.disc_1 = disc_1.item();
  r.disc_2 = disc_2.item();
  r.total_disc = total_disc.item();
  r.vae_1 = g.vae_1.item();
  r.vae_2 = g.vae_2.item();
  r.cc_1 = g.cc_1.item();
  r.cc_2 = g.cc_2.item();
  auto abort_if_bad = [&] {
    if (const auto bad = r.first_non_finite(); !bad.empty())
      throw NumericError("training aborted at step " + std::to_string(step_no) + ": loss term " + bad +
                         " is non-finite");
  };
  abort_if_bad();

  auto dparams = side_params(b, Side::Discriminator);
  for (auto& p : dparams) p.zero_grad();
  backward(total_disc);
  s.disc_opt.step(dparams);
  if (hook) hook(Phase::Discriminator);

  const auto [gan_1, gan_2] = generator_gan_terms(b, g, cfg.weights);
  const Var<T> total_gen = sum_gen(g, gan_1, gan_2);
  r.gan_1 = gan_1.item();
  r.gan_2 = gan_2.item();
  r.total_gen = total_gen.item();
  abort_if_bad();

  auto gparams = side_params(b, Side::Generator);
  for (auto& p : gparams) p.zero_grad();
  backward(total_gen);
  s.gen_opt.step(gparams);
  if (hook) hook(Phase::Generator);

  detail::check_params_finite(b, step_no);
  s.step = step_no;
  return r;
}

/// batch_size images drawn uniformly with replacement, patches_per_image
/// random patches from each.
template <class T>
Var<T> sample_domain_batch(const std::vector<Image>& images, const TrainConfig& cfg, Rng& rng) {
  require(!images.empty(), "sample_domain_batch: no images");
  std::vector<Patch> patches;
  for (int i = 0; i < cfg.batch_size; ++i) {
    const auto& img = images[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1))];
    for (auto& sp : sample_random_patches(img, cfg.patches_per_image, cfg.patch_size, rng))
      patches.push_back(std::move(sp.patch));
  }
  return patch_batch<T>(patches, cfg.patch_size);
}

/// Runs steps until state.step == target_step. Calls on_step after each step.
template <class T>
void run_steps(TrainState<T>& s, const std::vector<Image>& domain_a, const std::vector<Image>& domain_b,
               long target_step, const std::function<void(const TrainState<T>&, const LossReport&)>& on_step = {}) {
  while (s.step < target_step) {
    const auto a = sample_domain_batch<T>(domain_a, s.config, s.rng);
    const auto b = sample_domain_batch<T>(domain_b, s.config, s.rng);
    const auto r = train_step(s, a, b);
    if (on_step) on_step(s, r);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// "MIXLATCK" | u32 version | u64 config length | config text | u32 block count
// | blocks: u32 name length, name, u8 dtype, u32 rank, u64 dims..., payload.

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'X', 'L', 'A', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U64 = 2, Bytes = 3 };

template <class T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U64: return 8;
    case DType::Bytes: return 1;
  }
  return 0;
}

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Block {
  std::string name;
  DType dtype = DType::Bytes;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> payload;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<unsigned char> out;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& d) : data_(d) {}
  template <class U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, need(sizeof(U), what), sizeof(U));
    return v;
  }
  const unsigned char* need(std::size_t n, const char* what) {
    if (n > data_.size() - pos_) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
    const auto* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::vector<unsigned char>& data_;
  std::size_t pos_ = 0;
};

template <class T>
Block values_block(const std::string& name, const std::vector<T>& v, const Shape& shape) {
  Block b{name, dtype_of<T>(), {}, {}};
  for (int d : shape) b.dims.push_back(static_cast<std::uint64_t>(d));
  b.payload.resize(v.size() * sizeof(T));
  std::memcpy(b.payload.data(), v.data(), b.payload.size());
  return b;
}

inline Block u64_block(const std::string& name, std::uint64_t v) {
  Block b{name, DType::U64, {1}, std::vector<unsigned char>(8)};
  std::memcpy(b.payload.data(), &v, 8);
  return b;
}

inline Block text_block(const std::string& name, const std::string& s) {
  return Block{name, DType::Bytes, {s.size()}, std::vector<unsigned char>(s.begin(), s.end())};
}

}  // namespace detail

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<Block> blocks;

  const Block* find(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
};

inline std::vector<unsigned char> serialize(const CheckpointFile& f) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 8);
  w.put<std::uint32_t>(f.version);
  w.put<std::uint64_t>(f.config_text.size());
  w.put_bytes(f.config_text.data(), f.config_text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.blocks.size()));
  for (const auto& b : f.blocks) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name.data(), b.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.dims.size()));
    for (auto d : b.dims) w.put<std::uint64_t>(d);
    w.put_bytes(b.payload.data(), b.payload.size());
  }
  return std::move(w.out);
}

inline CheckpointFile parse_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  CheckpointFile f;
  if (std::memcmp(r.need(8, "magic"), kCheckpointMagic, 8) != 0) throw ParseError("not a checkpoint (bad magic)", 0);
  f.version = r.get<std::uint32_t>("version");
  if (f.version != kCheckpointVersion)
    throw IncompatibleError("checkpoint version " + std::to_string(f.version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = r.get<std::uint64_t>("config length");
  const auto* cfg = r.need(cfg_len, "config text");
  f.config_text.assign(reinterpret_cast<const char*>(cfg), cfg_len);
  const auto count = r.get<std::uint32_t>("block count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Block b;
    const auto name_len = r.get<std::uint32_t>("block name length");
    const auto* name = r.need(name_len, "block name");
    b.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::size_t at = r.pos();
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt > 3) throw ParseError("block " + b.name + ": unknown dtype " + std::to_string(dt), at);
    b.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw ParseError("block " + b.name + ": implausible rank", at);
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.dims.push_back(r.get<std::uint64_t>("dims"));
      n *= b.dims.back();
    }
    const std::uint64_t nbytes = n * dtype_size(b.dtype);
    if (nbytes > bytes.size()) throw ParseError("block " + b.name + ": payload larger than file", r.pos());
    const auto* p = r.need(static_cast<std::size_t>(nbytes), "payload");
    b.payload.assign(p, p + nbytes);
    f.blocks.push_back(std::move(b));
  }
  if (!r.done()) throw ParseError("trailing bytes after last block", r.pos());
  return f;
}

template <class T>
CheckpointFile to_checkpoint(const TrainState<T>& s) {
  CheckpointFile f;
  f.config_text = to_text(s.config);
  s.bundle.for_each_param([&](const std::string& name, const Var<T>& v, Side) {
    f.blocks.push_back(detail::values_block("param/" + name, v.values(), v.shape()));
  });
  auto add_opt = [&](const std::string& prefix, const Adam<T>& opt, Side side) {
    f.blocks.push_back(detail::u64_block(prefix + "/steps", static_cast<std::uint64_t>(opt.steps())));
    if (opt.first_moments().empty()) return;
    std::size_t i = 0;
    s.bundle.for_each_param([&](const std::string& name, const Var<T>& v, Side sd) {
      if (sd != side) return;
      f.blocks.push_back(detail::values_block(prefix + "/m/" + name, opt.first_moments()[i], v.shape()));
      f.blocks.push_back(detail::values_block(prefix + "/v/" + name, opt.second_moments()[i], v.shape()));
      ++i;
    });
  };
  add_opt("adam_gen", s.gen_opt, Side::Generator);
  add_opt("adam_disc", s.disc_opt, Side::Discriminator);
  f.blocks.push_back(detail::u64_block("step", static_cast<std::uint64_t>(s.step)));
  f.blocks.push_back(detail::text_block("rng", s.rng.state()));
  return f;
}

namespace detail {

template <class T>
std::vector<T> read_values(const CheckpointFile& f, const std::string& name, const Shape& shape) {
  const Block* b = f.find(name);
  if (!b) throw ParseError("checkpoint lacks block " + name, 0);
  if (b->dtype != dtype_of<T>())
    throw IncompatibleError("block " + name + " has a different floating-point type than requested");
  std::vector<std::uint64_t> want;
  for (int d : shape) want.push_back(static_cast<std::uint64_t>(d));
  if (b->dims != want) throw IncompatibleError("block " + name + " has shape differing from the model");
  std::vector<T> v(b->payload.size() / sizeof(T));
  std::memcpy(v.data(), b->payload.data(), b->payload.size());
  return v;
}

inline std::uint64_t read_u64(const CheckpointFile& f, const std::string& name) {
  const Block* b = f.find(name);
  if (!b || b->dtype != DType::U64 || b->payload.size() != 8) throw ParseError("checkpoint lacks u64 block " + name, 0);
  std::uint64_t v;
  std::memcpy(&v, b->payload.data(), 8);
  return v;
}

}  // namespace detail

/// Rebuilds the full state. All blocks are decoded before anything is
/// returned, so a bad file never yields a partial state.
template <class T>
TrainState<T> from_checkpoint(const CheckpointFile& f) {
  std::vector<std::string> errors;
  const TrainConfig cfg = parse_config_text(f.config_text, {}, &errors);
  if (!errors.empty()) throw ParseError("checkpoint config: " + errors.front(), 0);
  TrainState<T> s = init_state<T>(cfg);
  s.bundle.for_each_param([&](const std::string& name, Var<T>& v, Side) {
    const auto vals = detail::read_values<T>(f, "param/" + name, v.shape());
    std::copy(vals.begin(), vals.end(), v.mutable_value().begin());
  });
  auto load_opt = [&](const std::string& prefix, Adam<T>& opt, Side side) {
    const long steps = static_cast<long>(detail::read_u64(f, prefix + "/steps"));
    if (steps == 0) return;
    std::vector<std::vector<T>> first, second;
    s.bundle.for_each_param([&](const std::string& name, const Var<T>& v, Side sd) {
      if (sd != side) return;
      first.push_back(detail::read_values<T>(f, prefix + "/m/" + name, v.shape()));
      second.push_back(detail::read_values<T>(f, prefix + "/v/" + name, v.shape()));
    });
    opt.restore(steps, std::move(first), std::move(second));
  };
  load_opt("adam_gen", s.gen_opt, Side::Generator);
  load_opt("adam_disc", s.disc_opt, Side::Discriminator);
  s.step = static_cast<long>(detail::read_u64(f, "step"));
  const Block* rng = f.find("rng");
  if (!rng || rng->dtype != DType::Bytes) throw ParseError("checkpoint lacks rng state", 0);
  try {
    s.rng.set_state(std::string(rng->payload.begin(), rng->payload.end()));
  } catch (const std::exception& e) {
    throw ParseError(std::string("checkpoint rng state unreadable: ") + e.what(), 0);
  }
  return s;
}

/// Atomic: writes a temporary file then renames it over `path`.
template <class T>
void save_checkpoint(const TrainState<T>& s, const std::filesystem::path& path) {
  detail::write_bytes_atomic(path, serialize(to_checkpoint(s)));
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  try {
    return from_checkpoint<T>(parse_checkpoint(bytes));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

/// Loads and checks that the checkpoint was produced under `expected`
/// (ignoring steps and checkpoint_interval).
template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const TrainConfig& expected) {
  auto s = load_checkpoint<T>(path);
  check_config_compatible(s.config, expected);
  s.config = expected;
  return s;
}

// ---------------------------------------------------------------------------
// File-level training run

struct TrainingData {
  std::vector<Image> domain_a, domain_b;
};

/// Reads every training image up front so missing files fail before step 1.
inline TrainingData load_training_data(const DatasetManifest& m) {
  TrainingData d;
  for (const auto* r : m.with_role(Role::TrainA)) d.domain_a.push_back(load_record_image(m, *r));
  for (const auto* r : m.with_role(Role::TrainB)) d.domain_b.push_back(load_record_image(m, *r));
  if (d.domain_a.empty() || d.domain_b.empty()) throw ConfigError("dataset needs nonempty train_a and train_b");
  return d;
}

inline std::vector<PhantomPair> load_eval_pairs(const DatasetManifest& m, Role role) {
  std::vector<PhantomPair> out;
  for (const auto* r : m.with_role(role)) out.push_back(load_record_pair(m, *r));
  return out;
}

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  std::function<void(long step, const LossReport&)> on_step;
};

struct TrainResult {
  TrainState<float> state;
  std::filesystem::path final_checkpoint;
  std::filesystem::path loss_log;
  std::vector<std::filesystem::path> checkpoints;
};

inline constexpr const char* kLossLogFile = "loss_log.jsonl";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";

inline std::string checkpoint_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06ld.ckpt", step);
  return buf;
}

namespace detail {
/// Keeps loss-log lines whose step is <= keep_through.
inline void truncate_loss_log(const std::filesystem::path& path, long keep_through) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("step")) break;
      if (j["step"].get<long>() > keep_through) break;
      kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}
}  // namespace detail

/// Trains on the manifest's train_a/train_b images, writing checkpoints every
/// checkpoint_interval steps, final.ckpt and a JSON-lines loss log into out_dir.
inline TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  const auto data = load_training_data(manifest);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  TrainResult res;
  res.loss_log = out_dir / kLossLogFile;
  if (opts.resume_from) {
    res.state = load_checkpoint<float>(*opts.resume_from, cfg);
    detail::truncate_loss_log(res.loss_log, res.state.step);
  } else {
    res.state = init_state<float>(cfg);
    std::ofstream(res.loss_log, std::ios::trunc);
  }
  std::ofstream log(res.loss_log, std::ios::app);
  if (!log) throw IoError("cannot write " + res.loss_log.string());
  run_steps<float>(res.state, data.domain_a, data.domain_b, cfg.steps,
                   [&](const TrainState<float>& s, const LossReport& r) {
                     log << to_json(r, s.step).dump() << "\n";
                     if (s.step % cfg.checkpoint_interval == 0) {
                       log.flush();
                       res.checkpoints.push_back(out_dir / checkpoint_name(s.step));
                       save_checkpoint(s, res.checkpoints.back());
                     }
                     if (opts.on_step) opts.on_step(s.step, r);
                   });
  log.flush();
  res.final_checkpoint = out_dir / kFinalCheckpoint;
  save_checkpoint(res.state, res.final_checkpoint);
  return res;
}

// ---------------------------------------------------------------------------
// K selection

struct SelectKRow {
  int k = 0;
  long steps = 0;
  double dice = 0, dice_std = 0, plaque_retention = 0, precision = 0, recall = 0, organ_dice = 0;
};

struct SelectKResult {
  int best_k = 0;
  std::vector<SelectKRow> table;  // in grid order
};

/// Highest Dice wins; equal Dice goes to the smaller K.
inline int pick_best_k(const std::vector<SelectKRow>& rows) {
  require(!rows.empty(), "pick_best_k: empty table");
  const SelectKRow* best = &rows.front();
  for (const auto& r : rows)
    if (r.dice > best->dice || (r.dice == best->dice && r.k < best->k)) best = &r;
  return best->k;
}

inline nlohmann::ordered_json to_json(const SelectKResult& r) {
  nlohmann::ordered_json j;
  j["best_k"] = r.best_k;
  j["table"] = nlohmann::ordered_json::array();
  for (const auto& row : r.table)
    j["table"].push_back({{"k", row.k},
                          {"steps", row.steps},
                          {"dice", row.dice},
                          {"dice_std", row.dice_std},
                          {"plaque_retention", row.plaque_retention},
                          {"precision", row.precision},
                          {"recall", row.recall},
                          {"organ_dice", row.organ_dice}});
  return j;
}

inline std::string format_table(const SelectKResult& r) {
  std::string s = "     K   steps    dice (std)        retention  precision  recall   organ_dice\n";
  char buf[160];
  for (const auto& row : r.table) {
    std::snprintf(buf, sizeof buf, "%6d %7ld   %.4f (%.4f)   %.4f     %.4f     %.4f   %.4f\n", row.k, row.steps,
                  row.dice, row.dice_std, row.plaque_retention, row.precision, row.recall, row.organ_dice);
    s += buf;
  }
  s += "best K = " + std::to_string(r.best_k) + "\n";
  return s;
}

struct SelectKOptions {
  Thresholds thresholds;
  int threads = 1;
  std::function<void(const SelectKRow&)> on_row;
};

/// Trains one model per K for select_k_fraction of base.steps, translates the
/// validation pairs 1->2 and ranks K by mean plaque-pixel Dice.
inline SelectKResult select_k(const DatasetManifest& manifest, const TrainConfig& base, const std::vector<int>& grid,
                              const SelectKOptions& opts = {}) {
  if (grid.empty()) throw ConfigError("select_k: k grid is empty");
  base.validate();
  const auto data = load_training_data(manifest);
  const auto val = load_eval_pairs(manifest, Role::Val);
  if (val.empty()) throw ConfigError("select_k: dataset has no validation pairs");
  SelectKResult res;
  for (int k : grid) {
    TrainConfig cfg = base;
    cfg.num_components = k;
    cfg.steps = std::max<long>(1, std::lround(base.select_k_fraction * static_cast<double>(base.steps)));
    cfg.validate();
    auto state = init_state<float>(cfg);
    run_steps<float>(state, data.domain_a, data.domain_b, cfg.steps);
    const auto report = evaluate_pairs(state.bundle, val, Direction::AtoB, opts.thresholds, 0, opts.threads);
    SelectKRow row;
    row.k = k;
    row.steps = cfg.steps;
    const auto dice = report.aggregate(&StructureMetrics::dice);
    row.dice = dice.mean;
    row.dice_std = dice.std;
    row.plaque_retention = report.aggregate(&StructureMetrics::plaque_retention).mean;
    row.precision = report.aggregate(&StructureMetrics::precision).mean;
    row.recall = report.aggregate(&StructureMetrics::recall).mean;
    row.organ_dice = report.aggregate(&StructureMetrics::organ_dice).mean;
    res.table.push_back(row);
    if (opts.on_row) opts.on_row(row);
  }
  res.best_k = pick_best_k(res.table);
  return res;
}

}  // namespace mixlat
