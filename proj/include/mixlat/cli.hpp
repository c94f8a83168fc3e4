#pragma once

// Command-line front end. run() is the whole program; tools/mixlat.cpp only
// forwards argv so tests can drive commands in-process.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mixlat/eval.hpp"
#include "mixlat/phantom.hpp"
#include "mixlat/training.hpp"

#ifndef MIXLAT_VERSION
#define MIXLAT_VERSION "unknown"
#endif

namespace mixlat::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr const char* kThreadsEnv = "MIXLAT_THREADS";
inline constexpr const char* kRunManifestFile = "run_manifest.json";

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

inline std::string file_hash(const fs::path& p) {
  const auto bytes = detail::read_bytes(p);
  return hex64(fnv1a(std::string(bytes.begin(), bytes.end())));
}

struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::string config_path, config_hash;
  std::string dataset_manifest_hash;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> outputs;
  double duration_seconds = 0;
};

inline nlohmann::ordered_json to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["args"] = m.args;
  j["config_path"] = m.config_path;
  j["config_hash"] = m.config_hash;
  j["dataset_manifest_hash"] = m.dataset_manifest_hash;
  j["code_version"] = MIXLAT_VERSION;
  j["seed"] = m.seed ? nlohmann::ordered_json(*m.seed) : nlohmann::ordered_json(nullptr);
  j["outputs"] = m.outputs;
  j["duration_seconds"] = m.duration_seconds;
  return j;
}

inline void write_run_manifest(const RunManifest& m, const fs::path& dir) {
  const std::string text = to_json(m).dump(2) + "\n";
  detail::write_bytes_atomic(dir / kRunManifestFile, std::vector<unsigned char>(text.begin(), text.end()));
}

inline int default_threads() {
  if (const char* env = std::getenv(kThreadsEnv)) {
    int n = 0;
    if (detail::parse_int(std::string(env), n) && n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int v = 0;
    if (!detail::parse_int(detail::trim(item), v)) throw ConfigError(what + ": '" + s + "' is not a list of integers");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

/// Accepts either a dataset root or one of its split directories (root/test).
inline std::pair<DatasetManifest, std::optional<Role>> open_dataset(const fs::path& path) {
  if (fs::exists(path / kManifestFile)) return {load_manifest(path), std::nullopt};
  const auto parent = path.has_filename() ? path.parent_path() : path.parent_path().parent_path();
  const auto leaf = (path.has_filename() ? path : path.parent_path()).filename().string();
  if (fs::exists(parent / kManifestFile)) {
    try {
      return {load_manifest(parent), parse_role(leaf)};
    } catch (const ConfigError&) {
    }
  }
  throw IoError("no dataset manifest at " + path.string());
}

inline Direction parse_direction(const std::string& s) {
  if (s == "1to2") return Direction::AtoB;
  if (s == "2to1") return Direction::BtoA;
  throw ConfigError("direction must be 1to2 or 2to1 (got '" + s + "')");
}

/// Registers one --flag per config key; values are applied after the file.
class ConfigFlags {
 public:
  void attach(CLI::App& app) {
    for (const auto& [key, def] : config_entries(TrainConfig{})) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app.add_option("--" + flag, values_[key], "config key " + key + " (default " + def + ")");
    }
    app.add_option("--config", path_, "config file (key = value lines)");
  }

  /// File first, then flags. Throws ConfigError listing every invalid field.
  TrainConfig resolve() const {
    std::vector<std::string> errors;
    TrainConfig cfg = path_.empty() ? TrainConfig{} : load_config_file(path_, &errors);
    for (const auto& [key, value] : values_)
      if (!value.empty()) set_config_value(cfg, key, value, errors);
    for (auto& p : cfg.problems()) errors.push_back(p);
    if (!errors.empty()) throw ConfigError(describe_problems(errors));
    return cfg;
  }

  const std::string& path() const { return path_; }

  void fill(RunManifest& m, const TrainConfig& cfg) const {
    m.config_path = path_;
    m.config_hash = hex64(fnv1a(to_text(cfg)));
    m.seed = cfg.seed;
  }

 private:
  std::map<std::string, std::string> values_;
  std::string path_;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

class Program {
 public:
  explicit Program(Streams io) : io_(io), app_("mixlat: unpaired patch translation with a shared mixture latent", "mixlat") {
    app_.require_subcommand(1);
    app_.set_version_flag("--version", MIXLAT_VERSION);
    app_.add_option("--threads", threads_, "worker threads (default $" + std::string(kThreadsEnv) + " or all cores)")
        ->check(CLI::PositiveNumber);
    app_.add_flag("--quiet", quiet_, "suppress progress output");
    add_dataset();
    add_train();
    add_translate();
    add_eval();
    add_select_k();
    add_dump_latent();
  }

  int run(std::vector<std::string> args) {
    manifest_.args = args;
    std::reverse(args.begin(), args.end());
    try {
      app_.parse(args);
    } catch (const CLI::CallForHelp& e) {
      return app_.exit(e, io_.out, io_.err);
    } catch (const CLI::CallForAllHelp& e) {
      return app_.exit(e, io_.out, io_.err);
    } catch (const CLI::CallForVersion& e) {
      return app_.exit(e, io_.out, io_.err);
    } catch (const CLI::ParseError& e) {
      app_.exit(e, io_.out, io_.err);
      return kExitUsage;
    }
    if (threads_ < 1) threads_ = default_threads();
    const auto start = std::chrono::steady_clock::now();
    std::string stage = "setup";
    try {
      for (auto* sub : app_.get_subcommands()) {
        manifest_.command = sub->get_name();
        stage = sub->get_name();
        action_();
      }
    } catch (const ConfigError& e) {
      io_.err << "error [" << stage << "]: " << e.what() << "\n";
      return kExitUsage;
    } catch (const std::exception& e) {
      io_.err << "error [" << stage << "]: " << e.what() << "\n";
      return kExitFailure;
    }
    manifest_.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!run_dir_.empty()) {
      try {
        write_run_manifest(manifest_, run_dir_);
      } catch (const std::exception& e) {
        io_.err << "error [" << manifest_.command << "]: " << e.what() << "\n";
        return kExitFailure;
      }
    }
    return kExitOk;
  }

 private:
  void log(const std::string& line) {
    if (!quiet_) io_.err << line << "\n";
  }

  void add_dataset() {
    auto* c = app_.add_subcommand("dataset", "generate a synthetic two-domain phantom dataset");
    c->add_option("--out", ds_out_, "dataset root")->required();
    c->add_option("--seed", ds_seed_, "dataset seed");
    c->add_option("--train-a", counts_.train_a, "domain-1 training images")->check(CLI::PositiveNumber);
    c->add_option("--train-b", counts_.train_b, "domain-2 training images")->check(CLI::PositiveNumber);
    c->add_option("--val", counts_.val, "validation pairs")->check(CLI::PositiveNumber);
    c->add_option("--test", counts_.test, "test pairs")->check(CLI::PositiveNumber);
    c->add_option("--phantom", phantom_file_, "phantom spec JSON (fields as in phantom.json)");
    c->add_option("--image-size", image_size_, "image side length");
    c->add_option("--noise-sigma", noise_sigma_, "per-domain Gaussian noise");
    c->callback([this] {
      action_ = [this] {
        PhantomSpec spec;
        if (!phantom_file_.empty()) {
          const auto bytes = detail::read_bytes(phantom_file_);
          const auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
          if (j.is_discarded()) throw ParseError(phantom_file_ + ": invalid JSON", 0);
          spec = phantom_spec_from_json(j);
        }
        if (image_size_) spec.image_size = *image_size_;
        if (noise_sigma_) spec.noise_sigma = *noise_sigma_;
        const auto m = build_dataset(spec, counts_, ds_out_, ds_seed_);
        manifest_.seed = ds_seed_;
        manifest_.dataset_manifest_hash = file_hash(fs::path(ds_out_) / kManifestFile);
        manifest_.outputs = {(fs::path(ds_out_) / kManifestFile).string()};
        run_dir_ = ds_out_;
        io_.out << "wrote " << m.records.size() << " records to " << ds_out_ << "\n";
      };
    });
  }

  void add_train() {
    auto* c = app_.add_subcommand("train", "train a model on a dataset's train_a/train_b images");
    c->add_option("--data", data_, "dataset root")->required();
    c->add_option("--out", out_, "run directory")->required();
    c->add_option("--resume", resume_, "checkpoint to resume from");
    train_flags_.attach(*c);
    c->callback([this] {
      action_ = [this] {
        const auto cfg = train_flags_.resolve();
        const auto [m, role] = open_dataset(data_);
        (void)role;
        TrainOptions opts;
        if (!resume_.empty()) opts.resume_from = fs::path(resume_);
        const long report_every = std::max<long>(1, cfg.steps / 20);
        opts.on_step = [&](long step, const LossReport& r) {
          if (step % report_every == 0 || step == cfg.steps)
            log("step " + std::to_string(step) + "/" + std::to_string(cfg.steps) +
                " total_gen=" + detail::fmt_double(r.total_gen) + " total_disc=" + detail::fmt_double(r.total_disc));
        };
        const auto res = train(m, cfg, out_, opts);
        train_flags_.fill(manifest_, cfg);
        manifest_.dataset_manifest_hash = file_hash(m.root / kManifestFile);
        manifest_.outputs = {res.final_checkpoint.string(), res.loss_log.string()};
        for (const auto& p : res.checkpoints) manifest_.outputs.push_back(p.string());
        run_dir_ = out_;
        io_.out << "final checkpoint: " << res.final_checkpoint.string() << "\n";
      };
    });
  }

  void add_translate() {
    auto* c = app_.add_subcommand("translate", "translate one image with a trained checkpoint");
    c->add_option("--ckpt", ckpt_, "checkpoint")->required();
    c->add_option("--input", input_, "input PNG")->required();
    c->add_option("--output", output_, "output PNG (default <input>_<dir>.png)");
    c->add_option("--dir", dir_, "1to2 or 2to1");
    c->add_option("--stride", stride_, "tiling stride (default patch_size/2)");
    c->callback([this] {
      action_ = [this] {
        const auto dir = parse_direction(dir_);
        const auto state = load_checkpoint<float>(ckpt_);
        const auto img = read_image(input_);
        const auto res = translate_image(state.bundle, img, dir, stride_);
        fs::path out = output_;
        if (out.empty()) {
          const fs::path in(input_);
          out = in.parent_path() / (in.stem().string() + "_" + to_string(dir) + ".png");
        }
        if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
        write_image(res.output, out);
        manifest_.outputs = {out.string()};
        manifest_.seed = state.config.seed;
        manifest_.config_hash = hex64(fnv1a(to_text(state.config)));
        run_dir_ = out.parent_path().empty() ? fs::path(".") : out.parent_path();
        io_.out << "wrote " << out.string() << "\n";
      };
    });
  }

  void add_eval() {
    auto* c = app_.add_subcommand("eval", "translate held-out pairs and score structure preservation");
    c->add_option("--ckpt", ckpt_, "checkpoint")->required();
    c->add_option("--data", data_, "dataset root or split directory (root/test)")->required();
    c->add_option("--split", split_, "val or test when --data is a root (default test)");
    c->add_option("--dir", dir_, "1to2 or 2to1");
    c->add_option("--stride", stride_, "tiling stride (default patch_size/2)");
    c->add_option("--out", out_, "metrics JSON (default <ckpt dir>/eval_<split>_<dir>/metrics.json)");
    c->add_option("--detection-threshold", detection_, "plaque binarization threshold");
    c->add_option("--organ-threshold", organ_, "organ binarization threshold");
    c->callback([this] {
      action_ = [this] {
        const auto dir = parse_direction(dir_);
        auto [m, role] = open_dataset(data_);
        const Role r = role ? *role : parse_role(split_.empty() ? "test" : split_);
        if (r != Role::Val && r != Role::Test) throw ConfigError("eval needs the val or test split");
        Thresholds th = Thresholds::from_spec(m.spec);
        if (detection_) th.detection = *detection_;
        if (organ_) th.organ = *organ_;
        const auto state = load_checkpoint<float>(ckpt_);
        const auto pairs = load_eval_pairs(m, r);
        if (pairs.empty()) throw ConfigError("split " + to_string(r) + " has no pairs");
        const auto report = evaluate_pairs(state.bundle, pairs, dir, th, stride_, threads_);
        fs::path out = out_;
        if (out.empty())
          out = fs::path(ckpt_).parent_path() / ("eval_" + to_string(r) + "_" + to_string(dir)) / "metrics.json";
        const auto json = to_json(report);
        const std::string text = json.dump(2) + "\n";
        if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
        detail::write_bytes_atomic(out, std::vector<unsigned char>(text.begin(), text.end()));
        char line[256];
        for (const auto* name : {"dice", "plaque_retention", "precision", "recall", "plaque_mae", "organ_dice"}) {
          const auto& a = json["aggregate"][name];
          std::snprintf(line, sizeof line, "%-18s %.4f +- %.4f\n", name, a["mean"].get<double>(),
                        a["std"].get<double>());
          io_.out << line;
        }
        manifest_.outputs = {out.string()};
        manifest_.seed = state.config.seed;
        manifest_.config_hash = hex64(fnv1a(to_text(state.config)));
        manifest_.dataset_manifest_hash = file_hash(m.root / kManifestFile);
        run_dir_ = out.parent_path().empty() ? fs::path(".") : out.parent_path();
      };
    });
  }

  void add_select_k() {
    auto* c = app_.add_subcommand("select-k", "pick K by validation Dice under a reduced budget");
    c->add_option("--data", data_, "dataset root")->required();
    c->add_option("--out", out_, "output directory")->required();
    c->add_option("--grid", grid_, "comma-separated K values");
    select_flags_.attach(*c);
    c->callback([this] {
      action_ = [this] {
        const auto cfg = select_flags_.resolve();
        const auto grid = parse_int_list(grid_, "--grid");
        const auto [m, role] = open_dataset(data_);
        (void)role;
        SelectKOptions opts;
        opts.thresholds = Thresholds::from_spec(m.spec);
        opts.threads = threads_;
        opts.on_row = [&](const SelectKRow& r) {
          log("K=" + std::to_string(r.k) + " dice=" + detail::fmt_double(r.dice));
        };
        const auto res = select_k(m, cfg, grid, opts);
        fs::create_directories(out_);
        const auto path = fs::path(out_) / "select_k.json";
        const std::string text = to_json(res).dump(2) + "\n";
        detail::write_bytes_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
        io_.out << format_table(res);
        select_flags_.fill(manifest_, cfg);
        manifest_.dataset_manifest_hash = file_hash(m.root / kManifestFile);
        manifest_.outputs = {path.string()};
        run_dir_ = out_;
      };
    });
  }

  void add_dump_latent() {
    auto* c = app_.add_subcommand("dump-latent", "write per-patch component assignments and latent means as CSV");
    c->add_option("--ckpt", ckpt_, "checkpoint")->required();
    c->add_option("--data", data_, "dataset root or split directory")->required();
    c->add_option("--split", split_, "split to sample from (default train_a)");
    c->add_option("--domain", domain_, "encoder domain (1 or 2)")->check(CLI::Range(1, 2));
    c->add_option("--patches", n_patches_, "number of random patches")->check(CLI::PositiveNumber);
    c->add_option("--seed", dump_seed_, "patch sampling seed");
    c->add_option("--out", out_, "CSV path")->required();
    c->callback([this] {
      action_ = [this] {
        auto [m, role] = open_dataset(data_);
        const Role r = role ? *role : parse_role(split_.empty() ? "train_a" : split_);
        const bool paired = r == Role::Val || r == Role::Test;
        std::vector<Image> images;
        for (const auto* rec : m.with_role(r)) {
          if (!paired) images.push_back(load_record_image(m, *rec));
          else images.push_back(read_image(m.root / rec->files[domain_ == 1 ? 0 : 1]));
        }
        if (images.empty()) throw ConfigError("split " + to_string(r) + " has no images");
        const auto state = load_checkpoint<float>(ckpt_);
        Rng rng(dump_seed_);
        const fs::path out(out_);
        if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
        const auto rows = latent_cluster_dump(state.bundle, images, domain_, n_patches_, rng, out);
        io_.out << "wrote " << rows.size() << " rows to " << out.string() << "\n";
        manifest_.outputs = {out.string()};
        manifest_.seed = dump_seed_;
        manifest_.dataset_manifest_hash = file_hash(m.root / kManifestFile);
        run_dir_ = out.parent_path().empty() ? fs::path(".") : out.parent_path();
      };
    });
  }

  Streams io_;
  CLI::App app_;
  int threads_ = 0;
  bool quiet_ = false;
  std::function<void()> action_;
  RunManifest manifest_;
  fs::path run_dir_;

  std::string ds_out_;
  std::uint64_t ds_seed_ = 1;
  DatasetCounts counts_;
  std::string phantom_file_;
  std::optional<int> image_size_;
  std::optional<double> noise_sigma_;

  std::string data_, out_, resume_, ckpt_, input_, output_, split_;
  std::string dir_ = "1to2";
  int stride_ = 0;
  std::optional<double> detection_, organ_;
  ConfigFlags train_flags_, select_flags_;
  std::string grid_ = "1,8,25";
  int domain_ = 1;
  int n_patches_ = 1000;
  std::uint64_t dump_seed_ = 1;
};

/// Full program; returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Program p({out, err});
  return p.run(args);
}

}  // namespace mixlat::cli
