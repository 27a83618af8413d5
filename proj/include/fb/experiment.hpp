#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fb/attacks.hpp"
#include "fb/config.hpp"
#include "fb/encoder.hpp"
#include "fb/gradient_service.hpp"
#include "fb/image_io.hpp"
#include "fb/perturbation_io.hpp"

namespace fb {

// Filesystem-safe tag for an epsilon label: "1/255" -> "1_255".
inline std::string eps_tag(const std::string& label) {
  std::string out = label;
  std::replace(out.begin(), out.end(), '/', '_');
  return out;
}

inline std::string eps_label_from_tag(const std::string& tag) {
  std::string out = tag;
  std::replace(out.begin(), out.end(), '_', '/');
  return out;
}

inline std::unique_ptr<EncoderOracle> make_encoder_oracle(
    const EncoderSelection& sel) {
  if (sel.kind == "toy") {
    return std::make_unique<ToyConvEncoder>(sel.toy);
  }
  std::string address = sel.address;
  if (address.empty()) {
    const char* env = std::getenv("FB_GRADIENT_SERVICE");
    if (env) address = env;
  }
  if (address.empty()) {
    throw ConfigError(
        "remote encoder selected but no address given (set encoder.address "
        "or FB_GRADIENT_SERVICE)");
  }
  return std::make_unique<RemoteEncoderOracle>(address);
}

inline IngestOptions ingest_options(const DatasetSelection& ds) {
  IngestOptions opts;
  if (ds.resize == "shortest_edge") {
    opts.policy = ResizePolicy::SHORTEST_EDGE;
    opts.shortest_edge = ds.shortest_edge;
  }
  return opts;
}

// Image list: explicit paths plus every .png/.jpg/.jpeg under images_dir,
// sorted by path for deterministic job numbering.
inline std::vector<std::string> resolve_image_paths(const DatasetSelection& ds) {
  std::vector<std::string> paths = ds.images;
  if (!ds.images_dir.empty()) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(ds.images_dir)) {
      throw ConfigError("dataset.images_dir is not a directory: " +
                        ds.images_dir);
    }
    for (const auto& entry : fs::directory_iterator(ds.images_dir)) {
      if (!entry.is_regular_file()) continue;
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
        paths.push_back(entry.path().string());
      }
    }
  }
  std::sort(paths.begin(), paths.end());
  paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
  if (paths.empty()) throw ConfigError("no input images given");
  return paths;
}

struct ExperimentOutput {
  std::vector<std::string> perturbation_files;  // sorted
};

namespace detail {

// Minimal deterministic worker pool: jobs are independent and write disjoint
// files, so scheduling order cannot change any output byte.
inline void run_jobs(int jobs, std::size_t n,
                     const std::function<void(std::size_t)>& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = std::min<int>(jobs, static_cast<int>(n));
  pool.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// Image-specific sweep: one attack per (image, epsilon), persisted under
// <output_dir>/<method>/<eps_tag>/<image_id>.fbp. Job seeds derive from the
// experiment seed plus the image index in sorted order.
inline ExperimentOutput run_attack_experiment(const ExperimentConfig& cfg,
                                              const EncoderOracle& oracle) {
  namespace fs = std::filesystem;
  const std::vector<std::string> paths = resolve_image_paths(cfg.dataset);
  const IngestOptions opts = ingest_options(cfg.dataset);
  std::vector<ImageTensor> images;
  images.reserve(paths.size());
  for (const auto& p : paths) images.push_back(ingest_image(p, opts));

  struct Job {
    std::size_t image_index;
    std::string eps_label;
    double epsilon;
  };
  std::vector<Job> all_jobs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& label : cfg.attack.epsilon_labels) {
      all_jobs.push_back(Job{i, label, parse_epsilon(label)});
    }
  }

  ExperimentOutput out;
  std::mutex out_mu;
  detail::run_jobs(cfg.jobs, all_jobs.size(), [&](std::size_t k) {
    const Job& job = all_jobs[k];
    const ImageTensor& image = images[job.image_index];
    AttackConfig acfg;
    acfg.epsilon = job.epsilon;
    acfg.iterations = cfg.attack.iterations;
    acfg.step_size = cfg.attack.step_size;
    acfg.seed = cfg.seed + job.image_index;
    acfg.init = cfg.attack.init;

    Perturbation p;
    if (cfg.attack.method == "pgd") {
      p = pgd_attack(oracle, image, acfg).first;
    } else if (cfg.attack.method == "apgd") {
      p = apgd_attack(oracle, image, acfg).first;
    } else {
      MultiCropConfig mc;
      mc.base = acfg;
      mc.p_crop = cfg.attack.p_crop;
      mc.min_frac = cfg.attack.min_frac;
      mc.max_frac = cfg.attack.max_frac;
      p = multicrop_pgd(oracle, image, mc).first;
    }
    const fs::path dir =
        fs::path(cfg.output_dir) / cfg.attack.method / eps_tag(job.eps_label);
    fs::create_directories(dir);
    const std::string file = (dir / (image.id() + ".fbp")).string();
    save_perturbation(p, file, cfg.created_at);
    std::lock_guard<std::mutex> lock(out_mu);
    out.perturbation_files.push_back(file);
  });
  std::sort(out.perturbation_files.begin(), out.perturbation_files.end());
  return out;
}

// Universal training per epsilon, persisted under
// <output_dir>/universal/<eps_tag>/universal.fbp.
inline ExperimentOutput run_universal_experiment(const ExperimentConfig& cfg,
                                                 const EncoderOracle& oracle) {
  namespace fs = std::filesystem;
  const std::vector<std::string> paths = resolve_image_paths(cfg.dataset);
  const IngestOptions opts = ingest_options(cfg.dataset);
  std::vector<ImageTensor> pool;
  pool.reserve(paths.size());
  for (const auto& p : paths) pool.push_back(ingest_image(p, opts));
  if (cfg.universal.pool > 0) {
    if (static_cast<std::size_t>(cfg.universal.pool) > pool.size()) {
      throw ConfigError("universal.pool exceeds the number of images");
    }
    pool.resize(static_cast<std::size_t>(cfg.universal.pool));
  }

  ExperimentOutput out;
  for (const auto& label : cfg.universal.epsilon_labels) {
    UniversalConfig ucfg;
    ucfg.epsilon = parse_epsilon(label);
    ucfg.iterations = cfg.universal.iterations;
    ucfg.step_size = parse_epsilon(cfg.universal.step_size);
    ucfg.native_height = cfg.universal.native_height;
    ucfg.native_width = cfg.universal.native_width;
    ucfg.batch_size = cfg.universal.batch;
    ucfg.seed = cfg.seed;
    ucfg.init = cfg.universal.init;
    ucfg.normalize_pre_pullback = cfg.universal.normalize_pre_pullback;
    auto [p, trace] = universal_train(oracle, pool, ucfg);
    const fs::path dir = fs::path(cfg.output_dir) / "universal" / eps_tag(label);
    fs::create_directories(dir);
    const std::string file = (dir / "universal.fbp").string();
    save_perturbation(p, file, cfg.created_at);
    out.perturbation_files.push_back(file);
  }
  std::sort(out.perturbation_files.begin(), out.perturbation_files.end());
  return out;
}

inline ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  std::unique_ptr<EncoderOracle> oracle = make_encoder_oracle(cfg.encoder);
  if (cfg.kind == "universal") {
    return run_universal_experiment(cfg, *oracle);
  }
  return run_attack_experiment(cfg, *oracle);
}

}  // namespace fb
