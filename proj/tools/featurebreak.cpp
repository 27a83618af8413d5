// featurebreak: prompt-agnostic adversarial perturbations against promptable
// segmentation encoders, plus the evaluation harness that measures the
// damage. Subcommands: attack, universal, build-evalset, evaluate, render,
// verify, serve.

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fb/attacks.hpp"
#include "fb/config.hpp"
#include "fb/evalset_io.hpp"
#include "fb/evaluation.hpp"
#include "fb/experiment.hpp"
#include "fb/gradient_service.hpp"
#include "fb/image_io.hpp"
#include "fb/masks.hpp"
#include "fb/perturbation_io.hpp"
#include "fb/segmenter.hpp"
#include "fb/version.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitOracle = 3;

struct EncoderFlags {
  std::string kind = "toy";
  std::uint64_t seed = 0;
  double weight_scale = 4.0;
  std::string layers = "6k2s2,12k2s2,18k2s2,24k2s2";
  std::string address;

  void attach(CLI::App* cmd) {
    cmd->add_option("--encoder", kind, "Encoder oracle: toy or remote")
        ->check(CLI::IsMember({"toy", "remote"}))
        ->capture_default_str();
    cmd->add_option("--encoder-seed", seed, "Toy encoder weight seed")
        ->capture_default_str();
    cmd->add_option("--weight-scale", weight_scale,
                    "Toy encoder weight scale")
        ->capture_default_str();
    cmd->add_option("--layers", layers,
                    "Toy conv stack, e.g. 6k2s2,12k2s2,24k2s2")
        ->capture_default_str();
    cmd->add_option("--address", address,
                    "Gradient service address (host:port or unix:/path); "
                    "defaults to FB_GRADIENT_SERVICE");
  }

  fb::EncoderSelection selection() const {
    fb::EncoderSelection sel;
    sel.kind = kind;
    sel.address = address;
    sel.toy.seed = seed;
    sel.toy.weight_scale = weight_scale;
    sel.toy.layers.clear();
    // "6k2s2,12k2s2" -> {channels, kernel, stride} triples.
    std::string item;
    std::istringstream is(layers);
    while (std::getline(is, item, ',')) {
      const std::size_t k = item.find('k');
      const std::size_t s = item.find('s');
      if (k == std::string::npos || s == std::string::npos || s < k) {
        throw fb::ConfigError("bad --layers item: " + item);
      }
      try {
        sel.toy.layers.push_back(fb::ConvLayerSpec{
            std::stoi(item.substr(0, k)),
            std::stoi(item.substr(k + 1, s - k - 1)),
            std::stoi(item.substr(s + 1))});
      } catch (const std::exception&) {
        throw fb::ConfigError("bad --layers item: " + item);
      }
    }
    return sel;
  }
};

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

fb::ImageTensor load_image_checked(const std::string& path, int height,
                                   int width) {
  fb::ImageTensor img = fb::ingest_image(path);
  if (img.height() != height || img.width() != width) {
    throw fb::IoError("image " + path + " does not match the evalset dims");
  }
  return img;
}

// ---------------------------------------------------------------------------
// attack

int run_attack_cmd(const fb::ExperimentConfig& cfg) {
  auto out = fb::run_experiment(cfg);
  std::cout << "wrote " << out.perturbation_files.size()
            << " perturbation file(s) under " << cfg.output_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// build-evalset

int run_build_evalset(const std::vector<std::string>& segmap_paths,
                      const std::vector<std::string>& image_paths,
                      std::int64_t min_area, const std::string& out_path) {
  if (!image_paths.empty() && image_paths.size() != segmap_paths.size()) {
    throw fb::ConfigError(
        "--images must be omitted or match --segmaps in length");
  }
  std::vector<fb::EvalSetEntry> entries;
  for (std::size_t i = 0; i < segmap_paths.size(); ++i) {
    fb::SegMap sm = fb::ingest_segmap(segmap_paths[i]);
    const auto pairs = fb::build_eval_set({sm}, min_area);
    for (const auto& pair : pairs) {
      fb::EvalSetEntry e;
      e.image_id = sm.image_id;
      e.image_path = image_paths.empty() ? "" : image_paths[i];
      e.class_id = pair.instance.class_id;
      e.area = pair.instance.area;
      e.height = sm.height;
      e.width = sm.width;
      e.point = pair.point;
      e.box = fb::box_from_mask(pair.instance.mask);
      e.mask = pair.instance.mask;
      entries.push_back(std::move(e));
    }
  }
  fb::write_evalset_ndjson(entries, out_path);
  std::cout << "evalset: " << entries.size() << " (mask, prompt) pair(s) from "
            << segmap_paths.size() << " map(s) -> " << out_path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct PerturbationCondition {
  std::string method;
  std::string eps_label;
  fb::PerturbationMap map;
};

// Discover <root>/<method>/<eps_tag>/{<image_id>.fbp | universal.fbp}.
std::vector<PerturbationCondition> discover_perturbations(
    const std::string& root, const std::set<std::string>& image_ids) {
  std::vector<PerturbationCondition> out;
  if (root.empty()) return out;
  if (!fs::is_directory(root)) {
    throw fb::IoError("--perturb-root is not a directory: " + root);
  }
  std::vector<fs::path> methods;
  for (const auto& m : fs::directory_iterator(root)) {
    if (m.is_directory()) methods.push_back(m.path());
  }
  std::sort(methods.begin(), methods.end());
  for (const auto& method_dir : methods) {
    std::vector<fs::path> eps_dirs;
    for (const auto& e : fs::directory_iterator(method_dir)) {
      if (e.is_directory()) eps_dirs.push_back(e.path());
    }
    std::sort(eps_dirs.begin(), eps_dirs.end());
    for (const auto& eps_dir : eps_dirs) {
      PerturbationCondition cond;
      cond.method = method_dir.filename().string();
      cond.eps_label = fb::eps_label_from_tag(eps_dir.filename().string());
      const fs::path universal = eps_dir / "universal.fbp";
      if (fs::exists(universal)) {
        const fb::Perturbation p = fb::load_perturbation(universal.string());
        for (const auto& id : image_ids) cond.map[id] = p;
      } else {
        for (const auto& id : image_ids) {
          const fs::path f = eps_dir / (id + ".fbp");
          if (!fs::exists(f)) {
            throw fb::IoError("missing perturbation for image " + id +
                              " under " + eps_dir.string());
          }
          cond.map[id] = fb::load_perturbation(f.string());
        }
      }
      out.push_back(std::move(cond));
    }
  }
  return out;
}

int run_evaluate(const std::string& evalset_path, const std::string& images_dir,
                 const std::string& perturb_root, const EncoderFlags& enc,
                 double tau, const std::string& prompt_kind, bool per_image,
                 bool include_clean, bool cross_encoder,
                 const std::string& records_path,
                 const std::string& summary_path) {
  const auto entries = fb::read_evalset_ndjson(evalset_path);
  if (entries.empty()) throw fb::IoError("evalset is empty: " + evalset_path);

  // Load each image once.
  std::map<std::string, fb::ImageTensor> images;
  std::set<std::string> image_ids;
  for (const auto& e : entries) {
    image_ids.insert(e.image_id);
    if (images.count(e.image_id)) continue;
    std::string path = e.image_path;
    if (!images_dir.empty()) {
      for (const char* ext : {".png", ".jpg", ".jpeg"}) {
        const fs::path candidate = fs::path(images_dir) / (e.image_id + ext);
        if (fs::exists(candidate)) {
          path = candidate.string();
          break;
        }
      }
    }
    if (path.empty()) {
      throw fb::ConfigError("no image path for " + e.image_id +
                            " (record one in the evalset or pass --images-dir)");
    }
    images.emplace(e.image_id, load_image_checked(path, e.height, e.width));
  }

  std::vector<fb::EvalItem> items;
  for (const auto& e : entries) {
    fb::EvalItem item;
    item.image_id = e.image_id;
    item.mask_id = e.image_id + "#c" + std::to_string(e.class_id);
    item.image = images.at(e.image_id);
    item.truth.mask = e.mask;
    item.truth.class_id = e.class_id;
    item.truth.area = e.area;
    item.truth.source_image_id = e.image_id;
    if (prompt_kind == "box") {
      item.prompts.box = e.box;
    } else {
      item.prompts.points = {e.point};
    }
    items.push_back(std::move(item));
  }

  const fb::EncoderSelection sel = enc.selection();
  if (sel.kind != "toy") {
    throw fb::ConfigError(
        "evaluate drives the in-process toy segmenter; --encoder toy only");
  }
  fb::ToyPromptSegmenter segmenter(fb::ToyConvEncoder(sel.toy), tau);

  std::vector<fb::EvaluationRecord> all_records;
  auto run_condition = [&](const std::string& label,
                           const fb::PerturbationMap& map) {
    fb::MiouResult res =
        cross_encoder ? fb::cross_encoder_eval(map, segmenter, items, per_image)
                      : fb::evaluate_miou(segmenter, items, map, per_image);
    std::cout << label << ": mIoU = " << res.miou;
    if (res.failed > 0) std::cout << "  (" << res.failed << " FAILED records)";
    std::cout << "\n";
    all_records.insert(all_records.end(), res.records.begin(),
                       res.records.end());
  };

  if (include_clean) {
    fb::PerturbationMap clean;
    for (const auto& id : image_ids) clean[id] = std::nullopt;
    run_condition("clean", clean);
  }
  for (auto& cond : discover_perturbations(perturb_root, image_ids)) {
    run_condition(cond.method + " @ " + cond.eps_label, cond.map);
  }

  if (!records_path.empty()) {
    fb::write_records_ndjson(all_records, records_path);
    std::cout << "records -> " << records_path << "\n";
  }
  if (!summary_path.empty()) {
    fb::write_summary_csv(fb::summarize_records(all_records), summary_path);
    std::cout << "summary -> " << summary_path << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// render

int run_render(const std::string& image_path,
               const std::vector<std::string>& mask_paths,
               const std::string& out_path) {
  const fb::ImageTensor image = fb::ingest_image(image_path);
  std::vector<fb::Mask2D> masks;
  for (const auto& mp : mask_paths) {
    const fb::ImageTensor m = fb::ingest_image(mp);
    fb::Mask2D mask(m.height(), m.width());
    for (int i = 0; i < m.height(); ++i) {
      for (int j = 0; j < m.width(); ++j) {
        mask.set(i, j, m.tensor()(i, j, 0) > 0.5);
      }
    }
    masks.push_back(std::move(mask));
  }
  fb::render_overlay(image, masks, out_path);
  std::cout << "overlay -> " << out_path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify

int run_verify() {
  int failures = 0;
  auto check = [&](const std::string& name, bool ok) {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
    if (!ok) ++failures;
  };

  {  // Constraint exactness on random triples.
    fb::Rng rng(1);
    bool ok = true;
    for (int trial = 0; trial < 1000 && ok; ++trial) {
      const double eps = rng.uniform(0.0, 0.2);
      fb::Tensor3 xt(8, 8, 3);
      for (double& v : xt.data()) v = rng.uniform01();
      fb::ImageTensor x(xt);
      fb::Tensor3 delta(8, 8, 3);
      for (double& v : delta.data()) v = rng.uniform(-1.0, 1.0);
      const fb::Tensor3 out = fb::project_feasible(x, delta, eps);
      for (std::size_t i = 0; i < out.data().size(); ++i) {
        const double applied = xt.data()[i] + out.data()[i];
        if (std::fabs(out.data()[i]) > eps || applied < 0.0 || applied > 1.0) {
          ok = false;
          break;
        }
      }
      if (!(fb::project_linf(out, eps) == out) ||
          !(fb::clip_to_image_box(x, out) == out)) {
        ok = false;
      }
    }
    check("constraint kernels: ball+box exact, idempotent (1000 triples)", ok);
  }

  {  // Toy encoder gradients against central differences.
    fb::ToyEncoderConfig cfg;
    fb::ToyConvEncoder enc(cfg);
    fb::Rng rng(2);
    bool ok = true;
    for (int trial = 0; trial < 5 && ok; ++trial) {
      fb::Tensor3 x(16, 16, 3);
      for (double& v : x.data()) v = rng.uniform01();
      const std::size_t n = static_cast<std::size_t>(enc.embedding_dim(16, 16));
      std::vector<double> u(n);
      for (double& v : u) v = rng.uniform(-1.0, 1.0);
      fb::Tensor3 d(16, 16, 3);
      double norm = 0.0;
      for (double& v : d.data()) {
        v = rng.uniform(-1.0, 1.0);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : d.data()) v /= norm;
      const double h = 1e-5;
      fb::Tensor3 xp = x, xm = x;
      for (std::size_t i = 0; i < x.data().size(); ++i) {
        xp.data()[i] += h * d.data()[i];
        xm.data()[i] -= h * d.data()[i];
      }
      auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
      };
      const double fd =
          (dot(enc.forward(xp).data, u) - dot(enc.forward(xm).data, u)) /
          (2.0 * h);
      const double an = dot(enc.vjp(x, u).data(), d.data());
      if (std::fabs(fd - an) / std::max(std::fabs(fd), 1e-8) >= 1e-4) ok = false;
    }
    check("toy encoder: vjp matches finite differences (5 probes)", ok);
  }

  {  // Resize adjoint identity.
    fb::Rng rng(3);
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      fb::Tensor3 delta(5, 7, 3);
      for (double& v : delta.data()) v = rng.uniform(-1.0, 1.0);
      fb::Tensor3 y(11, 4, 3);
      for (double& v : y.data()) v = rng.uniform(-1.0, 1.0);
      const fb::Tensor3 fwd = fb::nearest_resize(delta, 11, 4);
      const fb::Tensor3 adj = fb::nearest_resize_adjoint(y, 5, 7);
      double lhs = 0.0, rhs = 0.0;
      for (std::size_t i = 0; i < fwd.data().size(); ++i) {
        lhs += fwd.data()[i] * y.data()[i];
      }
      for (std::size_t i = 0; i < adj.data().size(); ++i) {
        rhs += delta.data()[i] * adj.data()[i];
      }
      if (std::fabs(lhs - rhs) > 1e-10) ok = false;
    }
    check("nearest resize: adjoint dot-product identity", ok);
  }

  {  // Crop sampler stays within fractions.
    fb::Rng rng(4);
    bool ok = true;
    for (int i = 0; i < 10000 && ok; ++i) {
      const fb::CropRegion r = fb::sample_crop_region(100, 100, 0.3, 0.9, rng);
      if (r.crop_height < 30 || r.crop_height > 90 || r.crop_width < 30 ||
          r.crop_width > 90 || r.top + r.crop_height > 100 ||
          r.left + r.crop_width > 100) {
        ok = false;
      }
    }
    check("crop sampler: 10000 draws within [30%, 90%]", ok);
  }

  {  // IoU conventions.
    fb::Mask2D a(4, 4), b(4, 4);
    a.set(0, 0, true);
    b.set(3, 3, true);
    const bool ok = fb::iou(a, a) == 1.0 && fb::iou(a, b) == 0.0 &&
                    fb::iou(fb::Mask2D(4, 4), fb::Mask2D(4, 4)) == 1.0 &&
                    fb::iou(a, fb::Mask2D(4, 4)) == 0.0;
    check("iou: degenerate conventions", ok);
  }

  {  // Attack feasibility end to end.
    fb::ToyEncoderConfig cfg;
    fb::ToyConvEncoder enc(cfg);
    fb::Rng rng(5);
    fb::Tensor3 xt(16, 16, 3);
    for (double& v : xt.data()) v = rng.uniform01();
    fb::ImageTensor x(xt);
    fb::AttackConfig acfg;
    acfg.epsilon = 4.0 / 255.0;
    acfg.iterations = 5;
    auto [p, trace] = fb::pgd_attack(enc, x, acfg);
    bool ok = p.delta.max_abs() <= acfg.epsilon;
    for (std::size_t i = 0; i < p.delta.data().size() && ok; ++i) {
      const double v = xt.data()[i] + p.delta.data()[i];
      if (v < 0.0 || v > 1.0) ok = false;
    }
    ok = ok && trace.best_objective > 0.0;
    check("pgd attack: feasible and effective on the toy encoder", ok);
  }

  if (failures == 0) {
    std::cout << "verify: all suites passed\n";
    return kExitOk;
  }
  std::cout << "verify: " << failures << " suite(s) failed\n";
  return kExitError;
}

// ---------------------------------------------------------------------------
// serve

int run_serve(const EncoderFlags& enc, bool stdio, const std::string& listen) {
  const fb::EncoderSelection sel = enc.selection();
  if (sel.kind != "toy") {
    throw fb::ConfigError("serve hosts the in-process toy encoder only");
  }
  fb::ToyConvEncoder oracle(sel.toy);
  fb::GradientService service(oracle);
  if (stdio) {
    service.serve_fd(0, 1);
    return kExitOk;
  }
  const std::size_t colon = listen.find_last_of(':');
  if (colon == std::string::npos) {
    throw fb::ConfigError("--listen must be host:port");
  }
  const std::string host = listen.substr(0, colon);
  const int port = std::stoi(listen.substr(colon + 1));
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw fb::EncoderUnavailableError("socket() failed");
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  addr.sin_addr.s_addr =
      host == "0.0.0.0" ? INADDR_ANY : inet_addr(host.c_str());
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd, 8) != 0) {
    ::close(fd);
    throw fb::EncoderUnavailableError("cannot listen on " + listen);
  }
  std::cerr << "gradient service for " << oracle.encoder_id() << " on "
            << listen << "\n";
  service.serve_listener(fd);
  ::close(fd);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt-agnostic adversarial attacks on promptable "
               "segmentation encoders"};
  app.set_version_flag("--version", std::string("featurebreak ") +
                                        fb::kToolVersion);
  app.require_subcommand(1);

  std::function<int()> runner;

  // attack -------------------------------------------------------------
  auto* attack = app.add_subcommand(
      "attack", "Image-specific perturbations over an epsilon sweep");
  {
    auto state = std::make_shared<fb::ExperimentConfig>();
    auto flags = std::make_shared<EncoderFlags>();
    auto eps = std::make_shared<std::string>("1/255,2/255,4/255,8/255");
    auto step = std::make_shared<std::string>("auto");
    auto init = std::make_shared<std::string>("random");
    auto config_path = std::make_shared<std::string>();
    attack->add_option("--config", *config_path,
                       "Declarative experiment config (overrides the flags)");
    attack->add_option("--images", state->dataset.images,
                       "Input image files (png/jpeg)");
    attack->add_option("--images-dir", state->dataset.images_dir,
                       "Directory of input images");
    attack->add_option("--out", state->output_dir, "Output directory")
        ->capture_default_str();
    attack->add_option("--eps", *eps, "Comma-separated epsilon list")
        ->capture_default_str();
    attack->add_option("--iters", state->attack.iterations, "Iterations")
        ->capture_default_str();
    attack
        ->add_option("--method", state->attack.method,
                     "pgd, apgd, or multicrop")
        ->check(CLI::IsMember({"pgd", "apgd", "multicrop"}))
        ->capture_default_str();
    attack->add_option("--step", *step, "Step size (fraction or \"auto\")")
        ->capture_default_str();
    attack->add_option("--init", *init, "zero or random")
        ->check(CLI::IsMember({"zero", "random"}))
        ->capture_default_str();
    attack->add_option("--seed", state->seed, "Base seed")
        ->capture_default_str();
    attack->add_option("--jobs", state->jobs, "Worker threads")
        ->capture_default_str();
    attack->add_option("--p-crop", state->attack.p_crop,
                       "Multi-crop probability")
        ->capture_default_str();
    attack->add_option("--min-frac", state->attack.min_frac,
                       "Minimum crop fraction")
        ->capture_default_str();
    attack->add_option("--max-frac", state->attack.max_frac,
                       "Maximum crop fraction")
        ->capture_default_str();
    attack->add_option("--created-at", state->created_at,
                       "Pin the metadata timestamp (reproducible runs)");
    flags->attach(attack);
    attack->parse_complete_callback([&runner, state, flags, eps, step, init,
                                     config_path] {
      runner = [state, flags, eps, step, init, config_path]() -> int {
        fb::ExperimentConfig cfg;
        if (!config_path->empty()) {
          cfg = fb::load_experiment_config(*config_path);
        } else {
          cfg = *state;
          cfg.kind = "attack";
          cfg.encoder = flags->selection();
          cfg.attack.epsilon_labels = split_commas(*eps);
          if (*step == "auto") {
            cfg.attack.step_size.reset();
          } else {
            cfg.attack.step_size = fb::parse_epsilon(*step);
          }
          cfg.attack.init = *init == "zero" ? fb::AttackInit::ZERO
                                            : fb::AttackInit::RANDOM_UNIFORM;
        }
        for (const auto& label : cfg.attack.epsilon_labels) {
          fb::parse_epsilon(label);
        }
        return run_attack_cmd(cfg);
      };
    });
  }

  // universal ----------------------------------------------------------
  auto* universal = app.add_subcommand(
      "universal", "Train a single fixed-resolution perturbation");
  {
    auto state = std::make_shared<fb::ExperimentConfig>();
    auto flags = std::make_shared<EncoderFlags>();
    auto eps = std::make_shared<std::string>("8/255");
    auto native = std::make_shared<std::string>("1024x1024");
    auto stepstr = std::make_shared<std::string>("1/255");
    auto init = std::make_shared<std::string>("random");
    auto config_path = std::make_shared<std::string>();
    state->universal.iterations = 500;
    universal->add_option("--config", *config_path,
                          "Declarative experiment config");
    universal->add_option("--images", state->dataset.images,
                          "Training pool image files");
    universal->add_option("--images-dir", state->dataset.images_dir,
                          "Directory of training images");
    universal->add_option("--out", state->output_dir, "Output directory")
        ->capture_default_str();
    universal->add_option("--eps", *eps, "Comma-separated epsilon list")
        ->capture_default_str();
    universal
        ->add_option("--iters", state->universal.iterations, "Iterations")
        ->capture_default_str();
    universal->add_option("--step", *stepstr, "Step size fraction")
        ->capture_default_str();
    universal->add_option("--native", *native,
                          "Native perturbation shape HxW")
        ->capture_default_str();
    universal
        ->add_option("--pool", state->universal.pool,
                     "Pool size (0 = all images)")
        ->capture_default_str();
    universal->add_option("--batch", state->universal.batch, "Batch size")
        ->capture_default_str();
    universal->add_option("--seed", state->seed, "Seed")
        ->capture_default_str();
    universal->add_option("--init", *init, "zero or random")
        ->check(CLI::IsMember({"zero", "random"}))
        ->capture_default_str();
    universal->add_flag("--normalize-pre-pullback",
                        state->universal.normalize_pre_pullback,
                        "Normalize per-image gradients before the resize "
                        "pull-back instead of after");
    universal->add_option("--created-at", state->created_at,
                          "Pin the metadata timestamp");
    flags->attach(universal);
    universal->parse_complete_callback([&runner, state, flags, eps, native,
                                        stepstr, init, config_path] {
      runner = [state, flags, eps, native, stepstr, init,
                config_path]() -> int {
        fb::ExperimentConfig cfg;
        if (!config_path->empty()) {
          cfg = fb::load_experiment_config(*config_path);
        } else {
          cfg = *state;
          cfg.kind = "universal";
          cfg.encoder = flags->selection();
          cfg.universal.epsilon_labels = split_commas(*eps);
          cfg.universal.step_size = *stepstr;
          cfg.universal.init = *init == "zero"
                                   ? fb::AttackInit::ZERO
                                   : fb::AttackInit::RANDOM_UNIFORM;
          const std::size_t x = native->find('x');
          if (x == std::string::npos) {
            throw fb::ConfigError("--native must be HxW");
          }
          cfg.universal.native_height = std::stoi(native->substr(0, x));
          cfg.universal.native_width = std::stoi(native->substr(x + 1));
        }
        return run_attack_cmd(cfg);
      };
    });
  }

  // build-evalset --------------------------------------------------------
  auto* build = app.add_subcommand(
      "build-evalset",
      "Largest-component masks plus interior-point prompts from segmaps");
  {
    auto segmaps = std::make_shared<std::vector<std::string>>();
    auto images = std::make_shared<std::vector<std::string>>();
    auto min_area = std::make_shared<std::int64_t>(900);
    auto out = std::make_shared<std::string>("evalset.ndjson");
    build->add_option("--segmaps", *segmaps,
                      "Segmentation maps (integer PNG or .npy)")
        ->required();
    build->add_option("--images", *images,
                      "Source images, parallel to --segmaps");
    build->add_option("--min-area", *min_area, "Minimum mask area in pixels")
        ->capture_default_str();
    build->add_option("--out", *out, "Output NDJSON path")
        ->capture_default_str();
    build->parse_complete_callback([&runner, segmaps, images, min_area, out] {
      runner = [segmaps, images, min_area, out]() -> int {
        return run_build_evalset(*segmaps, *images, *min_area, *out);
      };
    });
  }

  // evaluate -------------------------------------------------------------
  auto* evaluate = app.add_subcommand(
      "evaluate", "mIoU degradation tables over saved perturbations");
  {
    auto evalset = std::make_shared<std::string>();
    auto images_dir = std::make_shared<std::string>();
    auto perturb_root = std::make_shared<std::string>();
    auto flags = std::make_shared<EncoderFlags>();
    auto tau = std::make_shared<double>(0.85);
    auto prompt = std::make_shared<std::string>("point");
    auto per_image = std::make_shared<bool>(false);
    auto no_clean = std::make_shared<bool>(false);
    auto cross = std::make_shared<bool>(false);
    auto records = std::make_shared<std::string>();
    auto summary = std::make_shared<std::string>();
    evaluate->add_option("--evalset", *evalset, "Evalset NDJSON")->required();
    evaluate->add_option("--images-dir", *images_dir,
                         "Override image directory (matched by image_id)");
    evaluate->add_option("--perturb-root", *perturb_root,
                         "Root of saved perturbations "
                         "(<method>/<eps_tag>/...)");
    evaluate->add_option("--tau", *tau, "Toy segmenter similarity threshold")
        ->capture_default_str();
    evaluate->add_option("--prompt", *prompt, "point or box")
        ->check(CLI::IsMember({"point", "box"}))
        ->capture_default_str();
    evaluate->add_flag("--per-image", *per_image,
                       "Average per-image means instead of pairs");
    evaluate->add_flag("--no-clean", *no_clean, "Skip the clean condition");
    evaluate->add_flag("--cross-encoder", *cross,
                       "Transfer evaluation: perturbations from a different "
                       "encoder");
    evaluate->add_option("--out", *records, "Write NDJSON records here");
    evaluate->add_option("--summary", *summary, "Write the CSV table here");
    flags->attach(evaluate);
    evaluate->parse_complete_callback([&runner, evalset, images_dir,
                                       perturb_root, flags, tau, prompt,
                                       per_image, no_clean, cross, records,
                                       summary] {
      runner = [evalset, images_dir, perturb_root, flags, tau, prompt,
                per_image, no_clean, cross, records, summary]() -> int {
        return run_evaluate(*evalset, *images_dir, *perturb_root, *flags, *tau,
                            *prompt, *per_image, !*no_clean, *cross, *records,
                            *summary);
      };
    });
  }

  // render ---------------------------------------------------------------
  auto* render = app.add_subcommand("render", "Colored mask overlay PNG");
  {
    auto image = std::make_shared<std::string>();
    auto masks = std::make_shared<std::vector<std::string>>();
    auto out = std::make_shared<std::string>("overlay.png");
    render->add_option("--image", *image, "Input image")->required();
    render->add_option("--masks", *masks, "Mask PNGs, painter's order");
    render->add_option("--out", *out, "Output PNG")->capture_default_str();
    render->parse_complete_callback([&runner, image, masks, out] {
      runner = [image, masks, out]() -> int {
        return run_render(*image, *masks, *out);
      };
    });
  }

  // verify ---------------------------------------------------------------
  auto* verify = app.add_subcommand("verify", "Run the invariant suites");
  verify->parse_complete_callback([&runner] { runner = run_verify; });

  // serve ----------------------------------------------------------------
  auto* serve = app.add_subcommand(
      "serve", "Host the toy encoder as a gradient service");
  {
    auto flags = std::make_shared<EncoderFlags>();
    auto stdio = std::make_shared<bool>(false);
    auto listen = std::make_shared<std::string>("127.0.0.1:7447");
    serve->add_flag("--stdio", *stdio, "Speak the protocol on stdin/stdout");
    serve->add_option("--listen", *listen, "TCP listen address")
        ->capture_default_str();
    flags->attach(serve);
    serve->parse_complete_callback([&runner, flags, stdio, listen] {
      runner = [flags, stdio, listen]() -> int {
        return run_serve(*flags, *stdio, *listen);
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    return runner ? runner() : kExitConfig;
  } catch (const fb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fb::EncoderUnavailableError& e) {
    std::cerr << "encoder oracle failure: " << e.what() << "\n";
    return kExitOracle;
  } catch (const fb::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
