#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fb/constraints.hpp"
#include "fb/errors.hpp"
#include "fb/masks.hpp"
#include "fb/segmenter.hpp"
#include "fb/tensor.hpp"

namespace fb {

// Intersection over union with the degenerate cases pinned: both masks empty
// gives 1, exactly one empty gives 0.
inline double iou(const Mask2D& a, const Mask2D& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("iou: shape mismatch");
  }
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0;
    const bool bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Argmax by score; ties resolve to the lowest index.
inline std::pair<Mask2D, double> select_best_proposal(
    const std::vector<Mask2D>& proposals, const std::vector<double>& scores) {
  if (proposals.empty()) {
    throw std::invalid_argument("select_best_proposal: empty list");
  }
  if (proposals.size() != scores.size()) {
    throw std::invalid_argument("select_best_proposal: length mismatch");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return {proposals[best], scores[best]};
}

inline std::pair<Mask2D, double> select_best_proposal(
    const std::vector<MaskProposal>& proposals) {
  std::vector<Mask2D> masks;
  std::vector<double> scores;
  masks.reserve(proposals.size());
  scores.reserve(proposals.size());
  for (const auto& p : proposals) {
    masks.push_back(p.mask);
    scores.push_back(p.score);
  }
  return select_best_proposal(masks, scores);
}

enum class RecordStatus { OK, FAILED };

struct EvaluationRecord {
  std::string image_id;
  std::string mask_id;
  nlohmann::json prompt_descriptor;
  double epsilon = 0.0;
  std::string attack_kind;  // "none" for clean
  double iou = 0.0;
  std::string encoder_id;    // source encoder of the perturbation (or the
                             // segmenter's own for clean records)
  std::string segmenter_id;
  RecordStatus status = RecordStatus::OK;
  std::string failure_reason;
};

inline nlohmann::json prompt_descriptor_json(const PromptSet& prompts) {
  nlohmann::json j;
  if (!prompts.points.empty()) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : prompts.points) {
      pts.push_back({{"row", p.row},
                     {"col", p.col},
                     {"polarity", p.polarity == PromptPolarity::POSITIVE
                                      ? "positive"
                                      : "negative"}});
    }
    j["points"] = std::move(pts);
  }
  if (prompts.box) {
    j["box"] = {{"top", prompts.box->top},
                {"left", prompts.box->left},
                {"bottom", prompts.box->bottom},
                {"right", prompts.box->right}};
  }
  return j;
}

inline nlohmann::json to_json(const EvaluationRecord& r) {
  return nlohmann::json{
      {"image_id", r.image_id},
      {"mask_id", r.mask_id},
      {"prompt", r.prompt_descriptor},
      {"epsilon", r.epsilon},
      {"attack_kind", r.attack_kind},
      {"iou", r.iou},
      {"encoder_id", r.encoder_id},
      {"segmenter_id", r.segmenter_id},
      {"status", r.status == RecordStatus::OK ? "ok" : "failed"},
      {"failure_reason", r.failure_reason},
  };
}

// One (image, mask, prompts) evaluation unit.
struct EvalItem {
  std::string image_id;
  std::string mask_id;
  ImageTensor image;
  MaskInstance truth;
  PromptSet prompts;
};

// delta resized to the image if needed, then box-clipped and added.
inline ImageTensor apply_perturbation(const ImageTensor& image,
                                      const Perturbation& p) {
  Tensor3 delta = p.delta;
  if (delta.height() != image.height() || delta.width() != image.width()) {
    delta = nearest_resize(delta, image.height(), image.width());
  }
  if (delta.channels() != image.channels()) {
    throw std::invalid_argument(
        "apply_perturbation: channel count mismatch");
  }
  delta = clip_to_image_box(image, delta);
  Tensor3 adv = image.tensor();
  for (std::size_t i = 0; i < adv.data().size(); ++i) {
    adv.data()[i] += delta.data()[i];
  }
  return ImageTensor(std::move(adv), image.id());
}

using PerturbationMap = std::map<std::string, std::optional<Perturbation>>;

struct MiouResult {
  double miou = 0.0;  // mean over OK records (pair-level by default)
  std::vector<EvaluationRecord> records;
  int failed = 0;
};

// Runs the segmenter over every eval item with its image's perturbation
// applied (NONE = clean), keeps the best-scoring proposal, and averages IoU
// over all (mask, prompt) pairs. per_image_average switches to averaging
// per-image means instead.
inline MiouResult evaluate_miou(const SegmenterOracle& segmenter,
                                const std::vector<EvalItem>& eval_set,
                                const PerturbationMap& perturbations,
                                bool per_image_average = false) {
  MiouResult out;
  for (const EvalItem& item : eval_set) {
    auto it = perturbations.find(item.image_id);
    if (it == perturbations.end()) {
      throw std::invalid_argument(
          "evaluate_miou: missing perturbation entry for image " +
          item.image_id);
    }
    EvaluationRecord rec;
    rec.image_id = item.image_id;
    rec.mask_id = item.mask_id;
    rec.prompt_descriptor = prompt_descriptor_json(item.prompts);
    rec.segmenter_id = segmenter.segmenter_id();
    if (it->second) {
      rec.epsilon = it->second->epsilon;
      rec.attack_kind = it->second->provenance.attack_kind;
      rec.encoder_id = it->second->provenance.encoder_id;
    } else {
      rec.epsilon = 0.0;
      rec.attack_kind = "none";
      rec.encoder_id = segmenter.encoder_id();
    }
    try {
      const ImageTensor input =
          it->second ? apply_perturbation(item.image, *it->second) : item.image;
      const std::vector<MaskProposal> proposals =
          segmenter.predict(input, item.prompts);
      const auto [best_mask, best_score] = select_best_proposal(proposals);
      rec.iou = iou(best_mask, item.truth.mask);
    } catch (const std::exception& e) {
      rec.status = RecordStatus::FAILED;
      rec.failure_reason = e.what();
      ++out.failed;
    }
    out.records.push_back(std::move(rec));
  }

  if (per_image_average) {
    std::map<std::string, std::pair<double, int>> per_image;
    for (const auto& r : out.records) {
      if (r.status != RecordStatus::OK) continue;
      auto& acc = per_image[r.image_id];
      acc.first += r.iou;
      acc.second += 1;
    }
    double sum = 0.0;
    for (const auto& [id, acc] : per_image) sum += acc.first / acc.second;
    out.miou = per_image.empty() ? 0.0 : sum / static_cast<double>(per_image.size());
  } else {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : out.records) {
      if (r.status != RecordStatus::OK) continue;
      sum += r.iou;
      ++n;
    }
    out.miou = n == 0 ? 0.0 : sum / n;
  }
  return out;
}

// Identical mechanics to evaluate_miou; the perturbations were produced
// against a different encoder than the target segmenter's, and each record
// keeps the source encoder_id next to the target segmenter_id.
inline MiouResult cross_encoder_eval(const PerturbationMap& source_perturbations,
                                     const SegmenterOracle& target_segmenter,
                                     const std::vector<EvalItem>& eval_set,
                                     bool per_image_average = false) {
  return evaluate_miou(target_segmenter, eval_set, source_perturbations,
                       per_image_average);
}

inline void write_records_ndjson(const std::vector<EvaluationRecord>& records,
                                 const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& r : records) {
    os << to_json(r).dump() << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

// Table-shaped summary: one row per attack family, one column per epsilon,
// plus the shared clean column. Values are mIoU in percent.
struct SummaryTable {
  // row label -> epsilon -> (sum, count); the "clean" accumulator is shared.
  std::map<std::string, std::map<double, std::pair<double, int>>> rows;
  std::pair<double, int> clean{0.0, 0};
};

inline std::string attack_row_label(const std::string& attack_kind) {
  if (attack_kind == "universal") return "universal";
  return "image-specific";
}

inline SummaryTable summarize_records(
    const std::vector<EvaluationRecord>& records) {
  SummaryTable t;
  for (const auto& r : records) {
    if (r.status != RecordStatus::OK) continue;
    if (r.attack_kind == "none") {
      t.clean.first += r.iou;
      t.clean.second += 1;
    } else {
      auto& cell = t.rows[attack_row_label(r.attack_kind)][r.epsilon];
      cell.first += r.iou;
      cell.second += 1;
    }
  }
  return t;
}

inline const std::vector<std::pair<std::string, double>>& default_epsilon_columns() {
  static const std::vector<std::pair<std::string, double>> cols = {
      {"1/255", 1.0 / 255.0},
      {"2/255", 2.0 / 255.0},
      {"4/255", 4.0 / 255.0},
      {"8/255", 8.0 / 255.0},
  };
  return cols;
}

inline void write_summary_csv(
    const SummaryTable& table, const std::string& path,
    const std::vector<std::pair<std::string, double>>& eps_columns =
        default_epsilon_columns()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "attack,clean";
  for (const auto& [name, eps] : eps_columns) os << "," << name;
  os << "\n";
  auto fmt = [](const std::pair<double, int>& cell) {
    std::ostringstream s;
    if (cell.second == 0) {
      s << "";
    } else {
      s.setf(std::ios::fixed);
      s.precision(2);
      s << 100.0 * cell.first / cell.second;
    }
    return s.str();
  };
  // Fixed row order: image-specific, then universal; extra labels follow.
  std::vector<std::string> order;
  for (const char* want : {"image-specific", "universal"}) {
    if (table.rows.count(want)) order.push_back(want);
  }
  for (const auto& [label, cells] : table.rows) {
    if (std::find(order.begin(), order.end(), label) == order.end()) {
      order.push_back(label);
    }
  }
  for (const std::string& label : order) {
    os << label << "," << fmt(table.clean);
    const auto& cells = table.rows.at(label);
    for (const auto& [name, eps] : eps_columns) {
      auto it = cells.end();
      for (auto c = cells.begin(); c != cells.end(); ++c) {
        if (std::fabs(c->first - eps) < 1e-12) it = c;
      }
      os << "," << (it == cells.end() ? std::string() : fmt(it->second));
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace fb
