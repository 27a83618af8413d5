#include "fb/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "fb/attacks.hpp"
#include "fb/masks.hpp"
#include "fb/segmenter.hpp"
#include "test_support.hpp"

namespace {

using fb::EvalItem;
using fb::EvaluationRecord;
using fb::ImageTensor;
using fb::Mask2D;
using fb::MaskProposal;
using fb::Perturbation;
using fb::PerturbationMap;
using fb::PromptSet;
using fb::RecordStatus;
using fb::Rng;
using fb::Tensor3;
using fb::ToyConvEncoder;
using fb::ToyEncoderConfig;
using fb::ToyPromptSegmenter;
using fbtest::make_eval_items;
using fbtest::make_scene;

ToyConvEncoder make_encoder(std::uint64_t seed = 0) {
  ToyEncoderConfig cfg;
  cfg.seed = seed;
  return ToyConvEncoder(cfg);
}

Mask2D mask_from_bits(int h, int w, const std::vector<int>& bits) {
  Mask2D m(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      m.set(i, j, bits[static_cast<std::size_t>(i) * w + j] != 0);
    }
  }
  return m;
}

TEST(Iou, TrivialCases) {
  Mask2D a = mask_from_bits(2, 2, {1, 1, 0, 0});
  EXPECT_EQ(fb::iou(a, a), 1.0);
  Mask2D b = mask_from_bits(2, 2, {0, 0, 1, 1});
  EXPECT_EQ(fb::iou(a, b), 0.0);
  Mask2D empty(2, 2);
  EXPECT_EQ(fb::iou(empty, empty), 1.0);
  EXPECT_EQ(fb::iou(a, empty), 0.0);
  EXPECT_EQ(fb::iou(empty, a), 0.0);
  Mask2D c(2, 3);
  EXPECT_THROW(fb::iou(a, c), std::invalid_argument);
}

TEST(Iou, MatchesPixelCountingOracle) {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    Mask2D a(16, 16), b(16, 16);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        a.set(i, j, rng.uniform01() < 0.5);
        b.set(i, j, rng.uniform01() < 0.5);
      }
    }
    std::int64_t inter = 0, uni = 0;
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        inter += a.at(i, j) && b.at(i, j);
        uni += a.at(i, j) || b.at(i, j);
      }
    }
    const double expected =
        uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    EXPECT_EQ(fb::iou(a, b), expected);
    EXPECT_EQ(fb::iou(b, a), fb::iou(a, b));
  }
}

TEST(Iou, BoundedByAreaRatio) {
  Rng rng(405);
  for (int trial = 0; trial < 50; ++trial) {
    Mask2D a(12, 12), b(12, 12);
    for (int i = 0; i < 12; ++i) {
      for (int j = 0; j < 12; ++j) {
        a.set(i, j, rng.uniform01() < 0.4);
        b.set(i, j, rng.uniform01() < 0.6);
      }
    }
    if (a.area() == 0 || b.area() == 0) continue;
    const double lo = static_cast<double>(std::min(a.area(), b.area()));
    const double hi = static_cast<double>(std::max(a.area(), b.area()));
    EXPECT_LE(fb::iou(a, b), lo / hi + 1e-12);
  }
}

TEST(SelectBestProposal, ArgmaxWithTieBreak) {
  std::vector<Mask2D> masks = {Mask2D(2, 2), Mask2D(2, 2, true), Mask2D(2, 2)};
  auto [m1, s1] = fb::select_best_proposal(masks, {0.2, 0.9, 0.5});
  EXPECT_EQ(s1, 0.9);
  EXPECT_EQ(m1, masks[1]);
  auto [m2, s2] = fb::select_best_proposal(masks, {0.4, 0.4, 0.4});
  EXPECT_EQ(m2, masks[0]);  // tie -> lowest index
  EXPECT_THROW(fb::select_best_proposal({}, {}), std::invalid_argument);
  EXPECT_THROW(fb::select_best_proposal(masks, {0.1, 0.2}),
               std::invalid_argument);
}

TEST(SelectBestProposal, MatchesScanOracle) {
  Rng rng(406);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Mask2D> masks;
    std::vector<double> scores;
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 6));
    for (int i = 0; i < n; ++i) {
      masks.push_back(Mask2D(2, 2));
      scores.push_back(rng.uniform(-1.0, 1.0));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] > scores[best]) best = i;
    }
    auto [m, s] = fb::select_best_proposal(masks, scores);
    EXPECT_EQ(s, scores[best]);
  }
}

// The toy segmenter reconstructs aligned flat regions exactly, so the
// self-consistent clean evaluation scores mIoU 1.0.
TEST(ToyPromptSegmenter, PerfectOnAlignedScenes) {
  ToyConvEncoder enc = make_encoder(0);
  std::vector<fbtest::SyntheticScene> scenes;
  for (int i = 0; i < 4; ++i) {
    scenes.push_back(make_scene(64, 64, 8, 2 + i % 2, 500 + i,
                                "img" + std::to_string(i)));
  }
  std::vector<EvalItem> items = make_eval_items(scenes);
  ASSERT_FALSE(items.empty());
  ToyPromptSegmenter seg(enc, 0.85);
  PerturbationMap none;
  for (const auto& item : items) none[item.image_id] = std::nullopt;
  fb::MiouResult res = fb::evaluate_miou(seg, items, none);
  EXPECT_EQ(res.failed, 0);
  EXPECT_EQ(res.miou, 1.0);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.iou, 1.0);
    EXPECT_EQ(r.attack_kind, "none");
    EXPECT_EQ(r.encoder_id, enc.encoder_id());
  }
}

TEST(ToyPromptSegmenter, NegativePromptsExcludeNegativeRegion) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 321, "neg");
  ToyPromptSegmenter seg(enc, 0.85);
  PromptSet prompts;
  prompts.points.push_back(fb::PointPrompt{8, 8, fb::PromptPolarity::POSITIVE});
  prompts.points.push_back(
      fb::PointPrompt{40, 40, fb::PromptPolarity::NEGATIVE});
  auto proposals = seg.predict(scene.image, prompts);
  ASSERT_EQ(proposals.size(), 3u);
  for (const auto& p : proposals) {
    EXPECT_FALSE(p.mask.at(40, 40));
  }
}

TEST(ToyPromptSegmenter, BoxPromptSegmentsRegion) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 322, "box");
  ToyPromptSegmenter seg(enc, 0.85);
  PromptSet prompts;
  prompts.box = fb::BoxPrompt{0, 0, 32, 32};  // region 1's quadrant
  auto proposals = seg.predict(scene.image, prompts);
  Mask2D truth(64, 64);
  for (int i = 0; i < 32; ++i) {
    for (int j = 0; j < 32; ++j) truth.set(i, j, true);
  }
  auto [best, score] = fb::select_best_proposal(proposals);
  EXPECT_EQ(fb::iou(best, truth), 1.0);
}

TEST(EvaluateMiou, MissingEntryRejected) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 323, "only");
  std::vector<EvalItem> items = make_eval_items({scene});
  ToyPromptSegmenter seg(enc, 0.85);
  PerturbationMap empty;
  EXPECT_THROW(fb::evaluate_miou(seg, items, empty), std::invalid_argument);
}

TEST(EvaluateMiou, MeanOfPairIous) {
  // Two records with IoU {1, 0} -> 0.5: craft one perfect item and one with
  // a deliberately wrong ground-truth mask.
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 324, "pairmean");
  std::vector<EvalItem> items = make_eval_items({scene});
  ASSERT_GE(items.size(), 2u);
  items.resize(2);
  // Move the second item's truth somewhere disjoint from anything the
  // segmenter can predict for its prompt.
  Mask2D wrong(64, 64);
  const fb::PointPrompt p = items[1].prompts.points[0];
  for (int i = 0; i < 64; ++i) {
    for (int j = 0; j < 64; ++j) {
      const bool in_region = items[1].truth.mask.at(i, j);
      wrong.set(i, j, !in_region);
    }
  }
  // Keep the prompt on the original region so the prediction stays there.
  items[1].truth.mask = wrong;
  (void)p;
  ToyPromptSegmenter seg(enc, 0.85);
  PerturbationMap none;
  for (const auto& item : items) none[item.image_id] = std::nullopt;
  fb::MiouResult res = fb::evaluate_miou(seg, items, none);
  ASSERT_EQ(res.records.size(), 2u);
  EXPECT_EQ(res.records[0].iou, 1.0);
  EXPECT_EQ(res.records[1].iou, 0.0);
  EXPECT_EQ(res.miou, 0.5);
}

TEST(EvaluateMiou, ZeroPerturbationEqualsClean) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 325, "zerop");
  std::vector<EvalItem> items = make_eval_items({scene});
  ToyPromptSegmenter seg(enc, 0.85);

  PerturbationMap none, zeros;
  Perturbation zero;
  zero.delta = Tensor3(64, 64, 3, 0.0);
  zero.epsilon = 8.0 / 255.0;
  zero.native_height = 64;
  zero.native_width = 64;
  zero.provenance = {"pgd", 0, 0, enc.encoder_id()};
  for (const auto& item : items) {
    none[item.image_id] = std::nullopt;
    zeros[item.image_id] = zero;
  }
  auto clean = fb::evaluate_miou(seg, items, none);
  auto zerod = fb::evaluate_miou(seg, items, zeros);
  EXPECT_EQ(clean.miou, zerod.miou);
  for (std::size_t i = 0; i < clean.records.size(); ++i) {
    EXPECT_EQ(clean.records[i].iou, zerod.records[i].iou);
  }
}

TEST(EvaluateMiou, UniversalDeltaIsResizedToImage) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 326, "resize");
  std::vector<EvalItem> items = make_eval_items({scene});
  ToyPromptSegmenter seg(enc, 0.85);
  Perturbation p;
  p.delta = Tensor3(16, 16, 3, 0.0);  // native resolution != image resolution
  Rng rng(5);
  for (double& v : p.delta.data()) v = rng.uniform(-0.03, 0.03);
  p.epsilon = 8.0 / 255.0;
  p.native_height = 16;
  p.native_width = 16;
  p.provenance = {"universal", 10, 0, enc.encoder_id()};
  PerturbationMap map;
  for (const auto& item : items) map[item.image_id] = p;
  auto res = fb::evaluate_miou(seg, items, map);
  EXPECT_EQ(res.failed, 0);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.attack_kind, "universal");
    EXPECT_EQ(r.epsilon, 8.0 / 255.0);
  }
}

TEST(EvaluateMiou, PerImageAverageFlag) {
  ToyConvEncoder enc = make_encoder(0);
  // Image A contributes two pairs, image B one; pair-level and image-level
  // means differ when A's two IoUs differ from B's.
  auto a = make_scene(64, 64, 8, 2, 327, "imgA");
  auto b = make_scene(64, 64, 8, 1, 328, "imgB");
  std::vector<EvalItem> items = make_eval_items({a, b});
  ASSERT_EQ(items.size(), 3u);
  // Make one of A's truths fully wrong.
  for (auto& item : items) {
    if (item.image_id == "imgA" && item.truth.class_id == 2) {
      Mask2D inverted(64, 64);
      for (int i = 0; i < 64; ++i) {
        for (int j = 0; j < 64; ++j) inverted.set(i, j, !item.truth.mask.at(i, j));
      }
      item.truth.mask = inverted;
    }
  }
  ToyPromptSegmenter seg(enc, 0.85);
  PerturbationMap none;
  for (const auto& item : items) none[item.image_id] = std::nullopt;
  auto pair_avg = fb::evaluate_miou(seg, items, none, false);
  auto img_avg = fb::evaluate_miou(seg, items, none, true);
  EXPECT_NEAR(pair_avg.miou, (1.0 + 0.0 + 1.0) / 3.0, 1e-12);
  EXPECT_NEAR(img_avg.miou, (0.5 + 1.0) / 2.0, 1e-12);
}

class ThrowingSegmenter : public fb::SegmenterOracle {
 public:
  const std::string& segmenter_id() const override { return id_; }
  const std::string& encoder_id() const override { return id_; }
  std::vector<MaskProposal> predict(const ImageTensor&,
                                    const PromptSet&) const override {
    throw std::runtime_error("segmenter exploded");
  }

 private:
  std::string id_ = "throwing";
};

TEST(EvaluateMiou, FailuresExcludedAndCounted) {
  auto scene = make_scene(64, 64, 8, 2, 329, "boom");
  std::vector<EvalItem> items = make_eval_items({scene});
  ThrowingSegmenter seg;
  PerturbationMap none;
  for (const auto& item : items) none[item.image_id] = std::nullopt;
  auto res = fb::evaluate_miou(seg, items, none);
  EXPECT_EQ(res.failed, static_cast<int>(items.size()));
  EXPECT_EQ(res.miou, 0.0);
  for (const auto& r : res.records) {
    EXPECT_EQ(r.status, RecordStatus::FAILED);
    EXPECT_FALSE(r.failure_reason.empty());
  }
}

TEST(CrossEncoderEval, DegenerateTransferMatchesEvaluateMiou) {
  ToyConvEncoder enc = make_encoder(0);
  auto scene = make_scene(64, 64, 8, 2, 330, "xfer");
  std::vector<EvalItem> items = make_eval_items({scene});
  ToyPromptSegmenter seg(enc, 0.85);
  PerturbationMap map;
  fb::AttackConfig acfg;
  acfg.epsilon = 4.0 / 255.0;
  acfg.iterations = 10;
  auto [p, trace] = fb::pgd_attack(enc, scene.image, acfg);
  for (const auto& item : items) map[item.image_id] = p;
  auto direct = fb::evaluate_miou(seg, items, map);
  auto cross = fb::cross_encoder_eval(map, seg, items);
  EXPECT_EQ(direct.miou, cross.miou);
  for (std::size_t i = 0; i < direct.records.size(); ++i) {
    EXPECT_EQ(direct.records[i].iou, cross.records[i].iou);
    EXPECT_EQ(cross.records[i].encoder_id, enc.encoder_id());
    EXPECT_EQ(cross.records[i].segmenter_id, seg.segmenter_id());
  }
}

// Perturbations crafted against encoder A degrade an encoder-B segmenter
// less than a white-box attack degrades encoder A's own segmenter.
TEST(CrossEncoderEval, TransferIsWeakerInMedian) {
  ToyConvEncoder enc_a = make_encoder(1);
  ToyConvEncoder enc_b = make_encoder(2);
  ToyPromptSegmenter seg_a(enc_a, 0.85);
  ToyPromptSegmenter seg_b(enc_b, 0.85);

  int transfer_weaker = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto scene = make_scene(64, 64, 8, 2, 600 + seed, "s" + std::to_string(seed));
    std::vector<EvalItem> items = make_eval_items({scene});
    fb::AttackConfig cfg;
    cfg.epsilon = 8.0 / 255.0;
    cfg.iterations = 60;
    cfg.seed = seed;
    auto [p, trace] = fb::apgd_attack(enc_a, scene.image, cfg);
    PerturbationMap map;
    for (const auto& item : items) map[item.image_id] = p;
    const double white_box = fb::evaluate_miou(seg_a, items, map).miou;
    const double transfer = fb::cross_encoder_eval(map, seg_b, items).miou;
    if (transfer >= white_box) ++transfer_weaker;
  }
  EXPECT_GE(transfer_weaker, 3);  // median over 5 seeds
}

TEST(Records, NdjsonAndCsvSchema) {
  std::vector<EvaluationRecord> records;
  auto add = [&](const std::string& kind, double eps, double iou_v) {
    EvaluationRecord r;
    r.image_id = "img";
    r.mask_id = "img#c1";
    r.prompt_descriptor = {{"points", nlohmann::json::array()}};
    r.epsilon = eps;
    r.attack_kind = kind;
    r.iou = iou_v;
    r.encoder_id = "enc";
    r.segmenter_id = "seg";
    records.push_back(std::move(r));
  };
  add("none", 0.0, 0.9);
  add("apgd", 1.0 / 255.0, 0.4);
  add("apgd", 2.0 / 255.0, 0.3);
  add("apgd", 4.0 / 255.0, 0.2);
  add("apgd", 8.0 / 255.0, 0.1);
  add("universal", 8.0 / 255.0, 0.5);

  namespace fs = std::filesystem;
  const std::string nd_path =
      (fs::temp_directory_path() / "fb_records_test.ndjson").string();
  fb::write_records_ndjson(records, nd_path);
  std::ifstream is(nd_path);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("image_id"));
    EXPECT_TRUE(j.contains("iou"));
    ++lines;
  }
  EXPECT_EQ(lines, 6);

  const std::string csv_path =
      (fs::temp_directory_path() / "fb_summary_test.csv").string();
  fb::write_summary_csv(fb::summarize_records(records), csv_path);
  std::ifstream cs(csv_path);
  std::vector<std::string> rows;
  while (std::getline(cs, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "attack,clean,1/255,2/255,4/255,8/255");
  EXPECT_EQ(rows[1].substr(0, 15), "image-specific,");
  EXPECT_EQ(rows[2].substr(0, 10), "universal,");
  // Clean column repeats per row; universal has only the 8/255 cell.
  EXPECT_EQ(rows[1], "image-specific,90.00,40.00,30.00,20.00,10.00");
  EXPECT_EQ(rows[2], "universal,90.00,,,,50.00");
  fs::remove(nd_path);
  fs::remove(csv_path);
}

}  // namespace
