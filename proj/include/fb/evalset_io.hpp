#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fb/errors.hpp"
#include "fb/masks.hpp"

namespace fb {

// Row-major run-length encoding, alternating runs starting with false.
inline std::vector<std::int64_t> rle_encode(const Mask2D& mask) {
  std::vector<std::int64_t> runs;
  bool current = false;
  std::int64_t len = 0;
  for (std::uint8_t v : mask.data) {
    const bool bit = v != 0;
    if (bit == current) {
      ++len;
    } else {
      runs.push_back(len);
      current = bit;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

inline Mask2D rle_decode(int height, int width,
                         const std::vector<std::int64_t>& runs) {
  Mask2D mask(height, width);
  std::size_t pos = 0;
  bool current = false;
  for (std::int64_t run : runs) {
    if (run < 0 || pos + static_cast<std::size_t>(run) > mask.data.size()) {
      throw IoError("rle_decode: runs exceed mask size");
    }
    if (current) {
      for (std::int64_t k = 0; k < run; ++k) mask.data[pos + static_cast<std::size_t>(k)] = 1;
    }
    pos += static_cast<std::size_t>(run);
    current = !current;
  }
  if (pos != mask.data.size()) {
    throw IoError("rle_decode: runs do not cover the mask");
  }
  return mask;
}

// One line of a persisted evaluation set: the mask instance, its prompts,
// and where to find the source image.
struct EvalSetEntry {
  std::string image_id;
  std::string image_path;
  std::int32_t class_id = 0;
  std::int64_t area = 0;
  int height = 0;
  int width = 0;
  PointPrompt point;
  BoxPrompt box;
  Mask2D mask;
};

inline nlohmann::json to_json(const EvalSetEntry& e) {
  return nlohmann::json{
      {"image_id", e.image_id},
      {"image_path", e.image_path},
      {"class_id", e.class_id},
      {"area", e.area},
      {"height", e.height},
      {"width", e.width},
      {"point", {{"row", e.point.row}, {"col", e.point.col}}},
      {"box",
       {{"top", e.box.top},
        {"left", e.box.left},
        {"bottom", e.box.bottom},
        {"right", e.box.right}}},
      {"mask_rle", rle_encode(e.mask)},
  };
}

inline EvalSetEntry evalset_entry_from_json(const nlohmann::json& j) {
  EvalSetEntry e;
  try {
    e.image_id = j.at("image_id").get<std::string>();
    e.image_path = j.value("image_path", "");
    e.class_id = j.at("class_id").get<std::int32_t>();
    e.area = j.at("area").get<std::int64_t>();
    e.height = j.at("height").get<int>();
    e.width = j.at("width").get<int>();
    e.point.row = j.at("point").at("row").get<int>();
    e.point.col = j.at("point").at("col").get<int>();
    e.point.polarity = PromptPolarity::POSITIVE;
    e.box.top = j.at("box").at("top").get<int>();
    e.box.left = j.at("box").at("left").get<int>();
    e.box.bottom = j.at("box").at("bottom").get<int>();
    e.box.right = j.at("box").at("right").get<int>();
    e.mask = rle_decode(e.height, e.width,
                        j.at("mask_rle").get<std::vector<std::int64_t>>());
  } catch (const nlohmann::json::exception& ex) {
    throw IoError(std::string("malformed evalset entry: ") + ex.what());
  }
  if (e.mask.area() != e.area) {
    throw IoError("evalset entry area does not match its mask");
  }
  return e;
}

inline void write_evalset_ndjson(const std::vector<EvalSetEntry>& entries,
                                 const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& e : entries) os << to_json(e).dump() << "\n";
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<EvalSetEntry> read_evalset_ndjson(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open evalset: " + path);
  std::vector<EvalSetEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(evalset_entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("evalset line " + std::to_string(line_no) + ": " +
                    ex.what());
    }
  }
  return out;
}

}  // namespace fb
