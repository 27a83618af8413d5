#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fb/constraints.hpp"
#include "fb/errors.hpp"
#include "fb/tensor.hpp"
#include "fb/version.hpp"

namespace fb {

inline std::string utc_timestamp_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm_utc;
  gmtime_r(&t, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

namespace detail {

// Largest float whose double value does not exceed epsilon; saturated sign
// steps store exactly this, so the l-inf invariant survives the float32
// payload.
inline float epsilon_as_float_floor(double epsilon) {
  float f = static_cast<float>(epsilon);
  while (static_cast<double>(f) > epsilon) {
    f = std::nextafterf(f, 0.0f);
  }
  return f;
}

}  // namespace detail

inline std::string perturbation_sidecar_path(const std::string& path) {
  return path + ".json";
}

// Payload: raw little-endian float32, row-major (height, width, channels) as
// declared by the JSON sidecar next to it. Values are clamped to the largest
// float32 inside the epsilon ball so the invariant validates exactly on load.
inline void save_perturbation(const Perturbation& p, const std::string& path,
                              const std::string& created_at = "") {
  p.validate();
  const float bound = detail::epsilon_as_float_floor(p.epsilon);
  std::vector<float> payload(p.delta.data().size());
  for (std::size_t i = 0; i < payload.size(); ++i) {
    float v = static_cast<float>(p.delta.data()[i]);
    if (v > bound) v = bound;
    if (v < -bound) v = -bound;
    payload[i] = v;
  }
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!os) throw IoError("write failed: " + path);
  }
  nlohmann::json meta{
      {"epsilon", p.epsilon},
      {"norm_kind", norm_kind_name(p.norm_kind)},
      {"native_shape", {p.native_height, p.native_width}},
      {"channels", p.delta.channels()},
      {"attack_kind", p.provenance.attack_kind},
      {"iterations", p.provenance.iterations},
      {"seed", p.provenance.seed},
      {"encoder_id", p.provenance.encoder_id},
      {"created_at", created_at.empty() ? utc_timestamp_now() : created_at},
      {"tool_version", kToolVersion},
  };
  std::ofstream ms(perturbation_sidecar_path(path), std::ios::binary);
  if (!ms) throw IoError("cannot open for writing: " + path + ".json");
  ms << meta.dump(2) << "\n";
  if (!ms) throw IoError("write failed: " + path + ".json");
}

inline Perturbation load_perturbation(const std::string& path) {
  nlohmann::json meta;
  {
    std::ifstream ms(perturbation_sidecar_path(path), std::ios::binary);
    if (!ms) throw IoError("missing metadata sidecar: " + path + ".json");
    try {
      ms >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed metadata sidecar: ") + e.what());
    }
  }
  Perturbation p;
  int channels = 0;
  try {
    p.epsilon = meta.at("epsilon").get<double>();
    const std::string norm = meta.at("norm_kind").get<std::string>();
    if (norm != "linf") throw IoError("unsupported norm_kind: " + norm);
    p.native_height = meta.at("native_shape").at(0).get<int>();
    p.native_width = meta.at("native_shape").at(1).get<int>();
    p.provenance.attack_kind = meta.at("attack_kind").get<std::string>();
    p.provenance.iterations = meta.at("iterations").get<int>();
    p.provenance.seed = meta.at("seed").get<std::uint64_t>();
    p.provenance.encoder_id = meta.at("encoder_id").get<std::string>();
    channels = meta.at("channels").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("metadata fields missing or ill-typed: ") +
                  e.what());
  }
  if (p.native_height <= 0 || p.native_width <= 0 ||
      (channels != 1 && channels != 3)) {
    throw IoError("metadata declares an invalid shape: " + path);
  }

  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open payload: " + path);
  const std::streamsize bytes = is.tellg();
  const std::size_t expect = static_cast<std::size_t>(p.native_height) *
                             p.native_width * channels * sizeof(float);
  if (static_cast<std::size_t>(bytes) != expect) {
    throw IoError("payload length does not match declared shape: " + path);
  }
  is.seekg(0);
  std::vector<float> payload(expect / sizeof(float));
  is.read(reinterpret_cast<char*>(payload.data()), bytes);
  if (!is) throw IoError("payload read failed: " + path);

  Tensor3 delta(p.native_height, p.native_width, channels);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    const float v = payload[i];
    if (!std::isfinite(v)) {
      throw IoError("payload contains non-finite values: " + path);
    }
    delta.data()[i] = static_cast<double>(v);
  }
  if (delta.max_abs() > p.epsilon + kNormSlack) {
    throw IoError("payload violates the declared epsilon ball: " + path);
  }
  p.delta = std::move(delta);
  return p;
}

}  // namespace fb
