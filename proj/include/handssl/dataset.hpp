#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "handssl/geometry.hpp"
#include "handssl/rng.hpp"
#include "handssl/synthetic.hpp"

namespace handssl {

struct DatasetMeta {
  int n_joints = 14;
  double cube_mm = 250.0;
  CameraIntrinsics intrinsics{241.42, 241.42, 63.5, 63.5};
  std::vector<std::string> joint_names;
};

// On-disk-shaped dataset: raw depth rasters plus crop centers and optional
// joint labels. Cropping to network inputs happens at materialize time.
struct Dataset {
  DatasetMeta meta;
  std::vector<RawRecord> records;

  size_t size() const { return records.size(); }
};

// A network-ready sample. Unlabeled samples carry no public joints; the
// original labels, when known, are retained privately for diagnostics only.
struct Sample {
  DepthFrame frame;
  std::optional<JointSet> joints;
  std::optional<JointSet> private_joints;
  std::string id;
};

using SampleSet = std::vector<Sample>;

/// Generates n labeled synthetic records; deterministic given the stream.
inline Dataset generate_synthetic(const SyntheticHandConfig& cfg, int n, RngStream& rng) {
  if (n <= 0) throw std::invalid_argument("generate_synthetic: n must be positive");
  cfg.validate();
  Dataset ds;
  ds.meta.n_joints = cfg.n_joints;
  ds.meta.cube_mm = cfg.cube_mm;
  ds.meta.intrinsics = cfg.intrinsics;
  ds.meta.joint_names = cfg.joint_names;
  ds.records.reserve(size_t(n));
  char buf[16];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "s%06d", i);
    ds.records.push_back(generate_record(cfg, rng, buf));
  }
  return ds;
}

/// Crops every record into a normalized DepthFrame.
inline SampleSet materialize(const Dataset& ds, int out_size) {
  SampleSet out;
  out.reserve(ds.records.size());
  for (const auto& rec : ds.records) {
    Sample s;
    s.id = rec.id;
    s.frame =
        crop_and_normalize(rec.raw, ds.meta.intrinsics, rec.center, ds.meta.cube_mm, out_size);
    if (rec.joints) {
      if (int(rec.joints->count()) != ds.meta.n_joints)
        throw std::runtime_error("materialize: record " + rec.id + " has wrong joint count");
      s.joints = rec.joints;
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct SplitSpec {
  double label_fraction = 0.05;  // fraction in (0,1], or an absolute count if > 1
  uint64_t seed = 1;
  double unlabeled_fraction = 1.0;
};

struct SplitResult {
  SampleSet labeled;
  SampleSet unlabeled;  // joints stripped to private_joints
};

/// Seed-deterministic disjoint split. The unlabeled side keeps its labels
/// privately so pseudo-label accuracy diagnostics remain possible.
inline SplitResult split(const SampleSet& all, const SplitSpec& spec) {
  const size_t n = all.size();
  size_t n_labeled;
  if (spec.label_fraction > 1.0) {
    n_labeled = size_t(spec.label_fraction);
    if (n_labeled > n) throw std::invalid_argument("split: labeled count exceeds dataset size");
  } else {
    if (!(spec.label_fraction > 0.0))
      throw std::invalid_argument("split: label_fraction must be positive");
    n_labeled = size_t(std::llround(spec.label_fraction * double(n)));
  }
  if (!(spec.unlabeled_fraction > 0.0) || spec.unlabeled_fraction > 1.0)
    throw std::invalid_argument("split: unlabeled_fraction must be in (0, 1]");

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng(spec.seed);
  rng.shuffle(order);

  SplitResult res;
  for (size_t i = 0; i < n_labeled; ++i) {
    const auto& s = all[order[i]];
    if (!s.joints) throw std::invalid_argument("split: dataset must be fully labeled");
    res.labeled.push_back(s);
  }
  const size_t pool = n - n_labeled;
  const size_t n_unlabeled = size_t(std::llround(spec.unlabeled_fraction * double(pool)));
  for (size_t i = 0; i < n_unlabeled; ++i) {
    Sample s = all[order[n_labeled + i]];
    s.private_joints = std::move(s.joints);
    s.joints.reset();
    res.unlabeled.push_back(std::move(s));
  }
  return res;
}

/// One epoch of index batches: shuffled, the final short batch retained.
inline std::vector<std::vector<int>> batches(size_t n_samples, int batch_size, RngStream& rng) {
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  std::vector<int> order(n_samples);
  for (size_t i = 0; i < n_samples; ++i) order[i] = int(i);
  rng.shuffle(order);
  std::vector<std::vector<int>> out;
  for (size_t pos = 0; pos < n_samples; pos += size_t(batch_size)) {
    const size_t end = std::min(n_samples, pos + size_t(batch_size));
    out.emplace_back(order.begin() + long(pos), order.begin() + long(end));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generic on-disk format: meta.json + one <id>.depth / <id>.json per record.
// The .depth raster is bit-exact: two little-endian u32 dims then row-major
// little-endian u16 depths in mm.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  return true;
}

}  // namespace detail

inline void save_generic(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["n_joints"] = ds.meta.n_joints;
  meta["cube_mm"] = ds.meta.cube_mm;
  meta["intrinsics"] = {{"fx", ds.meta.intrinsics.fx},
                        {"fy", ds.meta.intrinsics.fy},
                        {"cx", ds.meta.intrinsics.cx},
                        {"cy", ds.meta.intrinsics.cy}};
  meta["joint_names"] = ds.meta.joint_names;
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";

  for (const auto& rec : ds.records) {
    std::ofstream depth(dir / (rec.id + ".depth"), std::ios::binary);
    detail::put_u32(depth, uint32_t(rec.raw.width));
    detail::put_u32(depth, uint32_t(rec.raw.height));
    for (uint16_t z : rec.raw.mm) {
      const unsigned char b[2] = {static_cast<unsigned char>(z),
                                  static_cast<unsigned char>(z >> 8)};
      depth.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!depth) throw std::runtime_error("save_generic: failed writing " + rec.id + ".depth");

    nlohmann::json rj;
    rj["crop_center_mm"] = {rec.center[0], rec.center[1], rec.center[2]};
    if (rec.joints) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& p : rec.joints->coords) arr.push_back({p[0], p[1], p[2]});
      rj["joints_mm"] = arr;
    }
    std::ofstream(dir / (rec.id + ".json")) << rj.dump() << "\n";
  }
}

inline Dataset load_generic(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir) || !fs::is_directory(dir))
    throw std::runtime_error("load_generic: no such dataset directory: " + dir.string());

  Dataset ds;
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".depth") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());

  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) {
    if (ids.empty()) return ds;  // empty directory: empty dataset
    throw std::runtime_error("load_generic: missing meta.json in " + dir.string());
  }
  nlohmann::json meta;
  try {
    std::ifstream(meta_path) >> meta;
    ds.meta.n_joints = meta.at("n_joints").get<int>();
    ds.meta.cube_mm = meta.at("cube_mm").get<double>();
    const auto& k = meta.at("intrinsics");
    ds.meta.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(),
                          k.at("cx").get<double>(), k.at("cy").get<double>()};
    ds.meta.joint_names = meta.value("joint_names", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_generic: ill-formed meta.json: " + std::string(e.what()));
  }

  for (const auto& id : ids) {
    RawRecord rec;
    rec.id = id;
    const fs::path dpath = dir / (id + ".depth");
    std::ifstream depth(dpath, std::ios::binary);
    uint32_t w = 0, h = 0;
    if (!detail::get_u32(depth, w) || !detail::get_u32(depth, h))
      throw std::runtime_error("load_generic: record " + id + ": truncated depth header");
    rec.raw.width = int(w);
    rec.raw.height = int(h);
    rec.raw.mm.resize(size_t(w) * h);
    std::vector<unsigned char> buf(size_t(w) * h * 2);
    if (!depth.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
      throw std::runtime_error("load_generic: record " + id + ": truncated depth raster");
    for (size_t i = 0; i < rec.raw.mm.size(); ++i)
      rec.raw.mm[i] = uint16_t(buf[2 * i]) | uint16_t(buf[2 * i + 1]) << 8;

    const fs::path jpath = dir / (id + ".json");
    if (!fs::exists(jpath))
      throw std::runtime_error("load_generic: record " + id + ": missing sidecar json");
    nlohmann::json rj;
    try {
      std::ifstream(jpath) >> rj;
      const auto& ctr = rj.at("crop_center_mm");
      rec.center = Vec3{ctr.at(0).get<double>(), ctr.at(1).get<double>(),
                        ctr.at(2).get<double>()};
      if (rj.contains("joints_mm")) {
        JointSet js;
        js.frame = JointFrame::CameraMM;
        for (const auto& p : rj.at("joints_mm"))
          js.coords.push_back(Vec3{p.at(0).get<double>(), p.at(1).get<double>(),
                                   p.at(2).get<double>()});
        if (int(js.coords.size()) != ds.meta.n_joints)
          throw std::runtime_error("record " + id + ": joint count mismatch with meta");
        rec.joints = std::move(js);
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_generic: record " + id + ": ill-formed json: " +
                               std::string(e.what()));
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace handssl
