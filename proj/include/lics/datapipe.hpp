#pragma once

// Dataset ingestion and caching.
//
// Cache layout (per dataset and split):
//   <root>/<dataset>/<split>/data.bin    pixel payload (dtype per meta)
//   <root>/<dataset>/<split>/labels.bin  int32 little-endian labels
//   <root>/<dataset>/<split>/meta.json   count, shape, dtype, source checksums
//
// Raw sources: MNIST idx files under <root>/mnist/, CIFAR-10 binary batches
// under <root>/cifar10/cifar-10-batches-bin/. SVHN is consumed from the cache
// only (scripts/convert_svhn.py builds it). toy-gaussians is synthesized.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "lics/io_util.hpp"
#include "lics/model.hpp"
#include "lics/png_io.hpp"
#include "lics/rng.hpp"

namespace lics {

struct ToyGaussianSpec {
  int classes = 2;
  int dims = 64;
  int samples = 200;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  std::string name;  // mnist | cifar10 | svhn | toy-gaussians
  fs::path root;     // defaults to $LICS_DATA_ROOT or ./data
  std::string split = "train";  // train | test
  bool download = false;
  std::uint64_t shuffle_seed = 0;  // 0 keeps the natural order
  ToyGaussianSpec toy;

  void validate() const {
    if (name != "mnist" && name != "cifar10" && name != "svhn" &&
        name != "toy-gaussians")
      throw ConfigError("dataset: unknown name '" + name + "'");
    if (split != "train" && split != "test")
      throw ConfigError("dataset: split must be train or test");
    if (name == "toy-gaussians") {
      if (toy.classes < 2 || toy.dims < 1 || toy.samples < 1)
        throw ConfigError("dataset: invalid toy-gaussians parameters");
    }
  }

  fs::path resolved_root() const {
    if (!root.empty()) return root;
    if (const char* env = std::getenv("LICS_DATA_ROOT")) return env;
    return "data";
  }
};

namespace detail {

inline std::uint32_t be32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline std::string crc_hex(const std::vector<char>& bytes) {
  std::uint32_t c = static_cast<std::uint32_t>(::crc32(
      0, reinterpret_cast<const Bytef*>(bytes.data()),
      static_cast<uInt>(bytes.size())));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", c);
  return buf;
}

struct RawSplit {
  std::vector<std::uint8_t> pixels;  // count * C*H*W
  std::vector<std::int32_t> labels;
  Shape chw;
  nlohmann::ordered_json checksums = nlohmann::ordered_json::object();
};

inline RawSplit read_mnist_idx(const fs::path& dir, const std::string& split) {
  std::string prefix = split == "train" ? "train" : "t10k";
  fs::path img_path = dir / (prefix + "-images-idx3-ubyte");
  fs::path lbl_path = dir / (prefix + "-labels-idx1-ubyte");
  for (const auto& p : {img_path, lbl_path})
    if (!fs::exists(p))
      throw IoError("mnist ingestion: missing file " + p.string() +
                    " (supply the idx files or rerun with --download)");
  auto img = read_file_bytes(img_path);
  auto lbl = read_file_bytes(lbl_path);
  const auto* ip = reinterpret_cast<const unsigned char*>(img.data());
  const auto* lp = reinterpret_cast<const unsigned char*>(lbl.data());
  if (img.size() < 16 || be32(ip) != 0x803)
    throw IoError("mnist ingestion: bad magic in " + img_path.string());
  if (lbl.size() < 8 || be32(lp) != 0x801)
    throw IoError("mnist ingestion: bad magic in " + lbl_path.string());
  std::uint32_t n = be32(ip + 4), h = be32(ip + 8), w = be32(ip + 12);
  if (be32(lp + 4) != n)
    throw IoError("mnist ingestion: image/label count mismatch in " +
                  lbl_path.string());
  if (img.size() != 16 + static_cast<std::size_t>(n) * h * w)
    throw IoError("mnist ingestion: truncated " + img_path.string());
  RawSplit out;
  out.chw = {1, static_cast<int>(h), static_cast<int>(w)};
  out.pixels.assign(img.begin() + 16, img.end());
  out.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i)
    out.labels[i] = lp[8 + i];
  out.checksums[img_path.filename().string()] = crc_hex(img);
  out.checksums[lbl_path.filename().string()] = crc_hex(lbl);
  return out;
}

inline RawSplit read_cifar10_bin(const fs::path& dir,
                                 const std::string& split) {
  std::vector<std::string> files;
  if (split == "train")
    for (int i = 1; i <= 5; ++i)
      files.push_back("data_batch_" + std::to_string(i) + ".bin");
  else
    files.push_back("test_batch.bin");
  RawSplit out;
  out.chw = {3, 32, 32};
  const std::size_t rec = 1 + 3072;
  for (const auto& f : files) {
    fs::path p = dir / "cifar-10-batches-bin" / f;
    if (!fs::exists(p))
      throw IoError("cifar10 ingestion: missing file " + p.string());
    auto bytes = read_file_bytes(p);
    if (bytes.size() % rec != 0)
      throw IoError("cifar10 ingestion: truncated " + p.string());
    std::size_t n = bytes.size() / rec;
    for (std::size_t i = 0; i < n; ++i) {
      const auto* r = reinterpret_cast<const unsigned char*>(bytes.data()) +
                      i * rec;
      out.labels.push_back(r[0]);
      out.pixels.insert(out.pixels.end(), r + 1, r + rec);
    }
    out.checksums[f] = crc_hex(bytes);
  }
  return out;
}

}  // namespace detail

template <typename T>
struct Dataset {
  ImageBatch<T> data;
  nlohmann::ordered_json meta;
};

namespace detail {

template <typename T>
ImageBatch<T> toy_gaussians(const DatasetSpec& spec) {
  const auto& t = spec.toy;
  int side = static_cast<int>(std::round(std::sqrt(t.dims)));
  Shape chw = (side * side == t.dims) ? Shape{1, side, side}
                                      : Shape{1, 1, t.dims};
  // split-dependent stream so train and test are disjoint but reproducible
  std::uint64_t stream = spec.split == "train" ? 1 : 2;
  Rng rng = Rng::stream(t.seed, stream);
  Rng center_rng = Rng::stream(t.seed, 0);  // centers shared across splits
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(t.classes));
  for (auto& c : centers) {
    c.resize(static_cast<std::size_t>(t.dims));
    for (auto& v : c) v = center_rng.uniform(0.25, 0.75);
  }
  Tensor<T> px({t.samples, chw[0], chw[1], chw[2]});
  std::vector<int> labels(static_cast<std::size_t>(t.samples));
  for (int i = 0; i < t.samples; ++i) {
    int cls = i % t.classes;
    labels[static_cast<std::size_t>(i)] = cls;
    for (int d = 0; d < t.dims; ++d) {
      double v = centers[static_cast<std::size_t>(cls)]
                        [static_cast<std::size_t>(d)] +
                 0.08 * rng.normal();
      px[static_cast<std::int64_t>(i) * t.dims + d] =
          static_cast<T>(std::min(1.0, std::max(0.0, v)));
    }
  }
  return {std::move(px), std::move(labels)};
}

inline void write_cache(const fs::path& dir, const RawSplit& raw,
                        const std::string& dataset, const std::string& split,
                        const std::string& dtype) {
  fs::create_directories(dir);
  std::int64_t px_count = static_cast<std::int64_t>(raw.labels.size()) *
                          raw.chw[0] * raw.chw[1] * raw.chw[2];
  if (dtype == "u8") {
    atomic_write(dir / "data.bin", raw.pixels.data(), raw.pixels.size());
  } else {
    std::vector<float> f(static_cast<std::size_t>(px_count));
    for (std::int64_t i = 0; i < px_count; ++i)
      f[static_cast<std::size_t>(i)] =
          static_cast<float>(raw.pixels[static_cast<std::size_t>(i)]) / 255.f;
    atomic_write(dir / "data.bin", f.data(), f.size() * sizeof(float));
  }
  atomic_write(dir / "labels.bin", raw.labels.data(),
               raw.labels.size() * sizeof(std::int32_t));
  nlohmann::ordered_json meta{
      {"dataset", dataset},
      {"split", split},
      {"count", raw.labels.size()},
      {"shape", raw.chw},
      {"dtype", dtype},
      {"label_dtype", "i32"},
      {"source_checksums", raw.checksums}};
  atomic_write(dir / "meta.json", meta.dump(2));
}

template <typename T>
Dataset<T> read_cache(const fs::path& dir, const std::string& dataset,
                      const std::string& split) {
  auto meta = nlohmann::ordered_json::parse(read_file_text(dir / "meta.json"));
  if (meta.at("dataset") != dataset || meta.at("split") != split)
    throw IoError("cache mismatch in " + (dir / "meta.json").string());
  std::int64_t count = meta.at("count").get<std::int64_t>();
  Shape chw = meta.at("shape").get<Shape>();
  std::string dtype = meta.at("dtype").get<std::string>();
  std::int64_t px_count = count * chw[0] * chw[1] * chw[2];

  auto data = read_file_bytes(dir / "data.bin");
  Tensor<T> px({static_cast<int>(count), chw[0], chw[1], chw[2]});
  if (dtype == "u8") {
    if (static_cast<std::int64_t>(data.size()) != px_count)
      throw IoError("cache payload size mismatch in " +
                    (dir / "data.bin").string());
    for (std::int64_t i = 0; i < px_count; ++i)
      px[i] = static_cast<T>(
                  static_cast<unsigned char>(data[static_cast<std::size_t>(i)])) /
              T(255);
  } else if (dtype == "f32") {
    if (static_cast<std::int64_t>(data.size()) !=
        px_count * static_cast<std::int64_t>(sizeof(float)))
      throw IoError("cache payload size mismatch in " +
                    (dir / "data.bin").string());
    const float* f = reinterpret_cast<const float*>(data.data());
    for (std::int64_t i = 0; i < px_count; ++i) px[i] = static_cast<T>(f[i]);
  } else {
    throw IoError("cache dtype '" + dtype + "' unsupported in " +
                  (dir / "meta.json").string());
  }

  auto lb = read_file_bytes(dir / "labels.bin");
  if (static_cast<std::int64_t>(lb.size()) !=
      count * static_cast<std::int64_t>(sizeof(std::int32_t)))
    throw IoError("cache label size mismatch in " +
                  (dir / "labels.bin").string());
  std::vector<int> labels(static_cast<std::size_t>(count));
  const auto* lp = reinterpret_cast<const std::int32_t*>(lb.data());
  for (std::int64_t i = 0; i < count; ++i)
    labels[static_cast<std::size_t>(i)] = lp[i];

  return {{std::move(px), std::move(labels)}, meta};
}

inline bool acquire_build_lock(const fs::path& dir) {
  fs::create_directories(dir);
  fs::path lock = dir / ".build-lock";
  FILE* f = std::fopen(lock.c_str(), "wx");
  if (!f) return false;
  std::fclose(f);
  return true;
}

inline void release_build_lock(const fs::path& dir) {
  std::error_code ec;
  fs::remove(dir / ".build-lock", ec);
}

}  // namespace detail

// Loads a dataset split with unit-interval pixels and validated labels.
// Deterministic: file order, optionally shuffled by spec.shuffle_seed.
template <typename T>
Dataset<T> load_dataset(const DatasetSpec& spec) {
  spec.validate();
  fs::path root = spec.resolved_root();

  Dataset<T> ds;
  if (spec.name == "toy-gaussians") {
    ds.data = detail::toy_gaussians<T>(spec);
    ds.meta = {{"dataset", spec.name},
               {"split", spec.split},
               {"count", ds.data.size()},
               {"shape", Shape{ds.data.pixels.dim(1), ds.data.pixels.dim(2),
                               ds.data.pixels.dim(3)}},
               {"dtype", "synthesized"}};
  } else {
    fs::path cache = root / spec.name / spec.split;
    if (!fs::exists(cache / "meta.json")) {
      if (spec.name == "svhn")
        throw IoError("svhn ingestion: missing cache " +
                      (cache / "meta.json").string() +
                      "; build it with scripts/convert_svhn.py");
      bool owner = detail::acquire_build_lock(cache);
      if (!owner) {
        // another process is building this cache; wait for it
        for (int i = 0; i < 600 && !fs::exists(cache / "meta.json"); ++i)
          std::this_thread::sleep_for(std::chrono::milliseconds(100));
        if (!fs::exists(cache / "meta.json"))
          throw IoError("cache build timed out waiting for " +
                        (cache / "meta.json").string());
      } else {
        try {
          detail::RawSplit raw =
              spec.name == "mnist"
                  ? detail::read_mnist_idx(root / "mnist", spec.split)
                  : detail::read_cifar10_bin(root / "cifar10", spec.split);
          detail::write_cache(cache, raw, spec.name, spec.split,
                              spec.name == "mnist" ? "u8" : "f32");
        } catch (...) {
          detail::release_build_lock(cache);
          throw;
        }
        detail::release_build_lock(cache);
      }
    }
    ds = detail::read_cache<T>(cache, spec.name, spec.split);
  }

  int num_classes = spec.name == "toy-gaussians" ? spec.toy.classes : 10;
  ds.data.validate(num_classes);

  if (spec.shuffle_seed != 0) {
    std::vector<int> order(static_cast<std::size_t>(ds.data.size()));
    for (std::size_t i = 0; i < order.size(); ++i)
      order[i] = static_cast<int>(i);
    Rng rng(spec.shuffle_seed);
    rng.shuffle(order.begin(), order.end());
    Tensor<T> px(ds.data.pixels.shape());
    std::vector<int> labels(order.size());
    std::int64_t stride = ds.data.pixels.numel() / ds.data.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::copy(ds.data.pixels.data() + order[i] * stride,
                ds.data.pixels.data() + (order[i] + 1) * stride,
                px.data() + static_cast<std::int64_t>(i) * stride);
      labels[i] = ds.data.labels[static_cast<std::size_t>(order[i])];
    }
    ds.data.pixels = std::move(px);
    ds.data.labels = std::move(labels);
  }
  return ds;
}

// --- grid export -----------------------------------------------------------

template <typename T>
struct GridPair {
  Tensor<T> source;       // [C,H,W]
  Tensor<T> adversarial;  // [C,H,W]
  int true_label = -1;
  int pred_label = -1;
};

// One row per pair: source next to adversarial, 8-bit quantized, with a
// sidecar JSON naming labels and the quantization.
template <typename T>
void export_grid(const std::vector<GridPair<T>>& pairs, const fs::path& path) {
  if (pairs.empty())
    throw ConfigError("export_grid: no pairs to export");
  const auto& s0 = pairs.front().source.shape();
  if (s0.size() != 3) throw ShapeError("export_grid: images must be CHW");
  int c = s0[0], h = s0[1], w = s0[2];
  if (c != 1 && c != 3)
    throw ConfigError("export_grid: 1 or 3 channels supported");
  const int pad = 2;
  int rows = static_cast<int>(pairs.size());
  png::Image img;
  img.channels = c;
  img.width = 2 * w + 3 * pad;
  img.height = rows * h + (rows + 1) * pad;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * c, 255);

  auto blit = [&](const Tensor<T>& t, int row, int col) {
    if (t.shape() != s0)
      throw ShapeError("export_grid: mixed image shapes");
    int y0 = pad + row * (h + pad);
    int x0 = pad + col * (w + pad);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          T v = t[(static_cast<std::int64_t>(ch) * h + y) * w + x];
          v = std::min(T(1), std::max(T(0), v));
          int q = static_cast<int>(std::lround(static_cast<double>(v) * 255.0));
          img.pixels[(static_cast<std::size_t>(y0 + y) * img.width +
                      (x0 + x)) *
                         c +
                     ch] = static_cast<std::uint8_t>(q);
        }
  };
  for (int r = 0; r < rows; ++r) {
    blit(pairs[static_cast<std::size_t>(r)].source, r, 0);
    blit(pairs[static_cast<std::size_t>(r)].adversarial, r, 1);
  }
  png::write_png(path, img);

  nlohmann::ordered_json side{{"rows", rows},
                              {"columns", {"source", "adversarial"}},
                              {"cell_shape", Shape{c, h, w}},
                              {"padding", pad},
                              {"quantization_levels", 255},
                              {"labels", nlohmann::ordered_json::array()}};
  for (const auto& p : pairs)
    side["labels"].push_back(
        {{"true", p.true_label}, {"pred", p.pred_label}});
  fs::path sidecar = path;
  sidecar += ".json";
  atomic_write(sidecar, side.dump(2));
}

}  // namespace lics
