#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/data/dataset.hpp"
#include "dpsplit/data/formats.hpp"
#include "dpsplit/data/resize.hpp"
#include "dpsplit/data/synthetic.hpp"
#include "dpsplit/rng.hpp"

namespace dpsplit {

// On-disk cache layout: <root>/<dataset>/<split>/images.bin holds the pixel
// payloads back to back; manifest.tsv lists source_id, label, and the byte
// offset of each image. Ingestion from the raw archives is single-writer and
// the manifest is written last, so a present manifest marks a complete split.
namespace cache {

inline constexpr const char* kManifestVersion = "dpsplit-manifest v1";

struct Entry {
  std::string source_id;
  int label = 0;
  std::uint64_t offset = 0;
};

struct SplitIndex {
  std::string dtype;  // "u8" or "f32"
  int c = 0, h = 0, w = 0;
  std::vector<Entry> entries;
  std::string bin_path;

  std::uint64_t image_bytes() const {
    return static_cast<std::uint64_t>(c) * h * w * (dtype == "u8" ? 1 : 4);
  }
};

class Writer {
 public:
  Writer(const std::filesystem::path& dir, std::string dtype, int c, int h, int w)
      : dir_(dir), dtype_(std::move(dtype)), c_(c), h_(h), w_(w) {
    std::filesystem::create_directories(dir_);
    bin_.open(dir_ / "images.bin", std::ios::binary | std::ios::trunc);
    if (!bin_) throw IoError("cannot open " + (dir_ / "images.bin").string());
  }

  void add(const Tensor<float>& img, int label, const std::string& source_id) {
    require_shape(img, {c_, h_, w_}, "cache image");
    Entry e;
    e.source_id = source_id;
    e.label = label;
    e.offset = offset_;
    if (dtype_ == "u8") {
      std::vector<std::uint8_t> buf(static_cast<std::size_t>(img.numel()));
      for (std::int64_t i = 0; i < img.numel(); ++i)
        buf[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(img[i]);
      bin_.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size()));
      offset_ += buf.size();
    } else {
      bin_.write(reinterpret_cast<const char*>(img.data()),
                 static_cast<std::streamsize>(img.numel() * 4));
      offset_ += static_cast<std::uint64_t>(img.numel()) * 4;
    }
    entries_.push_back(std::move(e));
  }

  void finish() {
    bin_.flush();
    if (!bin_) throw IoError("write failed under " + dir_.string());
    bin_.close();
    std::ofstream mf(dir_ / "manifest.tsv", std::ios::trunc);
    if (!mf) throw IoError("cannot open " + (dir_ / "manifest.tsv").string());
    mf << kManifestVersion << "\n";
    mf << "dtype " << dtype_ << "\n";
    mf << "shape " << c_ << " " << h_ << " " << w_ << "\n";
    for (const Entry& e : entries_)
      mf << e.source_id << "\t" << e.label << "\t" << e.offset << "\n";
    if (!mf) throw IoError("manifest write failed under " + dir_.string());
  }

 private:
  std::filesystem::path dir_;
  std::string dtype_;
  int c_, h_, w_;
  std::ofstream bin_;
  std::uint64_t offset_ = 0;
  std::vector<Entry> entries_;
};

inline SplitIndex read_index(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.tsv");
  if (!mf) throw IoError("cannot open " + (dir / "manifest.tsv").string());
  SplitIndex idx;
  idx.bin_path = (dir / "images.bin").string();
  std::string line;
  if (!std::getline(mf, line) || line != kManifestVersion)
    throw IngestError("unsupported manifest version in " + dir.string());
  if (!std::getline(mf, line) || line.rfind("dtype ", 0) != 0)
    throw IngestError("manifest missing dtype in " + dir.string());
  idx.dtype = line.substr(6);
  if (idx.dtype != "u8" && idx.dtype != "f32")
    throw IngestError("manifest dtype '" + idx.dtype + "' unsupported in " + dir.string());
  if (!std::getline(mf, line) || line.rfind("shape ", 0) != 0)
    throw IngestError("manifest missing shape in " + dir.string());
  {
    std::istringstream ss(line.substr(6));
    if (!(ss >> idx.c >> idx.h >> idx.w)) throw IngestError("bad manifest shape in " + dir.string());
  }
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IngestError("malformed manifest row in " + dir.string());
    Entry e;
    e.source_id = line.substr(0, t1);
    e.label = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    e.offset = std::stoull(line.substr(t2 + 1));
    idx.entries.push_back(std::move(e));
  }
  return idx;
}

inline LabeledExample load_entry(const SplitIndex& idx, std::ifstream& bin, std::size_t i) {
  const Entry& e = idx.entries.at(i);
  LabeledExample ex;
  ex.label = e.label;
  ex.source_id = e.source_id;
  ex.image = Tensor<float>({idx.c, idx.h, idx.w});
  bin.seekg(static_cast<std::streamoff>(e.offset));
  if (idx.dtype == "u8") {
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(ex.image.numel()));
    bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    for (std::size_t j = 0; j < buf.size(); ++j)
      ex.image[static_cast<std::int64_t>(j)] = static_cast<float>(buf[j]);
  } else {
    bin.read(reinterpret_cast<char*>(ex.image.data()),
             static_cast<std::streamsize>(ex.image.numel() * 4));
  }
  if (!bin) throw IngestError("truncated images.bin behind " + idx.bin_path);
  return ex;
}

}  // namespace cache

namespace loaders {

inline std::filesystem::path split_dir(const std::filesystem::path& root, DatasetName name,
                                       const std::string& split) {
  return root / to_string(name) / split;
}

inline bool split_ready(const std::filesystem::path& root, DatasetName name,
                        const std::string& split) {
  return std::filesystem::exists(split_dir(root, name, split) / "manifest.tsv");
}

inline std::filesystem::path raw_path(const std::filesystem::path& root, const std::string& file) {
  const std::filesystem::path direct = root / "raw" / file;
  return direct;
}

inline void require_raw(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p))
    throw IngestError("raw dataset file missing: " + p.string() +
                      " (run fetch-data or place the archive there)");
}

// SVHN cropped-digit archives: X is uint8 (32, 32, 3, N) column-major, y maps
// digit 0 to label 10.
inline void ingest_svhn(const std::filesystem::path& root) {
  const std::pair<const char*, const char*> files[2] = {{"train_32x32.mat", "train"},
                                                        {"test_32x32.mat", "test"}};
  for (const auto& [file, split] : files) {
    if (split_ready(root, DatasetName::kSvhn, split)) continue;
    const auto p = raw_path(root, file);
    require_raw(p);
    const auto vars = formats::read_mat5(formats::read_file(p.string()), p.string());
    const auto xit = vars.find("X");
    const auto yit = vars.find("y");
    if (xit == vars.end() || yit == vars.end())
      throw IngestError("svhn archive lacks X/y variables: " + p.string());
    const formats::MatVariable& X = xit->second;
    const formats::MatVariable& y = yit->second;
    if (X.dims.size() != 4 || X.dims[0] != 32 || X.dims[1] != 32 || X.dims[2] != 3 ||
        X.data_type != formats::mat5::kMiUint8)
      throw IngestError("svhn X has unexpected layout: " + p.string());
    const int n = X.dims[3];
    if (static_cast<int>(y.count()) != n) throw IngestError("svhn X/y size mismatch: " + p.string());

    cache::Writer w(split_dir(root, DatasetName::kSvhn, split), "u8", 3, 32, 32);
    Tensor<float> img({3, 32, 32});
    for (int i = 0; i < n; ++i) {
      const std::uint8_t* base = X.raw.data() + static_cast<std::size_t>(i) * 3072;
      for (int c = 0; c < 3; ++c)
        for (int yy = 0; yy < 32; ++yy)
          for (int xx = 0; xx < 32; ++xx)
            img.at3(c, yy, xx) = static_cast<float>(base[yy + 32 * xx + 1024 * c]);
      const int label = static_cast<int>(y.value_at(static_cast<std::size_t>(i))) % 10;
      w.add(img, label, std::string("svhn/") + split + "/" + std::to_string(i));
    }
    w.finish();
  }
}

// CIFAR binary records: label byte(s) then 3072 bytes already in (c, h, w)
// plane order. CIFAR-100 keeps its 20 coarse labels (the pretraining task).
inline void ingest_cifar(const std::filesystem::path& root, bool hundred) {
  const DatasetName name = DatasetName::kCifar10;  // cifar100 caches under its own directory name
  const std::string dsdir = hundred ? "cifar100" : to_string(name);
  const auto ready = [&](const std::string& split) {
    return std::filesystem::exists(root / dsdir / split / "manifest.tsv");
  };
  if (ready("train") && ready("test")) return;

  const std::string archive = hundred ? "cifar-100-binary.tar.gz" : "cifar-10-binary.tar.gz";
  const auto p = raw_path(root, archive);
  require_raw(p);
  const auto entries = formats::untar_gz(formats::read_file(p.string()), p.string());

  const auto find_member = [&](const std::string& suffix) -> const formats::ArchiveEntry* {
    for (const auto& e : entries)
      if (e.name.size() >= suffix.size() &&
          e.name.compare(e.name.size() - suffix.size(), suffix.size(), suffix) == 0)
        return &e;
    return nullptr;
  };

  const int record = hundred ? 2 + 3072 : 1 + 3072;
  const auto write_split = [&](const std::string& split, const std::vector<std::string>& members) {
    cache::Writer w(root / dsdir / split, "u8", 3, 32, 32);
    Tensor<float> img({3, 32, 32});
    int idx = 0;
    for (const std::string& m : members) {
      const formats::ArchiveEntry* e = find_member(m);
      if (!e) throw IngestError("archive member missing: " + m + " in " + p.string());
      if (e->data.size() % record != 0)
        throw IngestError("archive member has a partial record: " + m + " in " + p.string());
      const int n = static_cast<int>(e->data.size()) / record;
      for (int i = 0; i < n; ++i, ++idx) {
        const std::uint8_t* rec = e->data.data() + static_cast<std::size_t>(i) * record;
        const int label = rec[0];  // cifar100 byte 0 is the coarse label
        const std::uint8_t* px = rec + (hundred ? 2 : 1);
        for (int j = 0; j < 3072; ++j) img[j] = static_cast<float>(px[j]);
        w.add(img, label, dsdir + "/" + split + "/" + std::to_string(idx));
      }
    }
    w.finish();
  };

  if (hundred) {
    write_split("train", {"train.bin"});
    write_split("test", {"test.bin"});
  } else {
    write_split("train", {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                          "data_batch_4.bin", "data_batch_5.bin"});
    write_split("test", {"test_batch.bin"});
  }
}

// STL-10 labeled images: 96x96, per-channel planes stored column-major.
// Train and test archives pool into one split that is re-partitioned at load
// time, and every image is resized to 32x32.
inline void ingest_stl10(const std::filesystem::path& root) {
  if (split_ready(root, DatasetName::kStl10, "pool")) return;
  const auto p = raw_path(root, "stl10_binary.tar.gz");
  require_raw(p);
  const auto entries = formats::untar_gz(formats::read_file(p.string()), p.string());
  const auto find_member = [&](const std::string& suffix) -> const formats::ArchiveEntry* {
    for (const auto& e : entries)
      if (e.name.size() >= suffix.size() &&
          e.name.compare(e.name.size() - suffix.size(), suffix.size(), suffix) == 0)
        return &e;
    return nullptr;
  };

  cache::Writer w(split_dir(root, DatasetName::kStl10, "pool"), "f32", 3, 32, 32);
  int idx = 0;
  for (const auto& [xm, ym] : {std::pair{"train_X.bin", "train_y.bin"},
                               std::pair{"test_X.bin", "test_y.bin"}}) {
    const formats::ArchiveEntry* X = find_member(xm);
    const formats::ArchiveEntry* y = find_member(ym);
    if (!X || !y) throw IngestError(std::string("archive member missing: ") + xm + " in " + p.string());
    const std::size_t per = 3u * 96u * 96u;
    if (X->data.size() % per != 0 || X->data.size() / per != y->data.size())
      throw IngestError(std::string("image/label sizes disagree: ") + xm + " in " + p.string());
    const int n = static_cast<int>(y->data.size());
    Tensor<float> img({3, 96, 96});
    for (int i = 0; i < n; ++i, ++idx) {
      const std::uint8_t* base = X->data.data() + static_cast<std::size_t>(i) * per;
      for (int c = 0; c < 3; ++c)
        for (int xx = 0; xx < 96; ++xx)
          for (int yy = 0; yy < 96; ++yy)
            img.at3(c, yy, xx) = static_cast<float>(base[c * 9216 + xx * 96 + yy]);
      const int label = static_cast<int>(y->data[static_cast<std::size_t>(i)]) - 1;
      if (label < 0 || label > 9) throw IngestError("stl10 label out of range: " + p.string());
      w.add(resize_bilinear(img, 32, 32), label, "stl10/pool/" + std::to_string(idx));
    }
  }
  w.finish();
}

// GTSRB training archive: PPM images under per-class directories. The cache
// keeps original class ids; the 10-class subset and relabeling happen at
// load time.
inline void ingest_gtsrb(const std::filesystem::path& root) {
  if (split_ready(root, DatasetName::kGtsrb, "pool")) return;
  const auto p = raw_path(root, "GTSRB_Final_Training_Images.zip");
  require_raw(p);
  const auto entries = formats::unzip(formats::read_file(p.string()), p.string());

  cache::Writer w(split_dir(root, DatasetName::kGtsrb, "pool"), "f32", 3, 32, 32);
  for (const auto& e : entries) {
    if (e.name.size() < 4 || e.name.compare(e.name.size() - 4, 4, ".ppm") != 0) continue;
    const auto slash = e.name.rfind('/');
    const auto slash2 = slash == std::string::npos ? std::string::npos : e.name.rfind('/', slash - 1);
    if (slash == std::string::npos || slash2 == std::string::npos)
      throw IngestError("ppm member outside a class directory: " + e.name);
    const std::string cls_dir = e.name.substr(slash2 + 1, slash - slash2 - 1);
    int label = 0;
    try {
      label = std::stoi(cls_dir);
    } catch (const std::exception&) {
      throw IngestError("cannot parse class id from member path: " + e.name);
    }
    const formats::PpmImage ppm = formats::read_ppm(e.data, e.name);
    Tensor<float> img({3, ppm.height, ppm.width});
    for (int y = 0; y < ppm.height; ++y)
      for (int x = 0; x < ppm.width; ++x)
        for (int c = 0; c < 3; ++c)
          img.at3(c, y, x) =
              static_cast<float>(ppm.rgb[(static_cast<std::size_t>(y) * ppm.width + x) * 3 + c]);
    w.add(resize_bilinear(img, 32, 32), label, "gtsrb/" + e.name);
  }
  w.finish();
}

inline void ingest(const std::filesystem::path& root, DatasetName name) {
  switch (name) {
    case DatasetName::kSvhn: ingest_svhn(root); return;
    case DatasetName::kCifar10: ingest_cifar(root, /*hundred=*/false); return;
    case DatasetName::kStl10: ingest_stl10(root); return;
    case DatasetName::kGtsrb: ingest_gtsrb(root); return;
    case DatasetName::kSynthetic: return;  // generated, never cached
  }
}

inline std::vector<LabeledExample> load_selected(const cache::SplitIndex& idx,
                                                 const std::vector<std::size_t>& which) {
  std::ifstream bin(idx.bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + idx.bin_path);
  std::vector<LabeledExample> out;
  out.reserve(which.size());
  for (std::size_t i : which) out.push_back(cache::load_entry(idx, bin, i));
  return out;
}

// Seeded draw of `want` distinct indices out of [0, n).
inline std::vector<std::size_t> select_indices(std::size_t n, int want, std::uint64_t seed,
                                               const std::string& tag) {
  if (static_cast<std::size_t>(want) > n)
    throw ConfigError(tag + ": need " + std::to_string(want) + " examples, cache holds " +
                      std::to_string(n));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "select", tag));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(want));
  return idx;
}

}  // namespace loaders

// Loads (ingesting into the cache first if needed) the dataset named by the
// spec, applying the desk-scale fraction to both split sizes. Selection,
// partitioning, and the GTSRB class subset are all deterministic in
// spec.seed.
inline Dataset load_dataset(const DatasetSpec& spec, const std::string& root,
                            double desk_scale = 1.0) {
  spec.validate();
  if (spec.name == DatasetName::kSynthetic) return generate_synthetic(spec, desk_scale);

  const std::filesystem::path rootp(root);
  loaders::ingest(rootp, spec.name);
  Dataset ds;
  ds.spec = spec;
  const int train_n = scaled_size(spec.train_size, desk_scale);
  const int test_n = scaled_size(spec.test_size, desk_scale);

  if (spec.name == DatasetName::kSvhn || spec.name == DatasetName::kCifar10) {
    const auto tr = cache::read_index(loaders::split_dir(rootp, spec.name, "train"));
    const auto te = cache::read_index(loaders::split_dir(rootp, spec.name, "test"));
    ds.train = loaders::load_selected(
        tr, loaders::select_indices(tr.entries.size(), train_n, spec.seed, "train"));
    ds.test = loaders::load_selected(
        te, loaders::select_indices(te.entries.size(), test_n, spec.seed, "test"));
    return ds;
  }

  // Pool-based datasets: one cached pool, re-partitioned per spec.
  const auto pool_idx = cache::read_index(loaders::split_dir(rootp, spec.name, "pool"));
  std::vector<std::size_t> keep;
  std::vector<int> relabel;  // parallel to keep
  if (spec.name == DatasetName::kGtsrb) {
    std::map<int, std::size_t> counts;
    for (const auto& e : pool_idx.entries) ++counts[e.label];
    std::vector<int> chosen;
    if (spec.class_filter) {
      chosen = *spec.class_filter;
      for (int c : chosen)
        if (!counts.count(c)) throw ConfigError("class filter names absent class " + std::to_string(c));
    } else {
      std::vector<std::pair<std::size_t, int>> by_count;
      for (const auto& [cls, cnt] : counts) by_count.emplace_back(cnt, cls);
      std::sort(by_count.begin(), by_count.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      if (by_count.size() < 10) throw ConfigError("gtsrb pool has fewer than 10 classes");
      for (int i = 0; i < 10; ++i) chosen.push_back(by_count[static_cast<std::size_t>(i)].second);
    }
    std::sort(chosen.begin(), chosen.end());
    std::map<int, int> to_new;
    for (std::size_t i = 0; i < chosen.size(); ++i) to_new[chosen[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < pool_idx.entries.size(); ++i) {
      const auto it = to_new.find(pool_idx.entries[i].label);
      if (it == to_new.end()) continue;
      keep.push_back(i);
      relabel.push_back(it->second);
    }
  } else {
    for (std::size_t i = 0; i < pool_idx.entries.size(); ++i) {
      keep.push_back(i);
      relabel.push_back(pool_idx.entries[i].label);
    }
  }

  std::vector<LabeledExample> pool = loaders::load_selected(pool_idx, keep);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i].label = relabel[i];
  auto [tr, te] = partition(pool, train_n, test_n, spec.seed);
  ds.train = std::move(tr);
  ds.test = std::move(te);
  return ds;
}

// The 20-class pretraining corpus for the frozen local extractor: CIFAR-100
// coarse labels when its archive/cache is available, otherwise the 20-class
// synthetic variant. Returned spec reflects what was actually loaded.
inline Dataset load_pretrain_dataset(const std::string& root, double desk_scale, std::uint64_t seed) {
  const std::filesystem::path rootp(root);
  const bool cached = std::filesystem::exists(rootp / "cifar100" / "train" / "manifest.tsv");
  const bool raw = std::filesystem::exists(loaders::raw_path(rootp, "cifar-100-binary.tar.gz"));
  if (cached || raw) {
    loaders::ingest_cifar(rootp, /*hundred=*/true);
    Dataset ds;
    ds.spec.name = DatasetName::kCifar10;  // placeholder enum; sizes below describe cifar100
    ds.spec.n_classes = 20;
    ds.spec.train_size = 50000;
    ds.spec.test_size = 10000;
    ds.spec.seed = seed;
    const auto tr = cache::read_index(rootp / "cifar100" / "train");
    const auto te = cache::read_index(rootp / "cifar100" / "test");
    const int train_n = scaled_size(ds.spec.train_size, desk_scale);
    const int test_n = scaled_size(ds.spec.test_size, desk_scale);
    ds.train = loaders::load_selected(
        tr, loaders::select_indices(tr.entries.size(), train_n, seed, "pretrain-train"));
    ds.test = loaders::load_selected(
        te, loaders::select_indices(te.entries.size(), test_n, seed, "pretrain-test"));
    return ds;
  }
  DatasetSpec spec = DatasetSpec::defaults(DatasetName::kSynthetic);
  spec.n_classes = 20;
  spec.seed = derive_seed(seed, "pretrain-synthetic");
  return generate_synthetic(spec, desk_scale);
}

}  // namespace dpsplit
