#include "advtrain/dataset.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "advtrain/errors.hpp"
#include "advtrain/rng.hpp"

namespace advtrain {

std::string DatasetSpec::effective_augmentation() const {
  if (!augmentation.empty()) return augmentation;
  if (name == "cifar10" || name == "cifar100") return "flip_crop";
  if (name == "svhn") return "none";
  return "none";
}

LabeledBatch Dataset::batch(const std::vector<int64_t>& ids) const {
  int64_t row = static_cast<int64_t>(channels) * height * width;
  LabeledBatch b;
  b.inputs = Tensor({static_cast<int64_t>(ids.size()), channels, height, width});
  b.labels.reserve(ids.size());
  b.sample_ids = ids;
  for (size_t i = 0; i < ids.size(); ++i) {
    int64_t id = ids[i];
    if (id < 0 || id >= count) throw InputError("dataset id out of range: " + std::to_string(id));
    const uint8_t* src = pixels.data() + id * row;
    float* dst = b.inputs.ptr() + static_cast<int64_t>(i) * row;
    for (int64_t j = 0; j < row; ++j) dst[j] = static_cast<float>(src[j]) / 255.0f;
    b.labels.push_back(labels[static_cast<size_t>(id)]);
  }
  return b;
}

std::vector<int64_t> Dataset::all_ids() const {
  std::vector<int64_t> ids(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) ids[static_cast<size_t>(i)] = i;
  return ids;
}

// ---------------------------------------------------------------------------
// CIFAR binary archives
// ---------------------------------------------------------------------------

static void read_cifar_file(const std::string& path, int label_bytes, int label_index,
                            Dataset& out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("missing dataset file: " + path);
  const int64_t img = 3 * 32 * 32;
  std::vector<char> rec(static_cast<size_t>(label_bytes) + img);
  while (is.read(rec.data(), static_cast<std::streamsize>(rec.size()))) {
    out.labels.push_back(static_cast<uint8_t>(rec[label_index]));
    size_t base = out.pixels.size();
    out.pixels.resize(base + img);
    std::memcpy(out.pixels.data() + base, rec.data() + label_bytes, img);
    ++out.count;
  }
  if (is.gcount() != 0) throw InputError("corrupt dataset file (short record): " + path);
}

static DatasetPair load_cifar(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  DatasetPair pair;
  bool c100 = spec.name == "cifar100";
  pair.train.channels = pair.test.channels = 3;
  pair.train.height = pair.test.height = 32;
  pair.train.width = pair.test.width = 32;
  pair.train.classes = pair.test.classes = c100 ? 100 : 10;
  if (c100) {
    fs::path root = fs::path(spec.root) / "cifar-100-binary";
    read_cifar_file((root / "train.bin").string(), 2, 1, pair.train);
    read_cifar_file((root / "test.bin").string(), 2, 1, pair.test);
  } else {
    fs::path root = fs::path(spec.root) / "cifar-10-batches-bin";
    for (int i = 1; i <= 5; ++i)
      read_cifar_file((root / ("data_batch_" + std::to_string(i) + ".bin")).string(), 1, 0,
                      pair.train);
    read_cifar_file((root / "test_batch.bin").string(), 1, 0, pair.test);
  }
  return pair;
}

// ---------------------------------------------------------------------------
// SVHN MAT-file (level 5) archives
// ---------------------------------------------------------------------------

namespace {

struct MatArray {
  std::string name;
  std::vector<int32_t> dims;
  int mat_class = 0;
  std::vector<uint8_t> raw;  // element bytes of the real part
  int data_type = 0;         // mi type of the real part
};

struct Cursor {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  void need(size_t k, const char* what) const {
    if (off + k > n) throw InputError(std::string("truncated MAT element: ") + what);
  }
  uint32_t u32() {
    need(4, "u32");
    uint32_t v;
    std::memcpy(&v, p + off, 4);
    off += 4;
    return v;
  }
};

// Reads one data element (tag + payload), honoring the small-element format.
// Returns (type, payload pointer, payload size) and advances past padding.
struct Element {
  uint32_t type;
  const uint8_t* data;
  size_t size;
};

Element next_element(Cursor& c) {
  uint32_t first = c.u32();
  Element e;
  if (first >> 16) {  // small data element: type and length share the tag word
    e.type = first & 0xFFFF;
    e.size = first >> 16;
    c.need(4, "small element");
    e.data = c.p + c.off;
    c.off += 4;
  } else {
    e.type = first;
    e.size = c.u32();
    c.need(e.size, "element payload");
    e.data = c.p + c.off;
    c.off += e.size;
    c.off += (8 - c.off % 8) % 8;  // elements are 8-byte aligned
  }
  return e;
}

std::vector<uint8_t> zlib_inflate(const uint8_t* src, size_t n) {
  std::vector<uint8_t> out;
  out.resize(std::max<size_t>(n * 4, 1 << 16));
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw InputError("zlib init failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(n);
  size_t written = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + written;
    zs.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw InputError("corrupt compressed MAT element");
    }
    written = out.size() - zs.avail_out;
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

MatArray parse_matrix(const uint8_t* data, size_t size) {
  Cursor c{data, size};
  Element flags = next_element(c);
  if (flags.type != 6 && flags.type != 5)  // miUINT32 / miINT32
    throw InputError("unexpected MAT array flags type");
  MatArray arr;
  arr.mat_class = flags.data[0];
  Element dims = next_element(c);
  arr.dims.resize(dims.size / 4);
  std::memcpy(arr.dims.data(), dims.data, dims.size);
  Element name = next_element(c);
  arr.name.assign(reinterpret_cast<const char*>(name.data), name.size);
  Element real = next_element(c);
  arr.data_type = static_cast<int>(real.type);
  arr.raw.assign(real.data, real.data + real.size);
  return arr;
}

void parse_top_level(const uint8_t* data, size_t size, std::vector<MatArray>& out) {
  Cursor c{data, size};
  while (c.off + 8 <= c.n) {
    Element e = next_element(c);
    if (e.type == 15) {  // miCOMPRESSED
      std::vector<uint8_t> raw = zlib_inflate(e.data, e.size);
      Cursor inner{raw.data(), raw.size()};
      Element sub = next_element(inner);
      if (sub.type == 14) out.push_back(parse_matrix(sub.data, sub.size));
    } else if (e.type == 14) {  // miMATRIX
      out.push_back(parse_matrix(e.data, e.size));
    }
  }
}

double numeric_at(const MatArray& a, size_t i) {
  switch (a.data_type) {
    case 1:  // miINT8
      return static_cast<int8_t>(a.raw[i]);
    case 2:  // miUINT8
      return a.raw[i];
    case 3: {  // miINT16
      int16_t v;
      std::memcpy(&v, a.raw.data() + 2 * i, 2);
      return v;
    }
    case 5: {  // miINT32
      int32_t v;
      std::memcpy(&v, a.raw.data() + 4 * i, 4);
      return v;
    }
    case 7: {  // miSINGLE
      float v;
      std::memcpy(&v, a.raw.data() + 4 * i, 4);
      return v;
    }
    case 9: {  // miDOUBLE
      double v;
      std::memcpy(&v, a.raw.data() + 8 * i, 8);
      return v;
    }
    default:
      throw InputError("unsupported MAT numeric type " + std::to_string(a.data_type));
  }
}

}  // namespace

Dataset load_svhn_mat(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("missing dataset file: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 128) throw InputError("corrupt MAT file (no header): " + path);
  if (!(buf[126] == 'I' && buf[127] == 'M'))
    throw InputError("unsupported MAT endianness in " + path);

  std::vector<MatArray> arrays;
  parse_top_level(buf.data() + 128, buf.size() - 128, arrays);

  const MatArray* X = nullptr;
  const MatArray* y = nullptr;
  for (const auto& a : arrays) {
    if (a.name == "X") X = &a;
    if (a.name == "y") y = &a;
  }
  if (!X || !y) throw InputError("MAT file lacks X/y arrays: " + path);
  if (X->dims.size() != 4) throw InputError("SVHN X array must be 4-D: " + path);
  int H = X->dims[0], W = X->dims[1], C = X->dims[2];
  int64_t N = X->dims[3];

  Dataset d;
  d.count = N;
  d.channels = C;
  d.height = H;
  d.width = W;
  d.classes = 10;
  d.pixels.resize(static_cast<size_t>(N) * C * H * W);
  // X is column-major (H, W, C, N); repack as NCHW row-major.
  for (int64_t n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          size_t src = static_cast<size_t>(h) + static_cast<size_t>(H) * (w + static_cast<size_t>(W) * (c + static_cast<size_t>(C) * n));
          size_t dst = ((static_cast<size_t>(n) * C + c) * H + h) * W + w;
          d.pixels[dst] = X->raw[src];
        }
  d.labels.resize(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    int label = static_cast<int>(numeric_at(*y, static_cast<size_t>(n)));
    d.labels[static_cast<size_t>(n)] = label == 10 ? 0 : label;  // SVHN encodes digit 0 as 10
  }
  return d;
}

static DatasetPair load_svhn(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  DatasetPair pair;
  pair.train = load_svhn_mat((fs::path(spec.root) / "train_32x32.mat").string());
  pair.test = load_svhn_mat((fs::path(spec.root) / "test_32x32.mat").string());
  return pair;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian-blob dataset
// ---------------------------------------------------------------------------

static Dataset generate_synthetic(const DatasetSpec& spec, int64_t n, uint64_t seed,
                                  bool with_label_noise) {
  Dataset d;
  d.count = n;
  d.channels = spec.channels;
  d.height = spec.height;
  d.width = spec.width;
  d.classes = spec.classes;
  int64_t row = static_cast<int64_t>(spec.channels) * spec.height * spec.width;

  // Class templates come from the generator seed only, so train and test
  // share them.
  std::mt19937 trng(static_cast<uint32_t>(mix_seed(spec.gen_seed, 0x7E)));
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<float> templates(static_cast<size_t>(spec.classes) * row);
  for (auto& v : templates) v = 0.5f + spec.blob_scale * gauss(trng);

  std::mt19937 rng(static_cast<uint32_t>(seed));
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::uniform_int_distribution<int> cls(0, spec.classes - 1);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  d.pixels.resize(static_cast<size_t>(n) * row);
  d.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int k = static_cast<int>(i % spec.classes);  // balanced classes
    const float* t = templates.data() + static_cast<size_t>(k) * row;
    uint8_t* px = d.pixels.data() + i * row;
    for (int64_t j = 0; j < row; ++j) {
      float v = t[j] + spec.noise_std * noise(rng);
      v = std::min(1.0f, std::max(0.0f, v));
      px[j] = static_cast<uint8_t>(v * 255.0f + 0.5f);
    }
    int label = k;
    if (with_label_noise && spec.label_noise > 0.0f && unit(rng) < spec.label_noise)
      label = cls(rng);
    d.labels[static_cast<size_t>(i)] = label;
  }
  return d;
}

DatasetPair load_dataset(const DatasetSpec& spec) {
  if (spec.name == "cifar10" || spec.name == "cifar100") return load_cifar(spec);
  if (spec.name == "svhn") return load_svhn(spec);
  if (spec.name == "synthetic") {
    DatasetPair pair;
    pair.train = generate_synthetic(spec, spec.n_train, mix_seed(spec.gen_seed, 1), true);
    pair.test = generate_synthetic(spec, spec.n_test, mix_seed(spec.gen_seed, 2), false);
    return pair;
  }
  throw ConfigError("unknown dataset: " + spec.name);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

LabeledBatch augment(const LabeledBatch& batch, const std::string& policy, uint64_t seed) {
  if (policy == "none") return batch;
  if (policy != "flip_crop") throw ConfigError("unknown augmentation policy: " + policy);
  const int pad = 4;
  int64_t B = batch.inputs.dim(0), C = batch.inputs.dim(1);
  int64_t H = batch.inputs.dim(2), W = batch.inputs.dim(3);
  LabeledBatch out;
  out.labels = batch.labels;
  out.sample_ids = batch.sample_ids;
  out.inputs = Tensor(batch.inputs.shape);
  std::mt19937 rng(static_cast<uint32_t>(seed));
  std::uniform_int_distribution<int> off(0, 2 * pad);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int64_t b = 0; b < B; ++b) {
    bool flip = coin(rng) == 1;
    int dy = off(rng), dx = off(rng);
    for (int64_t c = 0; c < C; ++c) {
      const float* src = batch.inputs.ptr() + (b * C + c) * H * W;
      float* dst = out.inputs.ptr() + (b * C + c) * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          // position in the padded image, then back into source coordinates
          int64_t sh = h + dy - pad;
          int64_t sw = w + dx - pad;
          float v = 0.0f;
          if (sh >= 0 && sh < H && sw >= 0 && sw < W) {
            int64_t src_w = flip ? (W - 1 - sw) : sw;
            v = src[sh * W + src_w];
          }
          dst[h * W + w] = v;
        }
    }
  }
  return out;
}

}  // namespace advtrain
