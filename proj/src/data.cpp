#include "comvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "bytes.hpp"
#include "comvit/errors.hpp"

namespace comvit {

namespace {

constexpr std::string_view kDatasetMagic{"CMVD1\0\0\0", 8};
constexpr std::string_view kCheckpointMagic{"CMVW1\0\0\0", 8};

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const char* what) {
  std::uint64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw SizeError(std::string(what) + ": header sizes overflow");
  return r;
}

void expect_magic(detail::ByteReader& in, std::string_view magic, const char* what) {
  if (in.remaining() < magic.size()) throw FormatError(std::string(what) + ": too short for magic");
  auto got = in.raw(magic.size());
  if (!std::equal(got.begin(), got.end(), magic.begin(), [](std::uint8_t b, char c) {
        return b == static_cast<std::uint8_t>(c);
      })) {
    throw FormatError(std::string(what) + ": bad magic");
  }
}

}  // namespace

void Dataset::validate() const {
  if (channels != 1 && channels != 3) throw ContentError("dataset channels must be 1 or 3, got " + std::to_string(channels));
  if (num_classes == 0 || num_classes > 65535) throw ContentError("dataset num_classes must be in [1, 65535]");
  if (height == 0 || width == 0) throw ContentError("dataset images must be at least 1x1");
  const std::uint64_t pix = checked_mul(checked_mul(checked_mul(count, height, "dataset"), width, "dataset"), channels, "dataset");
  if (pixels.size() != pix) {
    throw SizeError("dataset pixel buffer holds " + std::to_string(pixels.size()) + " bytes, header implies " +
                    std::to_string(pix));
  }
  if (labels.size() != count) throw SizeError("dataset label count differs from header count");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw ContentError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                         " is not below num_classes " + std::to_string(num_classes));
    }
  }
}

std::vector<std::uint8_t> write_dataset(const Dataset& ds) {
  ds.validate();
  detail::ByteWriter out;
  out.text(kDatasetMagic);
  out.u32(ds.count);
  out.u32(ds.height);
  out.u32(ds.width);
  out.u32(ds.channels);
  out.u32(ds.num_classes);
  out.raw(ds.pixels);
  for (std::uint16_t label : ds.labels) out.u16(label);
  return out.take();
}

Dataset read_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes, "CMVD1");
  expect_magic(in, kDatasetMagic, "CMVD1");
  Dataset ds;
  ds.count = in.u32();
  ds.height = in.u32();
  ds.width = in.u32();
  ds.channels = in.u32();
  ds.num_classes = in.u32();
  if (ds.channels != 1 && ds.channels != 3) throw ContentError("CMVD1: channels must be 1 or 3");
  const std::uint64_t pix =
      checked_mul(checked_mul(checked_mul(ds.count, ds.height, "CMVD1"), ds.width, "CMVD1"), ds.channels, "CMVD1");
  const std::uint64_t label_bytes = 2ULL * ds.count;
  if (pix > in.remaining() || label_bytes > in.remaining() - pix) {
    throw SizeError("CMVD1: header implies " + std::to_string(pix + label_bytes) + " payload bytes, file has " +
                    std::to_string(in.remaining()));
  }
  if (pix + label_bytes != in.remaining()) {
    throw SizeError("CMVD1: " + std::to_string(in.remaining() - pix - label_bytes) + " trailing bytes after payload");
  }
  auto px = in.raw(pix);
  ds.pixels.assign(px.begin(), px.end());
  ds.labels.resize(ds.count);
  for (auto& label : ds.labels) label = in.u16();
  ds.validate();
  return ds;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file(path, write_dataset(ds)); }

Dataset load_dataset(const std::filesystem::path& path) { return read_dataset(read_file(path)); }

void normalize_image(std::span<const std::uint8_t> hwc, std::size_t height, std::size_t width, std::size_t channels,
                     std::span<float> chw) {
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const float v = static_cast<float>(hwc[(y * width + x) * channels + c]) / 255.0f;
        chw[(c * height + y) * width + x] = (v - 0.5f) / 0.5f;
      }
    }
  }
}

Tensor<float> image_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Tensor<float> out(Shape{indices.size(), ds.channels, ds.height, ds.width});
  const std::size_t plane = ds.image_bytes();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.count) throw IndexError("sample index " + std::to_string(indices[i]) + " out of range");
    normalize_image(ds.image(indices[i]), ds.height, ds.width, ds.channels, dst.subspan(i * plane, plane));
  }
  return out;
}

SynthShapes synth_shapes(std::size_t count, std::size_t image_size, std::uint64_t seed) {
  if (image_size < 16) throw ConfigError("synth_shapes: image_size must be >= 16");
  SynthShapes result;
  if (count % 2 != 0) {
    result.warning = "synth_shapes: odd count " + std::to_string(count) + " adjusted to " + std::to_string(count - 1);
    --count;
  }
  Rng rng(seed);
  Dataset& ds = result.dataset;
  ds.count = static_cast<std::uint32_t>(count);
  ds.height = ds.width = static_cast<std::uint32_t>(image_size);
  ds.channels = 1;
  ds.num_classes = 2;
  ds.pixels.resize(count * image_size * image_size);
  ds.labels.resize(count);
  result.boxes.resize(count);

  const double side = static_cast<double>(image_size);
  for (std::size_t i = 0; i < count; ++i) {
    const bool square = (i % 2) == 1;
    ds.labels[i] = square ? 1 : 0;
    // half-extent: circle radius or half the square side
    const double half = rng.uniform(0.10, 0.22) * side;
    const double cx = rng.uniform(half + 1.0, side - half - 1.0);
    const double cy = rng.uniform(half + 1.0, side - half - 1.0);
    const double background = rng.uniform(20.0, 70.0);
    const double foreground = rng.uniform(150.0, 240.0);
    std::uint8_t* img = ds.pixels.data() + i * image_size * image_size;
    for (std::size_t y = 0; y < image_size; ++y) {
      for (std::size_t x = 0; x < image_size; ++x) {
        const double px = static_cast<double>(x) + 0.5 - cx;
        const double py = static_cast<double>(y) + 0.5 - cy;
        const bool inside = square ? (std::abs(px) <= half && std::abs(py) <= half) : (px * px + py * py <= half * half);
        const double noise = rng.uniform(-15.0, 15.0);
        const double v = (inside ? foreground : background) + noise;
        img[y * image_size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
    auto lo = [&](double c) { return static_cast<std::uint32_t>(std::max(0.0, std::floor(c - half))); };
    auto hi = [&](double c) { return static_cast<std::uint32_t>(std::min(side, std::ceil(c + half))); };
    result.boxes[i] = {lo(cx), lo(cy), hi(cx), hi(cy)};
  }
  return result;
}

std::string boxes_csv(std::span<const BoundingBox> boxes) {
  std::ostringstream out;
  out << "index,x0,y0,x1,y1\n";
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out << i << ',' << boxes[i].x0 << ',' << boxes[i].y0 << ',' << boxes[i].x1 << ',' << boxes[i].y1 << '\n';
  }
  return out.str();
}

std::vector<BoundingBox> parse_boxes_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "index,x0,y0,x1,y1") throw FormatError("bbox sidecar: bad header");
  std::vector<BoundingBox> boxes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    unsigned long long idx = 0;
    BoundingBox b;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(row >> idx >> c1 >> b.x0 >> c2 >> b.y0 >> c3 >> b.x1 >> c4 >> b.y1) || c1 != ',' || c2 != ',' ||
        c3 != ',' || c4 != ',' || idx != boxes.size()) {
      throw FormatError("bbox sidecar: malformed row '" + line + "'");
    }
    boxes.push_back(b);
  }
  return boxes;
}

bool Checkpoint::has_optimizer() const {
  return !tensors.empty() && tensors.back().name.starts_with("adamw.");
}

std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig& c = ckpt.config;
  detail::ByteWriter out;
  out.text(kCheckpointMagic);
  for (std::size_t v : {c.image_size, c.in_channels, c.layers, c.hidden, c.heads, c.mlp_size, c.num_classes,
                        c.stem_channels, c.conv_kernel, c.conv_stride, c.conv_padding, c.pool_kernel, c.pool_stride,
                        c.pool_padding}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.f64(c.drop_path_rate);
  out.f64(c.temperature_init);
  out.u8(c.diagonal_mask ? 1 : 0);
  out.u8(c.pre_norm ? 1 : 0);
  out.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("tensor name too long");
    if (tensor.rank() > std::numeric_limits<std::uint8_t>::max()) throw ConfigError("tensor rank too large");
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.text(name);
    out.u8(static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t e : tensor.shape()) out.u32(static_cast<std::uint32_t>(e));
    for (float v : tensor.data()) out.f32(v);
  }
  out.u32(ckpt.epoch);
  out.u64(ckpt.rng.seed);
  out.u64(ckpt.rng.counter);
  out.u64(ckpt.optimizer_step);
  return out.take();
}

namespace {

void verify_tensors(const std::vector<NamedTensor<float>>& tensors, const ModelConfig& config) {
  const std::size_t count = tensors.size();
  if (config.layers > count) {
    // each layer owns 17 tensors; also bounds param_shapes() by the file size
    throw IncompatibleError("checkpoint holds " + std::to_string(count) + " tensors, too few for " +
                            std::to_string(config.layers) + " layers");
  }
  const auto shapes = param_shapes(config);
  if (count != shapes.size() && count != 3 * shapes.size()) {
    // name the first tensor that breaks the expected sequence, if any
    for (std::size_t i = 0; i < std::min(count, shapes.size()); ++i) {
      if (tensors[i].name != shapes[i].first || tensors[i].tensor.shape() != shapes[i].second) {
        throw IncompatibleError("checkpoint tensor '" + tensors[i].name + "' " + shape_str(tensors[i].tensor.shape()) +
                                " does not match expected '" + shapes[i].first + "' " + shape_str(shapes[i].second));
      }
    }
    throw IncompatibleError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                            std::to_string(shapes.size()) + " (or " + std::to_string(3 * shapes.size()) +
                            " with optimizer state)");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto& [want_name, want_shape] = shapes[i % shapes.size()];
    const std::size_t block = i / shapes.size();
    const std::string expect = block == 0 ? want_name : (block == 1 ? "adamw.m." : "adamw.v.") + want_name;
    if (tensors[i].name != expect || tensors[i].tensor.shape() != want_shape) {
      throw IncompatibleError("checkpoint tensor '" + tensors[i].name + "' " + shape_str(tensors[i].tensor.shape()) +
                              " does not match expected '" + expect + "' " + shape_str(want_shape));
    }
  }
}

}  // namespace

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes, "CMVW1");
  expect_magic(in, kCheckpointMagic, "CMVW1");
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  for (std::size_t* field : {&c.image_size, &c.in_channels, &c.layers, &c.hidden, &c.heads, &c.mlp_size,
                             &c.num_classes, &c.stem_channels, &c.conv_kernel, &c.conv_stride, &c.conv_padding,
                             &c.pool_kernel, &c.pool_stride, &c.pool_padding}) {
    *field = in.u32();
  }
  c.drop_path_rate = in.f64();
  c.temperature_init = in.f64();
  const std::uint8_t mask = in.u8();
  const std::uint8_t pre_norm = in.u8();
  if (mask > 1 || pre_norm > 1) throw ContentError("CMVW1: boolean config field is not 0/1");
  c.diagonal_mask = mask == 1;
  c.pre_norm = pre_norm == 1;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ContentError(std::string("CMVW1: embedded config invalid: ") + e.what());
  }

  const std::uint32_t count = in.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = in.u16();
    std::string name = in.text(name_len);
    const std::uint8_t ndim = in.u8();
    if (ndim == 0) throw ContentError("CMVW1: tensor '" + name + "' has rank 0");
    Shape shape(ndim);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      e = in.u32();
      if (e == 0) throw ContentError("CMVW1: tensor '" + name + "' has a zero extent");
      numel = checked_mul(numel, e, "CMVW1");
    }
    if (numel > in.remaining() / 4) throw SizeError("CMVW1: tensor '" + name + "' data truncated");
    std::vector<float> values(numel);
    for (float& v : values) v = in.f32();
    ckpt.tensors.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(values))});
  }
  ckpt.epoch = in.u32();
  ckpt.rng.seed = in.u64();
  ckpt.rng.counter = in.u64();
  ckpt.optimizer_step = in.u64();
  if (in.remaining() != 0) throw SizeError("CMVW1: " + std::to_string(in.remaining()) + " trailing bytes");
  verify_tensors(ckpt.tensors, c);
  return ckpt;
}

void check_compatible(const Checkpoint& ckpt, const ModelConfig& expected) {
  verify_tensors(ckpt.tensors, expected);
}

}  // namespace comvit
