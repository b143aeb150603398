#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "civiclens/error.hpp"
#include "civiclens/model.hpp"

namespace civiclens::model {

namespace {

constexpr std::uint8_t kMagic[4] = {'C', 'L', 'C', 'K'};

enum class Tag : std::uint8_t { Conv = 1, MaxPool = 2, Flatten = 3, Dense = 4, Softmax = 5 };

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void floats(const std::vector<float>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  std::vector<std::uint8_t> finish() {
    u32(static_cast<std::uint32_t>(::crc32(0L, bytes_.data(), static_cast<uInt>(bytes_.size()))));
    return std::move(bytes_);
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  int i32() { return static_cast<int>(u32()); }
  std::vector<float> floats() {
    const std::uint32_t n = u32();
    need(static_cast<std::size_t>(n) * 4);
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32());
    return v;
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw Error(ErrorCode::CheckpointTruncated, "checkpoint ends early at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NetworkSpec& spec, const Parameters<float>& params) {
  check_parameters(spec, params);
  Writer w;
  for (auto m : kMagic) w.u8(m);
  w.u8(kCheckpointVersion);
  w.i32(spec.input_height);
  w.i32(spec.input_width);
  w.i32(spec.input_channels);
  w.u32(static_cast<std::uint32_t>(spec.layers.size()));
  for (const auto& layer : spec.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      w.u8(static_cast<std::uint8_t>(Tag::Conv));
      w.i32(c->out_channels);
      w.i32(c->kernel);
      w.i32(c->stride);
      w.i32(c->padding);
      w.u8(c->relu ? 1 : 0);
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
      w.u8(static_cast<std::uint8_t>(Tag::MaxPool));
      w.i32(m->window);
      w.i32(m->stride);
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      w.u8(static_cast<std::uint8_t>(Tag::Flatten));
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      w.u8(static_cast<std::uint8_t>(Tag::Dense));
      w.i32(d->units);
      w.u8(d->relu ? 1 : 0);
    } else {
      w.u8(static_cast<std::uint8_t>(Tag::Softmax));
    }
  }
  for (const auto& l : params.layers) {
    w.floats(l.weights);
    w.floats(l.bias);
  }
  return w.finish();
}

std::pair<NetworkSpec, Parameters<float>> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5) throw Error(ErrorCode::CheckpointTruncated, "checkpoint shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::CheckpointVersion, "not a checkpoint (bad magic bytes)");
  }
  if (bytes[4] != kCheckpointVersion) {
    throw Error(ErrorCode::CheckpointVersion, "checkpoint version " + std::to_string(bytes[4]) + " unsupported (expected " +
                                                  std::to_string(kCheckpointVersion) + ")");
  }
  Reader r(bytes);
  for (int i = 0; i < 5; ++i) r.u8();
  NetworkSpec spec;
  spec.input_height = r.i32();
  spec.input_width = r.i32();
  spec.input_channels = r.i32();
  const std::uint32_t n = r.u32();
  if (n > 4096) throw Error(ErrorCode::CheckpointChecksum, "implausible layer count " + std::to_string(n));
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto tag = static_cast<Tag>(r.u8());
    switch (tag) {
      case Tag::Conv: {
        ConvLayer c;
        c.out_channels = r.i32();
        c.kernel = r.i32();
        c.stride = r.i32();
        c.padding = r.i32();
        c.relu = r.u8() != 0;
        spec.layers.emplace_back(c);
        break;
      }
      case Tag::MaxPool: {
        MaxPoolLayer m;
        m.window = r.i32();
        m.stride = r.i32();
        spec.layers.emplace_back(m);
        break;
      }
      case Tag::Flatten:
        spec.layers.emplace_back(FlattenLayer{});
        break;
      case Tag::Dense: {
        DenseLayer d;
        d.units = r.i32();
        d.relu = r.u8() != 0;
        spec.layers.emplace_back(d);
        break;
      }
      case Tag::Softmax:
        spec.layers.emplace_back(SoftmaxOutput{});
        break;
      default:
        throw Error(ErrorCode::CheckpointChecksum, "unknown layer tag " + std::to_string(static_cast<int>(tag)));
    }
  }
  Parameters<float> params;
  params.layers.resize(n);
  for (auto& l : params.layers) {
    l.weights = r.floats();
    l.bias = r.floats();
  }
  const std::size_t body = r.pos();
  const std::uint32_t stored = r.u32();
  if (r.remaining() != 0) throw Error(ErrorCode::CheckpointChecksum, "trailing bytes after checkpoint checksum");
  const auto actual = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (stored != actual) throw Error(ErrorCode::CheckpointChecksum, "checkpoint checksum mismatch");
  check_parameters(spec, params);
  return {std::move(spec), std::move(params)};
}

void checkpoint_save(const NetworkSpec& spec, const Parameters<float>& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(spec, params);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::pair<NetworkSpec, Parameters<float>> checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace civiclens::model
