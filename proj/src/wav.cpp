#include "metaseld/wav.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "metaseld/common.hpp"

namespace metaseld::dsp {

namespace {
struct FmtChunk {
  uint16_t format = 0;
  uint16_t channels = 0;
  uint32_t sample_rate = 0;
  uint16_t bits = 0;
};

uint32_t read_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t read_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
}  // namespace

FoaClip read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open WAV file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail_data("corrupt WAV file (bad RIFF header): " + path);

  FmtChunk fmt;
  const unsigned char* data = nullptr;
  size_t data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    uint32_t chunk_len = read_u32(hdr + 4);
    const unsigned char* body = hdr + 8;
    if (pos + 8 + chunk_len > bytes.size()) fail_data("corrupt WAV file (truncated chunk): " + path);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) fail_data("corrupt WAV file (short fmt chunk): " + path);
      fmt.format = read_u16(body);
      fmt.channels = read_u16(body + 2);
      fmt.sample_rate = read_u32(body + 4);
      fmt.bits = read_u16(body + 14);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (fmt.channels == 0 || data == nullptr) fail_data("corrupt WAV file (missing chunks): " + path);
  if (fmt.channels != 4) fail_data("WAV file is not 4-channel FOA: " + path);
  if (fmt.format != 1 && fmt.format != 3)
    fail_data("unsupported WAV format (need PCM16 or float32): " + path);
  if ((fmt.format == 1 && fmt.bits != 16) || (fmt.format == 3 && fmt.bits != 32))
    fail_data("unsupported WAV bit depth: " + path);

  const size_t bytes_per_sample = fmt.bits / 8;
  const size_t frame_bytes = bytes_per_sample * fmt.channels;
  const size_t frames = data_len / frame_bytes;
  FoaClip clip;
  clip.sample_rate = static_cast<int>(fmt.sample_rate);
  clip.channels.assign(4, std::vector<float>(frames));
  for (size_t i = 0; i < frames; ++i)
    for (int c = 0; c < 4; ++c) {
      const unsigned char* p = data + i * frame_bytes + static_cast<size_t>(c) * bytes_per_sample;
      if (fmt.format == 1) {
        int16_t v = static_cast<int16_t>(read_u16(p));
        clip.channels[static_cast<size_t>(c)][i] = static_cast<float>(v) / 32768.0f;
      } else {
        float v;
        std::memcpy(&v, p, 4);
        clip.channels[static_cast<size_t>(c)][i] = v;
      }
    }
  return clip;
}

void write_wav(const FoaClip& clip, const std::string& path) {
  if (clip.channels.size() != 4) fail_config("write_wav: expected 4 channels");
  const uint32_t frames = static_cast<uint32_t>(clip.n_samples());
  const uint32_t data_len = frames * 4 * 4;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail_data("cannot open WAV for writing: " + path);

  auto w_u32 = [&os](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  auto w_u16 = [&os](uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); };

  os.write("RIFF", 4);
  w_u32(36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  w_u32(16);
  w_u16(3);  // IEEE float
  w_u16(4);
  w_u32(static_cast<uint32_t>(clip.sample_rate));
  w_u32(static_cast<uint32_t>(clip.sample_rate) * 4 * 4);
  w_u16(16);
  w_u16(32);
  os.write("data", 4);
  w_u32(data_len);
  for (uint32_t i = 0; i < frames; ++i)
    for (int c = 0; c < 4; ++c)
      os.write(reinterpret_cast<const char*>(&clip.channels[static_cast<size_t>(c)][i]), 4);
  if (!os) fail_data("write failed for WAV: " + path);
}

}  // namespace metaseld::dsp
