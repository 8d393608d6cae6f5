#pragma once

#include <string>

#include "metaseld/dsp.hpp"

namespace metaseld::dsp {

/// Reads a 4-channel RIFF/WAVE file (PCM 16-bit or IEEE float32,
/// little-endian). room_id/clip_id are left empty for the caller to fill.
FoaClip read_wav(const std::string& path);

/// Writes the clip as float32 WAVE (format 3), interleaved.
void write_wav(const FoaClip& clip, const std::string& path);

}  // namespace metaseld::dsp
