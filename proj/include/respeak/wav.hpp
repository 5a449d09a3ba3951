#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace respeak {

// Mono audio in float samples, nominal range [-1, 1].
struct Waveform {
    std::vector<float> samples;
    int sample_rate = 16000;

    int64_t size() const { return static_cast<int64_t>(samples.size()); }
    double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {
template <typename T>
void read_pod(std::istream& in, T& out) {
    in.read(reinterpret_cast<char*>(&out), sizeof(T));
    if (!in) throw std::runtime_error("wav: unexpected end of file");
}
template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
} // namespace detail

// Reads a 16-bit PCM mono WAV file. Anything else is rejected.
inline Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("wav: cannot open " + path);
    char tag[4];
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw std::runtime_error("wav: not a RIFF file: " + path);
    uint32_t riff_size = 0;
    detail::read_pod(in, riff_size);
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw std::runtime_error("wav: not a WAVE file: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    bool have_fmt = false;
    Waveform w;
    while (in.read(tag, 4)) {
        uint32_t chunk_size = 0;
        detail::read_pod(in, chunk_size);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            uint32_t byte_rate;
            uint16_t block_align;
            detail::read_pod(in, format);
            detail::read_pod(in, channels);
            detail::read_pod(in, rate);
            detail::read_pod(in, byte_rate);
            detail::read_pod(in, block_align);
            detail::read_pod(in, bits);
            if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) throw std::runtime_error("wav: data chunk before fmt chunk: " + path);
            if (format != 1) throw std::runtime_error("wav: unsupported format (only 16-bit PCM): " + path);
            if (channels != 1) throw std::runtime_error("wav: unsupported channel count " + std::to_string(channels) + " (mono only): " + path);
            if (bits != 16) throw std::runtime_error("wav: unsupported bit depth " + std::to_string(bits) + " (16-bit only): " + path);
            const size_t n = chunk_size / 2;
            std::vector<int16_t> raw(n);
            in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(chunk_size));
            if (!in) throw std::runtime_error("wav: truncated data chunk: " + path);
            w.samples.resize(n);
            for (size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(raw[i]) / 32768.0f;
            w.sample_rate = static_cast<int>(rate);
            return w;
        } else {
            in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
        }
    }
    throw std::runtime_error("wav: no data chunk found: " + path);
}

inline void write_wav(const std::string& path, const Waveform& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("wav: cannot write " + path);
    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    const uint32_t data_size = n * 2;
    out.write("RIFF", 4);
    detail::write_pod(out, static_cast<uint32_t>(36 + data_size));
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    detail::write_pod(out, static_cast<uint32_t>(16));
    detail::write_pod(out, static_cast<uint16_t>(1)); // PCM
    detail::write_pod(out, static_cast<uint16_t>(1)); // mono
    detail::write_pod(out, static_cast<uint32_t>(w.sample_rate));
    detail::write_pod(out, static_cast<uint32_t>(w.sample_rate * 2));
    detail::write_pod(out, static_cast<uint16_t>(2));
    detail::write_pod(out, static_cast<uint16_t>(16));
    out.write("data", 4);
    detail::write_pod(out, data_size);
    for (float s : w.samples) {
        const int32_t q = std::max(-32768, std::min(32767, static_cast<int32_t>(std::lrintf(s * 32768.0f))));
        detail::write_pod(out, static_cast<int16_t>(q));
    }
    if (!out) throw std::runtime_error("wav: write failed: " + path);
}

} // namespace respeak
