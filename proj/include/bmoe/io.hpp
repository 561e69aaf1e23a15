#pragma once

// Small I/O utilities: explicit little-endian binary primitives, an RFC-4180
// CSV writer (CRLF line endings, minimal quoting), SHA-1 for config
// fingerprints, wall-clock timing, and a peak-RSS probe.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bmoe/errors.hpp"

namespace bmoe {

// ---- little-endian binary primitives ----

inline void write_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& os, uint64_t v) {
  write_u32le(os, static_cast<uint32_t>(v));
  write_u32le(os, static_cast<uint32_t>(v >> 32));
}

inline void write_f32le(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32le(os, bits);
}

inline void write_f64le(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64le(os, bits);
}

inline uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("truncated stream while reading u32");
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline uint64_t read_u64le(std::istream& is) {
  const uint64_t lo = read_u32le(is);
  const uint64_t hi = read_u32le(is);
  return lo | hi << 32;
}

inline float read_f32le(std::istream& is) {
  const uint32_t bits = read_u32le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline double read_f64le(std::istream& is) {
  const uint64_t bits = read_u64le(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

// ---- CSV (RFC 4180: CRLF rows, quote only when needed) ----

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& os) : os_(os) {}

  void row(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << csv_escape(fields[i]);
    }
    os_ << "\r\n";
  }

 private:
  std::ostream& os_;
};

// Round-trip decimal formatting for report cells.
inline std::string num_cell(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// ---- SHA-1 (config fingerprints only; not a security boundary) ----

inline std::string sha1_hex(const std::string& data) {
  uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                   0xC3D2E1F0u};
  std::vector<unsigned char> msg(data.begin(), data.end());
  const uint64_t bit_len = static_cast<uint64_t>(msg.size()) * 8;
  msg.push_back(0x80);
  while (msg.size() % 64 != 56) msg.push_back(0);
  for (int i = 7; i >= 0; --i)
    msg.push_back(static_cast<unsigned char>(bit_len >> (8 * i)));

  const auto rotl = [](uint32_t x, int n) { return x << n | x >> (32 - n); };
  for (size_t chunk = 0; chunk < msg.size(); chunk += 64) {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = static_cast<uint32_t>(msg[chunk + 4 * i]) << 24 |
             static_cast<uint32_t>(msg[chunk + 4 * i + 1]) << 16 |
             static_cast<uint32_t>(msg[chunk + 4 * i + 2]) << 8 |
             static_cast<uint32_t>(msg[chunk + 4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);

    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const uint32_t tmp = rotl(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rotl(b, 30);
      b = a;
      a = tmp;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }

  static const char* hexd = "0123456789abcdef";
  std::string out;
  out.reserve(40);
  for (uint32_t word : h)
    for (int i = 7; i >= 0; --i) out += hexd[(word >> (4 * i)) & 0xF];
  return out;
}

// ---- process probes ----

inline long peak_rss_kb() {
  std::ifstream status("/proc/self/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream ss(line.substr(6));
      long kb = 0;
      ss >> kb;
      return kb;
    }
  }
  return 0;
}

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}

  double seconds() const {
    const auto now = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(now - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace bmoe
