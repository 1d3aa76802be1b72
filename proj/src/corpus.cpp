#include "calliope/corpus.hpp"

#include <cstdint>
#include <fstream>

#include "calliope/error.hpp"

namespace calliope {

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff),
                     static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 24) & 0xff)};
  f.write(b, 4);
}

bool get_u32(std::ifstream& f, std::uint32_t& v) {
  std::uint8_t b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
      std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  return true;
}

}  // namespace

void write_corpus(const std::string& path,
                  const std::vector<SongTokens>& songs) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : songs) {
    if (static_cast<int>(s.seqs.size()) != s.n_measures * kNumTracks) {
      throw ShapeMismatch("song record: sequence count mismatch");
    }
    put_u32(f, static_cast<std::uint32_t>(s.n_measures));
    put_u32(f, kNumTracks);
    put_u32(f, static_cast<std::uint32_t>(s.seq_len));
    for (const TokenSeq& seq : s.seqs) {
      if (static_cast<int>(seq.size()) != s.seq_len) {
        throw ShapeMismatch("song record: sequence length mismatch");
      }
      for (std::uint16_t id : seq) {
        const char b[2] = {static_cast<char>(id & 0xff),
                           static_cast<char>(id >> 8)};
        f.write(b, 2);
      }
    }
  }
  if (!f) throw IoError("short write to " + path);
}

std::vector<SongTokens> read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<SongTokens> songs;
  std::uint32_t n_measures;
  while (get_u32(f, n_measures)) {
    std::uint32_t n_tracks, seq_len;
    if (!get_u32(f, n_tracks) || !get_u32(f, seq_len)) {
      throw TruncatedChunk("record header cut short");
    }
    if (n_tracks != kNumTracks) {
      throw MalformedHeader("record has " + std::to_string(n_tracks) +
                            " tracks, expected 4");
    }
    if (n_measures == 0 || seq_len < 2 || n_measures > 1 << 20 ||
        seq_len > 1 << 20) {
      throw MalformedHeader("implausible record header");
    }
    SongTokens s;
    s.n_measures = static_cast<int>(n_measures);
    s.seq_len = static_cast<int>(seq_len);
    const std::size_t count = static_cast<std::size_t>(n_measures) * kNumTracks;
    s.seqs.reserve(count);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(seq_len) * 2);
    for (std::size_t i = 0; i < count; ++i) {
      if (!f.read(reinterpret_cast<char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()))) {
        throw TruncatedChunk("record payload cut short");
      }
      TokenSeq seq(seq_len);
      for (std::uint32_t j = 0; j < seq_len; ++j) {
        seq[j] = static_cast<std::uint16_t>(buf[j * 2] | buf[j * 2 + 1] << 8);
        if (seq[j] >= kVocab) {
          throw MalformedHeader("token id out of range");
        }
      }
      s.seqs.push_back(std::move(seq));
    }
    songs.push_back(std::move(s));
  }
  return songs;
}

}  // namespace calliope
