#pragma once

#include <string>
#include <vector>

#include "calliope/token.hpp"

namespace calliope {

/// Tokenized-corpus file: one record per song. Record layout is a u32
/// header triple (n_measures, n_tracks, seq_len) followed by the token ids
/// as little-endian u16, measure-major then track-major. No file header.
void write_corpus(const std::string& path,
                  const std::vector<SongTokens>& songs);
std::vector<SongTokens> read_corpus(const std::string& path);

}  // namespace calliope
