#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calliope/corpus.hpp"
#include "calliope/error.hpp"
#include "calliope/eval.hpp"
#include "calliope/midi.hpp"
#include "calliope/token.hpp"
#include "calliope/train.hpp"
#include "json.hpp"

namespace {

constexpr const char* kToolVersion = "calliope 0.1.0";

namespace fs = std::filesystem;
using namespace calliope;

bool has_midi_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(c));
  return ext == ".mid" || ext == ".midi";
}

int cmd_tokenize(const std::string& in_dir, const std::string& out_path,
                 int bars, int stride) {
  if (stride <= 0) stride = bars;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(in_dir)) {
    if (entry.is_regular_file() && has_midi_extension(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  std::vector<SongTokens> records;
  int kept_files = 0, skipped_meter = 0, skipped_bad = 0, skipped_empty = 0;
  int dropped_notes = 0;
  for (const fs::path& file : files) {
    MidiSongRaw raw;
    GridSong song;
    try {
      raw = parse_smf_file(file.string());
      if (!is_four_four(raw)) {
        ++skipped_meter;
        continue;
      }
      song = quantize(raw);
    } catch (const EmptyAfterQuantize&) {
      ++skipped_empty;
      continue;
    } catch (const Error& e) {
      std::cerr << file.string() << ": " << e.what() << "\n";
      ++skipped_bad;
      continue;
    }
    bool any = false;
    for (int start = 0; start + bars <= song.n_measures(); start += stride) {
      int dropped = 0;
      records.push_back(tokenize_song(song.window(start, bars),
                                      kDefaultMaxNotes, &dropped));
      dropped_notes += dropped;
      any = true;
    }
    kept_files += any ? 1 : 0;
  }

  std::printf("files: %d kept, %d skipped (meter), %d skipped (empty), "
              "%d skipped (unreadable)\n",
              kept_files, skipped_meter, skipped_empty, skipped_bad);
  std::printf("records: %zu (%d-bar windows), notes dropped by the "
              "per-measure cap: %d\n",
              records.size(), bars, dropped_notes);
  if (records.empty()) {
    std::cerr << "no records produced\n";
    return 1;
  }
  write_corpus(out_path, records);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& run_dir) {
  const TrainConfig cfg = TrainConfig::parse_file(config_path);
  cfg.validate();
  const std::vector<SongTokens> corpus = read_corpus(corpus_path);

  fs::create_directories(run_dir);
  nlohmann::json manifest;
  nlohmann::json config_obj;
  {
    std::istringstream kv(cfg.to_key_values());
    std::string line;
    while (std::getline(kv, line)) {
      const std::size_t eq = line.find('=');
      if (eq != std::string::npos) {
        config_obj[line.substr(0, eq)] = line.substr(eq + 1);
      }
    }
  }
  manifest["config"] = config_obj;
  manifest["seed"] = cfg.seed;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a_file(corpus_path)));
  manifest["corpus_fnv1a"] = hash;
  manifest["checkpoint"] = run_dir + "/ckpt_final.cllp";
  manifest["tool_version"] = kToolVersion;
  {
    std::ofstream mf(run_dir + "/manifest.json");
    if (!mf) throw IoError("cannot write manifest");
    mf << manifest.dump(2) << "\n";
  }

  const TrainResult result = train_loop(cfg, corpus, run_dir);
  std::printf("trained %lld steps; final checkpoint: %s\n", result.steps_run,
              result.final_checkpoint.c_str());
  return 0;
}

int cmd_generate(const std::string& ckpt_path, int count, std::uint64_t seed,
                 const std::string& out_dir) {
  Calliope model = load_model_checkpoint(ckpt_path);
  fs::create_directories(out_dir);
  const std::vector<GeneratedSong> songs = generate(model, count, seed);
  std::vector<GridSong> grids;
  for (int i = 0; i < static_cast<int>(songs.size()); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "gen_%06d.mid", i);
    write_smf_file(out_dir + "/" + name, songs[i].song, 20);
    grids.push_back(songs[i].song);
  }
  const GenMetrics gm = gen_metrics(grids);
  {
    std::ofstream rf(out_dir + "/report.json");
    if (!rf) throw IoError("cannot write report");
    rf << metrics_report_json(gm, nullptr, count);
  }
  std::printf("wrote %d songs and report.json to %s\n", count,
              out_dir.c_str());
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& corpus_path,
                 const std::string& out_path) {
  ModelConfig mc;
  Calliope model = load_model_checkpoint(ckpt_path, &mc);
  const std::vector<SongTokens> corpus = read_corpus(corpus_path);
  for (const SongTokens& song : corpus) {
    if (song.n_measures != mc.n_measures) {
      throw BarsMismatch("corpus has " + std::to_string(song.n_measures) +
                         "-bar songs, checkpoint expects " +
                         std::to_string(mc.n_measures));
    }
    if (song.seq_len != mc.seq_len()) {
      throw BarsMismatch("corpus sequence length " +
                         std::to_string(song.seq_len) +
                         " does not match the checkpoint's " +
                         std::to_string(mc.seq_len()));
    }
  }
  const AccuracyReport acc = accuracy_report(model, corpus);
  std::vector<GridSong> recons;
  for (const SongTokens& song : corpus) {
    Graph g;
    g.set_grad_enabled(false);
    Calliope::Bound b = model.bind(g);
    Var z = model.encode_song(b, to_int_seqs(song));
    const std::vector<std::vector<int>> emitted = model.decode_song_greedy(b, z);
    SongTokens out;
    out.n_measures = song.n_measures;
    out.seq_len = song.seq_len;
    for (const auto& seq : emitted) out.seqs.emplace_back(seq.begin(), seq.end());
    recons.push_back(detokenize_song(out).song);
  }
  const GenMetrics gm = gen_metrics(recons);
  {
    std::ofstream rf(out_path);
    if (!rf) throw IoError("cannot write report");
    rf << metrics_report_json(gm, &acc, static_cast<int>(corpus.size()));
  }
  std::printf("evaluated %zu songs; report: %s\n", corpus.size(),
              out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-track music adversarial autoencoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string in_dir, out_path, config_path, corpus_path, ckpt_path;
  int bars = 1;
  int stride = 0;
  int count = 1;
  std::uint64_t seed = 1;

  CLI::App* tok = app.add_subcommand(
      "tokenize", "Quantize a directory of MIDI files into a token corpus");
  tok->add_option("--in", in_dir, "Directory of .mid files")
      ->required()
      ->check(CLI::ExistingDirectory);
  tok->add_option("--out", out_path, "Output corpus path")->required();
  tok->add_option("--bars", bars, "Measures per training window")
      ->required()
      ->check(CLI::IsMember({1, 2, 16}));
  tok->add_option("--stride", stride,
                  "Window stride in measures (default: no overlap)");

  CLI::App* tr = app.add_subcommand("train", "Train a model on a corpus");
  tr->add_option("--config", config_path, "key=value config file")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--corpus", corpus_path, "Corpus from tokenize")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--out", out_path, "Run directory")->required();

  CLI::App* gen = app.add_subcommand(
      "generate", "Decode prior samples from a checkpoint into MIDI");
  gen->add_option("--checkpoint", ckpt_path, "Model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--count", count, "Number of songs")->required();
  gen->add_option("--seed", seed, "Sampling seed");
  gen->add_option("--out", out_path, "Output directory")->required();

  CLI::App* ev = app.add_subcommand(
      "evaluate", "Reconstruction accuracy and metrics on a corpus");
  ev->add_option("--checkpoint", ckpt_path, "Model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--corpus", corpus_path, "Corpus from tokenize")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--out", out_path, "Report path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (tok->parsed()) return cmd_tokenize(in_dir, out_path, bars, stride);
    if (tr->parsed()) return cmd_train(config_path, corpus_path, out_path);
    if (gen->parsed()) return cmd_generate(ckpt_path, count, seed, out_path);
    if (ev->parsed()) return cmd_evaluate(ckpt_path, corpus_path, out_path);
  } catch (const calliope::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
