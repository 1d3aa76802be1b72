#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "calliope/corpus.hpp"
#include "calliope/eval.hpp"
#include "calliope/midi.hpp"
#include "calliope/token.hpp"
#include "calliope/train.hpp"

namespace py = pybind11;
using namespace calliope;

namespace {

using PyNote = std::tuple<int, int, int>;  // (time, pitch, duration)

TrackMeasure measure_from_notes(const std::vector<PyNote>& notes, int role) {
  TrackMeasure m;
  m.role = static_cast<TrackRole>(role);
  for (const auto& [time, pitch, duration] : notes) {
    m.notes.emplace_back(time, pitch, duration);
  }
  m.normalize();
  return m;
}

std::vector<PyNote> notes_to_py(const TrackMeasure& m) {
  std::vector<PyNote> out;
  for (const NoteEvent& n : m.notes) {
    out.emplace_back(n.time, n.pitch, n.duration);
  }
  return out;
}

std::vector<int> py_tokenize_measure(const std::vector<PyNote>& notes,
                                     int max_notes) {
  const TokenSeq seq = tokenize_measure(measure_from_notes(notes, 0),
                                        max_notes);
  return std::vector<int>(seq.begin(), seq.end());
}

py::dict py_detokenize_measure(const std::vector<int>& ids) {
  TokenSeq seq;
  for (int id : ids) seq.push_back(static_cast<std::uint16_t>(id));
  const DetokenizeResult r = detokenize_measure(seq);
  py::dict out;
  out["notes"] = notes_to_py(r.measure);
  out["malformed"] = r.malformed;
  return out;
}

SongTokens song_from_seqs(int n_measures,
                          const std::vector<std::vector<int>>& seqs) {
  SongTokens song;
  song.n_measures = n_measures;
  song.seq_len = seqs.empty() ? 0 : static_cast<int>(seqs[0].size());
  for (const auto& seq : seqs) {
    song.seqs.emplace_back(seq.begin(), seq.end());
  }
  return song;
}

void py_write_corpus(const std::string& path,
                     const std::vector<py::dict>& songs) {
  std::vector<SongTokens> records;
  for (const py::dict& d : songs) {
    records.push_back(
        song_from_seqs(d["n_measures"].cast<int>(),
                       d["seqs"].cast<std::vector<std::vector<int>>>()));
  }
  write_corpus(path, records);
}

std::vector<py::dict> py_read_corpus(const std::string& path) {
  std::vector<py::dict> out;
  for (const SongTokens& song : read_corpus(path)) {
    py::dict d;
    d["n_measures"] = song.n_measures;
    d["seq_len"] = song.seq_len;
    std::vector<std::vector<int>> seqs;
    for (const TokenSeq& seq : song.seqs) {
      seqs.emplace_back(seq.begin(), seq.end());
    }
    d["seqs"] = seqs;
    out.push_back(std::move(d));
  }
  return out;
}

double py_beta_schedule(long long step, const std::string& config_text) {
  return beta_schedule(step, TrainConfig::parse_text(config_text));
}

py::dict py_train(const std::string& config_text,
                  const std::string& corpus_path, const std::string& run_dir) {
  const TrainConfig cfg = TrainConfig::parse_text(config_text);
  const TrainResult r = train_loop(cfg, read_corpus(corpus_path), run_dir);
  py::dict out;
  out["final_checkpoint"] = r.final_checkpoint;
  out["steps_run"] = r.steps_run;
  out["last_recon_loss"] = r.last.recon_loss;
  return out;
}

std::string py_evaluate(const std::string& checkpoint,
                        const std::string& corpus_path) {
  Calliope model = load_model_checkpoint(checkpoint);
  const std::vector<SongTokens> corpus = read_corpus(corpus_path);
  for (const SongTokens& song : corpus) {
    if (song.n_measures != model.config().n_measures ||
        song.seq_len != model.config().seq_len()) {
      throw BarsMismatch("corpus does not match the checkpoint's bar count");
    }
  }
  const AccuracyReport acc = accuracy_report(model, corpus);
  std::vector<GridSong> recons;
  for (const SongTokens& song : corpus) {
    recons.push_back(detokenize_song(song).song);
  }
  return metrics_report_json(gen_metrics(recons), &acc,
                             static_cast<int>(corpus.size()));
}

std::string py_generate(const std::string& checkpoint, int count,
                        std::uint64_t seed, const std::string& out_dir) {
  Calliope model = load_model_checkpoint(checkpoint);
  const std::vector<GeneratedSong> songs = generate(model, count, seed);
  std::vector<GridSong> grids;
  for (int i = 0; i < static_cast<int>(songs.size()); ++i) {
    if (!out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "gen_%06d.mid", i);
      write_smf_file(out_dir + "/" + name, songs[i].song, 20);
    }
    grids.push_back(songs[i].song);
  }
  return metrics_report_json(gen_metrics(grids), nullptr, count);
}

std::string py_corpus_metrics(const std::string& corpus_path) {
  std::vector<GridSong> grids;
  for (const SongTokens& song : read_corpus(corpus_path)) {
    grids.push_back(detokenize_song(song).song);
  }
  return metrics_report_json(gen_metrics(grids), nullptr,
                             static_cast<int>(grids.size()));
}

py::dict py_tokenize_midi_file(const std::string& path, int bars) {
  const MidiSongRaw raw = parse_smf_file(path);
  py::dict out;
  out["four_four"] = is_four_four(raw);
  std::vector<py::dict> windows;
  if (is_four_four(raw)) {
    const GridSong song = quantize(raw);
    for (int start = 0; start + bars <= song.n_measures(); start += bars) {
      const SongTokens st = tokenize_song(song.window(start, bars),
                                          kDefaultMaxNotes);
      py::dict d;
      d["n_measures"] = st.n_measures;
      d["seq_len"] = st.seq_len;
      std::vector<std::vector<int>> seqs;
      for (const TokenSeq& seq : st.seqs) {
        seqs.emplace_back(seq.begin(), seq.end());
      }
      d["seqs"] = seqs;
      windows.push_back(std::move(d));
    }
  }
  out["windows"] = windows;
  return out;
}

}  // namespace

PYBIND11_MODULE(_calliope, m) {
  m.doc() = "Multi-track music adversarial autoencoder core";

  py::dict vocab;
  vocab["pitch_base"] = kPitchBase;
  vocab["time_base"] = kTimeBase;
  vocab["duration_base"] = kDurationBase;
  vocab["pad"] = kPad;
  vocab["sos"] = kSos;
  vocab["eos"] = kEos;
  vocab["size"] = kVocab;
  vocab["default_max_notes"] = kDefaultMaxNotes;
  m.attr("VOCAB") = vocab;

  m.def("seq_len_for", &seq_len_for, py::arg("max_notes"),
        "Token sequence length for one per-track measure");
  m.def("tokenize_measure", &py_tokenize_measure, py::arg("notes"),
        py::arg("max_notes") = kDefaultMaxNotes,
        "Token ids for a list of (time, pitch, duration) notes");
  m.def("detokenize_measure", &py_detokenize_measure, py::arg("ids"),
        "Notes and malformed-token count recovered from token ids");
  m.def("write_corpus", &py_write_corpus, py::arg("path"), py::arg("songs"));
  m.def("read_corpus", &py_read_corpus, py::arg("path"));
  m.def("tokenize_midi_file", &py_tokenize_midi_file, py::arg("path"),
        py::arg("bars") = 1,
        "Non-overlapping tokenized windows of a MIDI file");
  m.def("beta_schedule", &py_beta_schedule, py::arg("step"),
        py::arg("config_text") = "",
        "Regularization weight at a training step");
  m.def("default_config", [] { return TrainConfig().to_key_values(); },
        "Default training configuration as key=value text");
  m.def("train", &py_train, py::arg("config_text"), py::arg("corpus_path"),
        py::arg("run_dir"), "Run the training loop; returns run facts");
  m.def("evaluate", &py_evaluate, py::arg("checkpoint"),
        py::arg("corpus_path"),
        "Reconstruction accuracy and metrics as a JSON string");
  m.def("generate", &py_generate, py::arg("checkpoint"), py::arg("count"),
        py::arg("seed") = 1, py::arg("out_dir") = "",
        "Decode prior samples; writes MIDI when out_dir given; returns "
        "metrics JSON");
  m.def("corpus_metrics", &py_corpus_metrics, py::arg("corpus_path"),
        "EB/UPC/QN/DP of a tokenized corpus as a JSON string");

  py::register_exception<Error>(m, "CalliopeError");
}
