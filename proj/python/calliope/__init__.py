"""Multi-track symbolic music adversarial autoencoder."""

try:
    # installed layout: the extension lives inside the package
    from ._calliope import (
        VOCAB,
        CalliopeError,
        beta_schedule,
        corpus_metrics,
        default_config,
        detokenize_measure,
        evaluate,
        generate,
        read_corpus,
        seq_len_for,
        tokenize_measure,
        tokenize_midi_file,
        train,
        write_corpus,
    )
except ImportError:
    # build-tree layout: the extension sits on sys.path next to the build
    from _calliope import (
        VOCAB,
        CalliopeError,
        beta_schedule,
        corpus_metrics,
        default_config,
        detokenize_measure,
        evaluate,
        generate,
        read_corpus,
        seq_len_for,
        tokenize_measure,
        tokenize_midi_file,
        train,
        write_corpus,
    )

__version__ = "0.1.0"

__all__ = [
    "VOCAB",
    "CalliopeError",
    "beta_schedule",
    "corpus_metrics",
    "default_config",
    "detokenize_measure",
    "evaluate",
    "generate",
    "read_corpus",
    "seq_len_for",
    "tokenize_measure",
    "tokenize_midi_file",
    "train",
    "write_corpus",
]
