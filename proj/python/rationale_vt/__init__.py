"""Visually grounded rationale generation: fusion, metrics and judgment aggregation."""

from ._core import (
    Vocabulary,
    bleu,
    build_report,
    build_sequence,
    cider,
    content_word_overlap,
    correlate,
    extract_phrases,
    meteor,
    plausibility,
    porter_stem,
    rouge_l,
    run_cli,
    train_bpe,
    variants,
)

__all__ = [
    "Vocabulary",
    "bleu",
    "build_report",
    "build_sequence",
    "cider",
    "content_word_overlap",
    "correlate",
    "extract_phrases",
    "meteor",
    "plausibility",
    "porter_stem",
    "rouge_l",
    "run_cli",
    "train_bpe",
    "variants",
]
