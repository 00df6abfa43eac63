"""Checkpoint merging and long-to-short response metrics."""
from ._l2smerge import (
    IoError,
    L2SMergeError,
    NumericalError,
    ValidationError,
    __version__,
    average_merge,
    bf16_round,
    content_fingerprint,
    corpus_report,
    dare_ties,
    detect_reflection,
    diff_checkpoints,
    load_checkpoint,
    lore_merge,
    resolve_recipe,
    run_merge,
    save_checkpoint,
    sens_coefficients,
    set_threads,
    svt,
    task_arithmetic,
    ties_merge,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
