from .dataset import (
    MAGIC,
    Transition,
    TransitionDataset,
    columns,
    concat,
    from_bytes,
    load,
    reveal_true_domains,
    save,
    to_bytes,
)
from .problem import QUALITIES, PuorlProblem, build_problem, sample_domain, split, split_indices

__all__ = [
    "MAGIC", "Transition", "TransitionDataset", "columns", "concat", "from_bytes", "load",
    "reveal_true_domains", "save", "to_bytes", "QUALITIES", "PuorlProblem", "build_problem",
    "sample_domain", "split", "split_indices",
]
