"""Forward architecture search: grow networks by boosting shortcut weak learners."""

from .config import RunConfig
from .genotype import Genotype, Pattern, Shortcut, Skeleton
from .growth import build_model, finalize_candidates, seed_model
from .search import lower_convex_hull, sample_parent, search_loop
from .weaklearn import initialize_candidates, select_top, weak_learn

__version__ = "0.1.0"

__all__ = [
    "Genotype",
    "Pattern",
    "RunConfig",
    "Shortcut",
    "Skeleton",
    "build_model",
    "finalize_candidates",
    "initialize_candidates",
    "lower_convex_hull",
    "sample_parent",
    "search_loop",
    "seed_model",
    "select_top",
    "weak_learn",
]
