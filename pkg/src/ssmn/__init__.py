"""One-shot part matching between point-annotated images with structured
set matching networks."""

from .estimators import (AffineMatcher, MatchingNetwork, NearestPatchMatcher, PatchExtractor, RandomMatcher,
                         SSMN)

__all__ = ["SSMN", "MatchingNetwork", "RandomMatcher", "NearestPatchMatcher", "AffineMatcher", "PatchExtractor"]
__version__ = "0.1.0"
