from __future__ import annotations
import difflib
import re
from typing import Iterable, Optional

try:
    from rapidfuzz import fuzz, process  # type: ignore
except Exception:  # pragma: no cover
    process = None  # type: ignore
    fuzz = None  # type: ignore


_SEPARATORS = re.compile(r"[\s\-]+")


def normalize_key(name: str) -> str:
    n = (name or "").strip().lower()
    return _SEPARATORS.sub("_", n)


def suggest_key(name: str, valid: Iterable[str], *, threshold: int = 60) -> Optional[str]:
    """
    Closest valid key to a rejected one, or None when nothing is close.
    Uses RapidFuzz if available, else difflib on normalized keys.
    """
    choices = list(valid)
    if not name or not choices:
        return None
    base = normalize_key(name)
    norm_choices = [normalize_key(c) for c in choices]
    if base in norm_choices:
        return choices[norm_choices.index(base)]
    if process is None:
        match = difflib.get_close_matches(base, norm_choices, n=1, cutoff=threshold / 100.0)
        return choices[norm_choices.index(match[0])] if match else None
    match = process.extractOne(base, norm_choices, scorer=fuzz.ratio)
    if match and match[1] >= threshold:
        return choices[match[2]]
    return None
