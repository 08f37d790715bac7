"""Scoped, read-only access to a flat ``name -> Tensor`` mapping."""
from __future__ import annotations

from collections.abc import Mapping

from .tensor import Tensor


class Params:
    """View of parameters under a dotted prefix.

    ``p / "pool"`` descends one level; ``p["dw.weight"]`` fetches
    ``<prefix>.pool.dw.weight``. Every successful lookup is added to
    ``used`` so callers can detect parameters a forward pass never touched.
    """

    def __init__(self, tensors: Mapping[str, Tensor], prefix: str = "", used: set[str] | None = None):
        self._tensors = tensors
        self.prefix = prefix
        self.used = used if used is not None else set()

    def _full(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        full = self._full(key)
        try:
            t = self._tensors[full]
        except KeyError:
            raise KeyError(f"missing parameter {full!r}") from None
        self.used.add(full)
        return t

    def __contains__(self, key: str) -> bool:
        return self._full(key) in self._tensors

    def __truediv__(self, sub: str | int) -> Params:
        return Params(self._tensors, self._full(str(sub)), self.used)

    def __repr__(self) -> str:
        return f"Params(prefix={self.prefix!r})"
