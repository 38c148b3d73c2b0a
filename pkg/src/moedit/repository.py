"""Append-only store of experts with similarity-gated retrieval.

Each entry keeps one expert's two factors and the visual/textual
descriptors frozen at insertion time. Retrieval is two-staged: a hard
filter keeps entries whose visual score strictly beats the query's own
sentinel score, then the surviving textual scores become bounded fusion
weights. Entries are never mutated; files round-trip bitwise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .routing import soft_weights


class FingerprintError(ValueError):
    """Stored artifact dimensions differ from what the caller expects."""


@dataclass(frozen=True)
class Expert:
    uid: int
    timestep: int
    u: np.ndarray  # (rank, module_dim) float32
    v: np.ndarray


@dataclass(frozen=True)
class Entry:
    expert: Expert
    feat_visual: np.ndarray  # (k * module_dim,) float32
    feat_textual: np.ndarray


@dataclass(frozen=True)
class RoutedSet:
    """Survivors of the hard filter, in repository order."""

    indices: np.ndarray  # int, ascending
    scores: np.ndarray  # visual scores of the survivors
    threshold: float  # the query's sentinel score

    def __len__(self) -> int:
        return len(self.indices)


def make_fingerprint(rank: int, module_dim: int, k: int, n_visual: int, d: int) -> dict:
    return {"rank": rank, "module_dim": module_dim, "k": k,
            "n_visual": n_visual, "d": d}


def check_fingerprint(expected: dict, actual: dict, where: str) -> None:
    if expected != actual:
        raise FingerprintError(f"fingerprint mismatch at {where}: "
                               f"expected {expected}, found {actual}")


class ExpertRepository:
    def __init__(self, fingerprint: dict):
        self.fingerprint = dict(fingerprint)
        self.entries: list[Entry] = []
        self._vis_cache: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, u: np.ndarray, v: np.ndarray, feat_visual: np.ndarray,
               feat_textual: np.ndarray, timestep: int) -> int:
        fp = self.fingerprint
        want = (fp["rank"], fp["module_dim"])
        if u.shape != want or v.shape != want:
            raise FingerprintError(f"expert factors {u.shape}/{v.shape} != {want}")
        width = fp["k"] * fp["module_dim"]
        if feat_visual.shape != (width,) or feat_textual.shape != (width,):
            raise FingerprintError(
                f"features {feat_visual.shape}/{feat_textual.shape} != ({width},)"
            )
        uid = len(self.entries)
        self.entries.append(Entry(
            expert=Expert(uid=uid, timestep=timestep,
                          u=u.astype(np.float32).copy(),
                          v=v.astype(np.float32).copy()),
            feat_visual=feat_visual.astype(np.float32).copy(),
            feat_textual=feat_textual.astype(np.float32).copy(),
        ))
        self._vis_cache = None
        return uid

    def _visual_matrix(self) -> np.ndarray:
        if self._vis_cache is None or len(self._vis_cache) != len(self.entries):
            self._vis_cache = (
                np.stack([e.feat_visual for e in self.entries])
                if self.entries else
                np.zeros((0, self.fingerprint["k"] * self.fingerprint["module_dim"]),
                         dtype=np.float32)
            )
        return self._vis_cache

    def hard_route(self, query_visual: np.ndarray, sentinel_feature: np.ndarray,
                   divisor: float) -> RoutedSet:
        """Keep entries scoring strictly above the sentinel; ties drop."""
        q = query_visual.astype(np.float64)
        scores = self._visual_matrix().astype(np.float64) @ q / divisor
        threshold = float(sentinel_feature.astype(np.float64) @ q / divisor)
        mask = scores > threshold
        idx = np.nonzero(mask)[0]
        return RoutedSet(indices=idx, scores=scores[idx], threshold=threshold)

    def soft_route_weights(self, routed: RoutedSet, query_textual: np.ndarray,
                           divisor: float) -> np.ndarray:
        """Fusion weights for the surviving entries; each in (0,1), sum < 1."""
        if len(routed) == 0:
            return np.zeros(0, dtype=np.float32)
        txt = np.stack([self.entries[i].feat_textual for i in routed.indices])
        scores = (txt.astype(np.float64) @ query_textual.astype(np.float64)) / divisor
        with nm.use_dtype(np.float64):
            w = soft_weights(nm.tensor(scores[None, :])).data[0]
        return w.astype(np.float32)

    def selected(self, routed: RoutedSet) -> list[Entry]:
        return [self.entries[i] for i in routed.indices]

    def entry_digests(self) -> list[str]:
        """Order-independent content identity of the stored experts."""
        out = []
        for e in self.entries:
            h = hashlib.sha256()
            for arr in (e.expert.u, e.expert.v, e.feat_visual, e.feat_textual):
                h.update(arr.tobytes())
            out.append(h.hexdigest())
        return sorted(out)

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": "repository",
            "fingerprint": self.fingerprint,
            "count": len(self.entries),
            "entries": [
                {"uid": e.expert.uid, "timestep": e.expert.timestep}
                for e in self.entries
            ],
        }
        tensors = {}
        for i, e in enumerate(self.entries):
            tag = f"entry{i:06d}"
            tensors[f"{tag}.u"] = e.expert.u
            tensors[f"{tag}.v"] = e.expert.v
            tensors[f"{tag}.feat_visual"] = e.feat_visual
            tensors[f"{tag}.feat_textual"] = e.feat_textual
        nm.save_bundle(path, meta, tensors)

    @classmethod
    def load(cls, path, expected_fingerprint: dict | None = None) -> "ExpertRepository":
        meta, tensors = nm.load_bundle(path)
        if meta.get("kind") != "repository":
            raise nm.SerializationError(f"bundle at {path} is not a repository")
        repo = cls(meta["fingerprint"])
        if expected_fingerprint is not None:
            check_fingerprint(expected_fingerprint, repo.fingerprint, str(path))
        for i, rec in enumerate(meta["entries"]):
            tag = f"entry{i:06d}"
            uid = repo.insert(tensors[f"{tag}.u"], tensors[f"{tag}.v"],
                              tensors[f"{tag}.feat_visual"],
                              tensors[f"{tag}.feat_textual"],
                              timestep=rec["timestep"])
            if uid != rec["uid"]:
                raise nm.SerializationError(
                    f"entry {i}: stored uid {rec['uid']} != recomputed {uid}"
                )
        return repo
