"""Training-snippet records, an indexed on-disk container, and corpus splits.

Container layout ("JSNP"): magic, u32 version, then length-prefixed CRC-guarded
records, then a footer with record offsets so readers can random-access.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"JSNP"
FOOTER_MAGIC = b"JSNX"
VERSION = 1
LIGHT_BIN_EDGES = (1.0, 10.0, 100.0, 1000.0)   # lux thresholds, 5 bins


class SnippetFormatError(IOError):
    """Corrupt, truncated, or incompatible snippet container."""


def lighting_bin(lux: float) -> int:
    return int(np.digitize(lux, LIGHT_BIN_EDGES))


@dataclass
class Snippet:
    raster: np.ndarray       # (64, 64, 5) belief image
    map_crop: np.ndarray     # (64, 64, 3) occupancy / lighting / visibility
    goal: np.ndarray         # (64, 64) binary
    mask_bits: np.ndarray    # (6,) uint8
    traj: np.ndarray         # (H, 3) body-frame increments, chained
    sigma: np.ndarray        # (H,) log-variance targets
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.traj.ndim != 2 or self.traj.shape[1] != 3:
            raise ValueError("traj must be (H, 3)")
        if self.sigma.shape != (self.traj.shape[0],):
            raise ValueError("sigma must be (H,)")

    def to_payload(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf,
                 raster=self.raster.astype(np.float16),
                 map_crop=self.map_crop.astype(np.float16),
                 goal=np.packbits(self.goal.astype(np.uint8)),
                 mask_bits=self.mask_bits.astype(np.uint8),
                 traj=self.traj.astype(np.float32),
                 sigma=self.sigma.astype(np.float32),
                 meta=np.frombuffer(json.dumps(self.meta).encode("utf-8"), dtype=np.uint8))
        return buf.getvalue()

    @classmethod
    def from_payload(cls, payload: bytes) -> "Snippet":
        z = np.load(io.BytesIO(payload))
        goal = np.unpackbits(z["goal"])[:64 * 64].reshape(64, 64).astype(np.float64)
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        return cls(z["raster"].astype(np.float64), z["map_crop"].astype(np.float64),
                   goal, z["mask_bits"], z["traj"].astype(np.float64),
                   z["sigma"].astype(np.float64), meta)


def save_snippets(path, snippets) -> int:
    """Write an indexed container; returns the record count."""
    offsets = []
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for sn in snippets:
            payload = sn.to_payload()
            offsets.append(f.tell())
            f.write(struct.pack("<II", len(payload), zlib.crc32(payload)))
            f.write(payload)
        footer_at = f.tell()
        body = FOOTER_MAGIC + struct.pack("<Q", len(offsets)) \
            + struct.pack(f"<{len(offsets)}Q", *offsets)
        f.write(body)
        f.write(struct.pack("<QI", footer_at, zlib.crc32(body)))
    return len(offsets)


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise SnippetFormatError(f"truncated container: short read in {what}")
    return b


class SnippetReader:
    """Random-access reader over a JSNP container."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "rb")
        if _read_exact(self._f, 4, "magic") != MAGIC:
            raise SnippetFormatError(f"bad magic in {path}")
        (ver,) = struct.unpack("<I", _read_exact(self._f, 4, "version"))
        if ver != VERSION:
            raise SnippetFormatError(f"unsupported container version {ver}")
        self._f.seek(0, io.SEEK_END)
        end = self._f.tell()
        if end < 20:
            raise SnippetFormatError("truncated container: missing footer")
        self._f.seek(end - 12)
        footer_at, crc = struct.unpack("<QI", self._f.read(12))
        if footer_at >= end - 12:
            raise SnippetFormatError("truncated container: bad footer offset")
        self._f.seek(footer_at)
        body = _read_exact(self._f, end - 12 - footer_at, "footer")
        if zlib.crc32(body) != crc or body[:4] != FOOTER_MAGIC:
            raise SnippetFormatError("corrupt footer")
        (n,) = struct.unpack("<Q", body[4:12])
        self.offsets = list(struct.unpack(f"<{n}Q", body[12:12 + 8 * n]))

    def __len__(self):
        return len(self.offsets)

    def __getitem__(self, i: int) -> Snippet:
        self._f.seek(self.offsets[i])
        size, crc = struct.unpack("<II", _read_exact(self._f, 8, "record header"))
        payload = _read_exact(self._f, size, "record payload")
        if zlib.crc32(payload) != crc:
            raise SnippetFormatError(f"corrupt record {i}")
        return Snippet.from_payload(payload)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def close(self):
        self._f.close()


def load_snippets(path) -> list[Snippet]:
    r = SnippetReader(path)
    try:
        return list(r)
    finally:
        r.close()


def stratified_split(snippets, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """World-disjoint index split, balanced across lighting bins.

    Worlds are grouped by their dominant lighting bin and dealt round-robin
    so each split sees every lighting condition in near-target proportion.
    Returns (train_idx, val_idx, test_idx).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    by_world: dict = {}
    for i, sn in enumerate(snippets):
        by_world.setdefault(sn.meta["world_seed"], []).append(i)
    worlds = sorted(by_world)
    rng = np.random.default_rng(seed)

    def dominant_bin(idxs):
        bins = [snippets[i].meta.get("lighting_bin", 0) for i in idxs]
        return int(np.bincount(bins).argmax())

    groups: dict = {}
    for wseed in worlds:
        groups.setdefault(dominant_bin(by_world[wseed]), []).append(wseed)

    splits = ([], [], [])
    counts = np.zeros(3)
    total = 0
    targets = np.asarray(fractions)
    for b in sorted(groups):
        ws = groups[b]
        rng.shuffle(ws)
        for wseed in ws:
            deficit = targets * (total + len(by_world[wseed])) - counts
            k = int(deficit.argmax())
            splits[k].extend(by_world[wseed])
            counts[k] += len(by_world[wseed])
            total += len(by_world[wseed])
    return tuple(sorted(s) for s in splits)


def corpus_stats(snippets) -> dict:
    """Summary counts used by the data-generation report."""
    n_active = np.array([int(sn.mask_bits.sum()) for sn in snippets])
    bins = np.array([sn.meta.get("lighting_bin", 0) for sn in snippets])
    sig = np.concatenate([sn.sigma for sn in snippets]) if snippets else np.zeros(0)
    return {
        "count": len(snippets),
        "worlds": len({sn.meta["world_seed"] for sn in snippets}),
        "active_sensor_hist": np.bincount(n_active, minlength=7).tolist(),
        "lighting_bin_hist": np.bincount(bins, minlength=5).tolist(),
        "sigma_target_mean": float(sig.mean()) if sig.size else 0.0,
        "degenerate": sum(1 for sn in snippets if sn.meta.get("degenerate", False)),
    }
