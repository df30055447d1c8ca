"""Clip-level surprisal: the sum of block-level variational bounds."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .audio import MelClip, MelConfig, chunk_blocks, load_clip
from .diffusion import elbo
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

OUTPUT_COLUMNS = ("clip_id", "n_blocks", "total_nats", "normalized_nats", "padded_blocks",
                  "model_id", "seed")


class DuplicateClipError(ValueError):
    pass


@dataclass(frozen=True)
class ElboConfig:
    mode: str = "mc"
    mc_samples: int = 64
    seed: int = 0


@dataclass
class SurprisalRecord:
    clip_id: str
    n_blocks: int
    per_block: list[float]
    total: float
    normalized: float
    padded_blocks: int
    model_id: str = ""
    seed: int = 0
    padded_flags: list[bool] = field(default_factory=list)
    stderr: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {"clip_id": self.clip_id, "n_blocks": self.n_blocks,
                "total_nats": repr(self.total), "normalized_nats": repr(self.normalized),
                "padded_blocks": self.padded_blocks, "model_id": self.model_id,
                "seed": self.seed}

    def detail(self) -> dict:
        return {"clip_id": self.clip_id, "per_block": self.per_block,
                "padded": self.padded_flags,
                "stderr": [s if math.isfinite(s) else None for s in self.stderr],
                "total": self.total, "normalized": self.normalized,
                "model_id": self.model_id, "seed": self.seed}


def clip_surprisal(clip: MelClip, params, sched: NoiseSchedule, cfg: ElboConfig = ElboConfig(),
                   model_id: str = "") -> SurprisalRecord:
    """Sum of per-block bounds for one clip.

    Every block is scored with the same seed, so identical blocks get identical
    scores.  ``normalized`` averages over unpadded blocks (over all blocks if
    every block is padded).
    """
    blocks = chunk_blocks(clip)
    if not blocks or clip.n_frames == 0:
        raise ValueError(f"clip {clip.clip_id!r} has no frames")
    results = [elbo(b.values, params, sched, cfg.mode, cfg.mc_samples, cfg.seed) for b in blocks]
    per_block = [r.total for r in results]
    flags = [b.padded for b in blocks]
    clean = [v for v, p in zip(per_block, flags) if not p] or per_block
    return SurprisalRecord(
        clip_id=clip.clip_id,
        n_blocks=len(blocks),
        per_block=per_block,
        total=math.fsum(per_block),
        normalized=math.fsum(clean) / len(clean),
        padded_blocks=sum(flags),
        model_id=model_id,
        seed=cfg.seed,
        padded_flags=flags,
        stderr=[r.stderr for r in results],
    )


def read_manifest(path: str | Path) -> list[tuple[str, Path]]:
    """Rows of (clip_id, path); relative paths resolve against the manifest's folder."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            p = Path(rec["path"])
            rows.append((rec["clip_id"], p if p.is_absolute() else path.parent / p))
    seen = set()
    for cid, _ in rows:
        if cid in seen:
            raise DuplicateClipError(f"duplicate clip_id {cid!r} in manifest")
        seen.add(cid)
    return rows


def read_surprisal_csv(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {r["clip_id"]: r for r in csv.DictReader(fh)}


def write_surprisal_csv(path: str | Path, rows) -> None:
    rows = sorted(rows, key=lambda r: r["clip_id"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=OUTPUT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in OUTPUT_COLUMNS})


def batch_surprisal(manifest: list[tuple[str, Path]], params, sched: NoiseSchedule,
                    cfg: ElboConfig, mel: MelConfig, block_frames: int, *,
                    existing: dict[str, dict] | None = None, model_id: str = "",
                    detail_dir: str | Path | None = None):
    """Score every clip in ``manifest``.

    Returns ``(rows, errors)``: ``rows`` are CSV row dicts sorted by clip_id
    (including rows carried over from ``existing``), ``errors`` maps clip_id to
    a message for clips that could not be read.
    """
    ids = [cid for cid, _ in manifest]
    if len(set(ids)) != len(ids):
        raise DuplicateClipError("manifest contains duplicate clip_ids")
    existing = existing or {}
    rows = {cid: r for cid, r in existing.items()}
    errors: dict[str, str] = {}
    for cid, path in sorted(manifest):
        if cid in rows:
            log.info("%s: already present, skipped", cid)
            continue
        try:
            clip = load_clip(path, mel, cid, block_frames)
        except (OSError, ValueError) as exc:
            errors[cid] = f"{type(exc).__name__}: {exc}"
            log.error("%s: %s", cid, errors[cid])
            continue
        rec = clip_surprisal(clip, params, sched, cfg, model_id)
        rows[cid] = rec.row()
        if detail_dir is not None:
            out = Path(detail_dir) / f"{cid}.json"
            out.write_text(json.dumps(rec.detail(), indent=2, sort_keys=True) + "\n")
    return [rows[k] for k in sorted(rows)], errors
