"""Manifests, filename parsing, protocol splits, sampling, augmentation,
representative-query selection, and the synthetic cross-view generator.

View encoding: 0 = aerial, 1 = ground-frontal, 2 = ground-oblique. Protocols
operate on the collapsed aerial/ground pair via a view map.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, ContractError, ParseError, ProtocolError
from .storage import save_rten

MANIFEST_HEADER = "#secap-manifest v1"

AERIAL = 0
GROUND_FRONTAL = 1
GROUND_OBLIQUE = 2

# raw view id -> collapsed side (0 aerial, 1 ground)
DEFAULT_VIEW_MAP = {AERIAL: 0, GROUND_FRONTAL: 1, GROUND_OBLIQUE: 1}

PROTOCOLS = ("a2g", "g2a", "g2ag")
# protocol -> (query side, gallery sides)
_PROTOCOL_SIDES = {"a2g": (0, (1,)), "g2a": (1, (0,)), "g2ag": (1, (0, 1))}


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts; independent of PYTHONHASHSEED."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Records and manifests


@dataclass(frozen=True)
class SampleRecord:
    path: str
    identity: int  # -1 marks a gallery distractor
    camera: int
    view: int
    frame: int

    def __post_init__(self):
        if self.identity < -1:
            raise ConfigurationError(f"identity must be >= -1, got {self.identity}")
        if self.camera < 0 or self.view < 0 or self.frame < 0:
            raise ConfigurationError(
                f"camera/view/frame must be non-negative, got {self.camera}/{self.view}/{self.frame}"
            )


class Manifest:
    """Ordered record collection; paths unique, records sorted by path."""

    def __init__(
        self,
        records: Iterable[SampleRecord],
        *,
        name: str = "dataset",
        num_views: Optional[int] = None,
        image_size: Optional[Tuple[int, int]] = None,
        root: Optional[str] = None,
    ):
        recs = sorted(records, key=lambda r: r.path)
        seen = set()
        for r in recs:
            if r.path in seen:
                raise ConfigurationError(f"duplicate path in manifest: {r.path!r}")
            seen.add(r.path)
        self.records: Tuple[SampleRecord, ...] = tuple(recs)
        self.name = name
        if num_views is None:
            num_views = max((r.view for r in recs), default=0) + 1
        self.num_views = num_views
        self.image_size = image_size
        self.root = root

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def identities(self) -> List[int]:
        """Sorted unique non-distractor identities."""
        return sorted({r.identity for r in self.records if r.identity >= 0})

    def by_identity(self) -> Dict[int, List[SampleRecord]]:
        out: Dict[int, List[SampleRecord]] = {}
        for r in self.records:  # already path-sorted
            if r.identity >= 0:
                out.setdefault(r.identity, []).append(r)
        return out

    def subset(self, records: Iterable[SampleRecord]) -> "Manifest":
        return Manifest(
            records,
            name=self.name,
            num_views=self.num_views,
            image_size=self.image_size,
            root=self.root,
        )

    def resolve(self, record: SampleRecord) -> str:
        return os.path.join(self.root, record.path) if self.root else record.path


def write_manifest(manifest: Manifest, path) -> None:
    lines = [MANIFEST_HEADER]
    lines.append(f"#meta name={manifest.name}")
    lines.append(f"#meta num_views={manifest.num_views}")
    if manifest.image_size is not None:
        lines.append(f"#meta image_size={manifest.image_size[0]}x{manifest.image_size[1]}")
    for r in manifest.records:
        lines.append(f"{r.path}\t{r.identity}\t{r.camera}\t{r.view}\t{r.frame}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    lines = text.split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ParseError(f"{path}: missing header {MANIFEST_HEADER!r}", 0)
    offset = len(lines[0].encode("utf-8")) + 1
    name, num_views, image_size = "dataset", None, None
    records: List[SampleRecord] = []
    for line in lines[1:]:
        line_start = offset
        offset += len(line.encode("utf-8")) + 1
        if not line:
            continue
        if line.startswith("#"):
            body = line[len("#meta ") :] if line.startswith("#meta ") else ""
            if body.startswith("name="):
                name = body[5:]
            elif body.startswith("num_views="):
                num_views = int(body[10:])
            elif body.startswith("image_size="):
                h, _, w = body[11:].partition("x")
                image_size = (int(h), int(w))
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(f"{path}: expected 5 tab-separated fields, got {len(fields)}", line_start)
        for i, f in enumerate(fields[1:], start=1):
            stripped = f.lstrip("-")
            if not stripped.isdigit():
                col = line_start + len("\t".join(fields[:i]).encode("utf-8")) + 1
                raise ParseError(f"{path}: non-integer field {f!r}", col)
        try:
            records.append(
                SampleRecord(
                    path=fields[0],
                    identity=int(fields[1]),
                    camera=int(fields[2]),
                    view=int(fields[3]),
                    frame=int(fields[4]),
                )
            )
        except ConfigurationError as exc:
            raise ParseError(f"{path}: {exc}", line_start) from exc
    root = os.path.dirname(os.path.abspath(path))
    try:
        return Manifest(records, name=name, num_views=num_views, image_size=image_size, root=root)
    except ConfigurationError as exc:
        raise ParseError(f"{path}: {exc}", 0) from exc


# ---------------------------------------------------------------------------
# Image file naming: <id>_C<camera>_<frame>.<ext>


def parse_image_name(name: str) -> Tuple[int, int, int]:
    """Parse `<digits>_C<digits>_<digits>.<ext>`; offsets index into the name bytes."""
    base = os.path.basename(name)
    pos = 0

    def digits(what: str) -> Tuple[int, int]:
        nonlocal pos
        start = pos
        while pos < len(base) and base[pos].isdigit():
            pos += 1
        if pos == start:
            raise ParseError(f"{base!r}: expected digits for {what}", start)
        return int(base[start:pos]), start

    def literal(lit: str) -> None:
        nonlocal pos
        if base[pos : pos + len(lit)] != lit:
            raise ParseError(f"{base!r}: expected {lit!r}", pos)
        pos += len(lit)

    identity, _ = digits("identity")
    literal("_C")
    camera, _ = digits("camera")
    literal("_")
    frame, _ = digits("frame")
    literal(".")
    if pos >= len(base):
        raise ParseError(f"{base!r}: missing extension", pos)
    return identity, camera, frame


def format_image_name(identity: int, camera: int, frame: int, ext: str = "rten") -> str:
    if identity < 0 or camera < 0 or frame < 0:
        raise ConfigurationError("image names encode non-negative fields only")
    return f"{identity:04d}_C{camera:02d}_{frame:06d}.{ext}"


# ---------------------------------------------------------------------------
# Protocol splits


@dataclass(frozen=True)
class ProtocolSplit:
    name: str
    query: Tuple[SampleRecord, ...]
    gallery: Tuple[SampleRecord, ...]


def build_protocol(
    manifest: Manifest,
    protocol_name: str,
    view_map: Optional[Mapping[int, int]] = None,
    queries: Optional[Iterable] = None,
) -> ProtocolSplit:
    """Build query/gallery record lists for one cross-view protocol.

    `queries` optionally designates the query images (records or path strings,
    typically from select_queries, and may span both views; entries of the
    other view are ignored). Without it, every non-distractor image of the
    query view is a query. The gallery holds all images of the gallery
    view(s), distractors included, minus the designated query images; for the
    single-view protocols that subtraction never intersects. Queries whose
    identity never occurs in the gallery are dropped with a warning.
    """
    if protocol_name not in _PROTOCOL_SIDES:
        raise ProtocolError(f"unknown protocol {protocol_name!r}; expected one of {PROTOCOLS}")
    vmap = DEFAULT_VIEW_MAP if view_map is None else dict(view_map)
    q_side, g_sides = _PROTOCOL_SIDES[protocol_name]

    def side(r: SampleRecord) -> int:
        if r.view not in vmap:
            raise ProtocolError(f"record {r.path!r} has view {r.view} absent from the view map")
        return vmap[r.view]

    query_pool = [r for r in manifest.records if r.identity >= 0 and side(r) == q_side]
    if queries is None:
        query = list(query_pool)
    else:
        paths = set()
        for q in queries:
            p = q.path if isinstance(q, SampleRecord) else str(q)
            paths.add(p)
        known = {r.path: r for r in manifest.records}
        for p in sorted(paths):
            if p not in known:
                raise ProtocolError(f"designated query {p!r} is not in the manifest")
            if known[p].identity < 0:
                raise ProtocolError(f"designated query {p!r} is a distractor")
        query = [r for r in query_pool if r.path in paths]

    query_paths = {r.path for r in query}
    gallery = [r for r in manifest.records if side(r) in g_sides and r.path not in query_paths]
    if not gallery:
        raise ProtocolError(f"{protocol_name}: empty gallery set")

    gallery_ids = {r.identity for r in gallery}
    unmatched = [r for r in query if r.identity not in gallery_ids]
    if unmatched:
        warnings.warn(
            f"{protocol_name}: dropping {len(unmatched)} query images whose identity "
            "never occurs in the gallery"
        )
        query = [r for r in query if r.identity in gallery_ids]
    if not query:
        raise ProtocolError(f"{protocol_name}: empty query set")
    return ProtocolSplit(name=protocol_name, query=tuple(query), gallery=tuple(gallery))


# ---------------------------------------------------------------------------
# P x K batch sampling


def pk_sample(manifest: Manifest, p: int, k: int, seed) -> List[SampleRecord]:
    """P distinct identities, K images each (with replacement only when short)."""
    if p < 1 or k < 1:
        raise ContractError(f"P and K must be >= 1, got P={p} K={k}")
    groups = manifest.by_identity()
    ids = sorted(groups)
    if len(ids) < p:
        raise ContractError(f"need at least {p} identities, manifest has {len(ids)}")
    rng = np.random.default_rng(seed)
    # permutation prefix, not choice(replace=False): its identity marginal is
    # measurably cleaner under sequential seeds, which the uniformity
    # property tests at a 3-sigma bound
    chosen = rng.permutation(len(ids))[:p]
    batch: List[SampleRecord] = []
    for idx in chosen:
        recs = groups[ids[int(idx)]]
        if len(recs) >= k:
            picks = rng.permutation(len(recs))[:k]
        else:
            picks = rng.integers(0, len(recs), size=k)
        batch.extend(recs[int(j)] for j in picks)
    return batch


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    pad: int = 4
    jitter_low: float = 0.8
    jitter_high: float = 1.2
    erase_prob: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.4)
    erase_aspect: Tuple[float, float] = (0.3, 3.33)


def augment(image: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """Pad-and-crop, channel jitter, random erasing. Pure in (image, seed)."""
    if image.ndim != 3:
        raise ContractError(f"expected (C, H, W) image, got shape {image.shape}")
    if not policy.enabled:
        return np.array(image)
    rng = np.random.default_rng(seed)
    c, h, w = image.shape

    pad = policy.pad
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    y0 = int(rng.integers(0, 2 * pad + 1))
    x0 = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, y0 : y0 + h, x0 : x0 + w].copy()

    gains = rng.uniform(policy.jitter_low, policy.jitter_high, size=c)
    out *= gains[:, None, None].astype(image.dtype)

    if rng.uniform() < policy.erase_prob:
        # resample until the rectangle fits and its rounded area stays in range
        for _ in range(50):
            frac = rng.uniform(*policy.erase_area)
            aspect = rng.uniform(*policy.erase_aspect)
            area = frac * h * w
            eh = max(1, int(round(np.sqrt(area * aspect))))
            ew = max(1, int(round(np.sqrt(area / aspect))))
            if eh > h or ew > w:
                continue
            lo, hi = policy.erase_area
            if not lo <= eh * ew / (h * w) <= hi:
                continue
            ey = int(rng.integers(0, h - eh + 1))
            ex = int(rng.integers(0, w - ew + 1))
            out[:, ey : ey + eh, ex : ex + ew] = rng.uniform(size=(c, eh, ew)).astype(image.dtype)
            break
    return out


# ---------------------------------------------------------------------------
# Gradient-histogram descriptor and representative-query selection


def hog_descriptor(image: np.ndarray, cell: int = 8, bins: int = 9) -> np.ndarray:
    """Orientation-binned gradient histogram, square cells, 2x2 block L2 norm."""
    if image.ndim != 3:
        raise ContractError(f"expected (C, H, W) image, got shape {image.shape}")
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    h, w = gray.shape
    hc, wc = h // cell, w // cell
    if hc < 1 or wc < 1:
        raise ContractError(f"image {h}x{w} smaller than one {cell}x{cell} cell")
    gray = gray[: hc * cell, : wc * cell]
    dy, dx = np.gradient(gray)
    mag = np.hypot(dy, dx)
    ang = np.mod(np.arctan2(dy, dx), np.pi)  # unsigned orientation
    bin_idx = np.minimum((ang / np.pi * bins).astype(np.int64), bins - 1)
    cell_y = (np.arange(hc * cell) // cell)[:, None]
    cell_x = (np.arange(wc * cell) // cell)[None, :]
    hist = np.zeros((hc, wc, bins))
    np.add.at(hist, (np.broadcast_to(cell_y, mag.shape), np.broadcast_to(cell_x, mag.shape), bin_idx), mag)
    if hc < 2 or wc < 2:
        flat = hist.ravel()
        return flat / (np.linalg.norm(flat) + 1e-12)
    blocks = []
    for by in range(hc - 1):
        for bx in range(wc - 1):
            v = hist[by : by + 2, bx : bx + 2].ravel()
            blocks.append(v / (np.linalg.norm(v) + 1e-12))
    return np.concatenate(blocks)


def _connected_components(adj: np.ndarray) -> List[List[int]]:
    n = adj.shape[0]
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.nonzero(adj[u])[0]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
        comps.append(sorted(comp))
    return comps


def _rank_pool(descriptors: np.ndarray) -> List[int]:
    """Order a pool of images by representativeness.

    Mutual-or-one-way kNN graph (k = min(3, n-1)), dominant component first
    (size, then earliest member). Within it, images rank by total distance to
    the rest of the component (the component medoid leads); outsiders follow,
    nearest to the medoid first. Index order breaks every tie, and the
    incoming pool is path-sorted, so the ranking is deterministic.
    """
    n = len(descriptors)
    if n == 1:
        return [0]
    dist = cdist(descriptors, descriptors)
    k = min(3, n - 1)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        picked = [j for j in order if j != i][:k]
        adj[i, picked] = True
    adj |= adj.T
    comps = _connected_components(adj)
    comps.sort(key=lambda c: (-len(c), c[0]))
    main = comps[0]
    sums = dist[np.ix_(main, main)].sum(axis=1)
    ranked = [main[i] for i in np.argsort(sums, kind="stable")]
    medoid = ranked[0]
    rest = sorted(set(range(n)) - set(main))
    rest.sort(key=lambda j: (dist[medoid, j], j))
    return ranked + rest


def select_queries(
    manifest: Manifest,
    per_view: int = 1,
    view_map: Optional[Mapping[int, int]] = None,
) -> List[SampleRecord]:
    """Pick per_view representative images per identity per collapsed view."""
    if per_view < 1:
        raise ContractError(f"per_view must be >= 1, got {per_view}")
    vmap = DEFAULT_VIEW_MAP if view_map is None else dict(view_map)
    sides = sorted(set(vmap.values()))
    selected: List[SampleRecord] = []
    for identity, recs in sorted(manifest.by_identity().items()):
        for s in sides:
            pool = [r for r in recs if vmap.get(r.view) == s]
            if not pool:
                warnings.warn(f"identity {identity} has no image on side {s}; skipped")
                continue
            desc = np.stack([hog_descriptor(_load_for_selection(manifest, r)) for r in pool])
            ranked = _rank_pool(desc)
            selected.extend(pool[i] for i in ranked[:per_view])
    return selected


def _load_for_selection(manifest: Manifest, record: SampleRecord) -> np.ndarray:
    from .storage import load_image

    return load_image(manifest.resolve(record))


# ---------------------------------------------------------------------------
# Identity-level train/test split


def split_identities(manifest: Manifest, holdout_fraction: float, seed) -> Tuple[Manifest, Manifest]:
    """Split by identity; distractors belong to the held-out (test) side."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigurationError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    ids = manifest.identities()
    if len(ids) < 2:
        raise ContractError("need at least 2 identities to split")
    rng = np.random.default_rng([derive_seed("identity-split", seed)])
    perm = rng.permutation(len(ids))
    n_test = min(len(ids) - 1, max(1, int(round(holdout_fraction * len(ids)))))
    test_ids = {ids[int(i)] for i in perm[:n_test]}
    train = [r for r in manifest.records if r.identity >= 0 and r.identity not in test_ids]
    test = [r for r in manifest.records if r.identity < 0 or r.identity in test_ids]
    return manifest.subset(train), manifest.subset(test)


# ---------------------------------------------------------------------------
# Synthetic cross-view corpus

# fixed 2-D cosine modes rendering identity latents into smooth patterns
_MODES = ((0, 1), (1, 0), (1, 1), (2, 1), (1, 2), (2, 2), (0, 2), (2, 0), (3, 1), (1, 3), (2, 3), (3, 2))

# per-view channel gains and vertical squash (aerial foreshortening)
_VIEW_GAINS = {0: (0.85, 1.0, 1.2), 1: (1.2, 1.0, 0.85), 2: (1.05, 0.9, 1.05)}
_VIEW_SQUASH = {0: 0.62, 1: 1.0, 2: 0.85}


@dataclass(frozen=True)
class SynthConfig:
    num_ids: int = 8
    images_per_id_per_view: int = 4
    num_views: int = 2
    image_h: int = 64
    image_w: int = 32
    seed: int = 0
    view_strength: float = 1.0
    cams_per_view: int = 2
    num_distractors: int = 0

    def __post_init__(self):
        if self.num_ids < 1 or self.images_per_id_per_view < 1 or self.cams_per_view < 1:
            raise ConfigurationError("all counts must be >= 1")
        if not 1 <= self.num_views <= 3:
            raise ConfigurationError(f"num_views must be 1..3, got {self.num_views}")
        if self.image_h < 8 or self.image_w < 8:
            raise ConfigurationError("image must be at least 8x8")
        if self.num_distractors < 0:
            raise ConfigurationError("num_distractors must be >= 0")


def _mode_table(h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    table = [np.cos(np.pi * fy * ys)[:, None] * np.cos(np.pi * fx * xs)[None, :] for fy, fx in _MODES]
    return np.stack(table)  # (K, H, W)


def _render(latent: np.ndarray, mix: np.ndarray, modes: np.ndarray, view: int, rng, strength: float) -> np.ndarray:
    coeffs = mix @ latent  # (3, K)
    base = np.tensordot(coeffs, modes, axes=([1], [0]))  # (3, H, W)
    img = 0.5 + 0.5 * np.tanh(1.5 * base)

    squash = _VIEW_SQUASH[view] + 0.05 * strength * rng.uniform(-1.0, 1.0)
    squash = float(np.clip(squash, 0.3, 1.0))
    h = img.shape[1]
    kept = max(1, int(round(squash * h)))
    src = np.minimum((np.arange(kept) / squash).astype(np.int64), h - 1)
    squashed = np.full_like(img, 0.25)
    squashed[:, :kept, :] = img[:, src, :]

    gains = np.array(_VIEW_GAINS[view]) * (1.0 + 0.05 * strength * rng.uniform(-1.0, 1.0, size=3))
    out = squashed * gains[:, None, None]
    out = out + rng.normal(0.0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig, out_dir) -> Tuple[Manifest, Dict[str, np.ndarray]]:
    """Write the corpus (.rten images + manifest.tsv); returns latents too.

    Every stream draws from its own seed-derived RNG keyed by (identity,
    view, index), so outputs are byte-identical across reruns and independent
    of generation order.
    """
    os.makedirs(out_dir, exist_ok=True)
    dim = cfg.num_ids
    mix_rng = np.random.default_rng([cfg.seed, 101])
    mix = mix_rng.standard_normal((3, len(_MODES), dim)) / np.sqrt(dim)
    modes = _mode_table(cfg.image_h, cfg.image_w)

    records: List[SampleRecord] = []
    latents: Dict[str, np.ndarray] = {}

    def emit(path: str, identity: int, camera: int, view: int, frame: int, latent, rng):
        img = _render(latent, mix, modes, view, rng, cfg.view_strength)
        save_rten(os.path.join(out_dir, path), img.astype(np.float32))
        records.append(SampleRecord(path=path, identity=identity, camera=camera, view=view, frame=frame))
        latents[path] = latent

    for i in range(cfg.num_ids):
        anchor = np.zeros(dim)
        anchor[i] = 1.0
        for v in range(cfg.num_views):
            for k in range(cfg.images_per_id_per_view):
                rng = np.random.default_rng([cfg.seed, 7, i, v, k])
                latent = anchor + 0.05 * rng.standard_normal(dim)
                camera = v * cfg.cams_per_view + k % cfg.cams_per_view
                emit(format_image_name(i, camera, k), i, camera, v, k, latent, rng)

    for d in range(cfg.num_distractors):
        rng = np.random.default_rng([cfg.seed, 11, d])
        latent = 0.8 * rng.standard_normal(dim) / np.sqrt(dim)
        v = int(rng.integers(0, cfg.num_views))
        camera = v * cfg.cams_per_view + int(rng.integers(0, cfg.cams_per_view))
        # distractors live under a single camera; filename id field is synthetic
        path = format_image_name(9000 + d, camera, 0)
        emit(path, -1, camera, v, 0, latent, rng)

    manifest = Manifest(
        records,
        name="synthetic",
        num_views=cfg.num_views,
        image_size=(cfg.image_h, cfg.image_w),
        root=str(out_dir),
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest, latents
