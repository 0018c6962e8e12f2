"""Synthetic product scenes, PPM/PGM codecs and JSON-Lines manifests.

A scene holds one target object and zero or more distractors, each a
coloured disc, square, triangle or ring on a textured background.  The
title names the target's colour, shape and size and mixes in shop noise
(promotional words, model numbers) with no visual counterpart.  Every
distractor differs from the target in colour, so the colour word alone
identifies the target.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

COLORS = {
    "红色": (0.86, 0.16, 0.14),   # red
    "绿色": (0.16, 0.70, 0.22),   # green
    "蓝色": (0.14, 0.30, 0.88),   # blue
    "黄色": (0.92, 0.84, 0.12),   # yellow
    "紫色": (0.58, 0.20, 0.76),   # purple
    "青色": (0.10, 0.76, 0.80),   # cyan
}
SHAPES = {"圆盘": "disc", "方块": "square", "三角": "triangle", "圆环": "ring"}
SIZES = {"小号": (5.0, 7.0), "中号": (8.0, 10.0), "大号": (11.0, 13.0)}   # radius in px at 64 px
NOISE_WORDS = ("正品", "包邮", "新款", "热卖", "官方", "旗舰", "特价", "现货")
_CODE_LETTERS = "ABCDEFGHKMNPRSTXZ"

ATTRIBUTE_QUERIES = ("color", "shape", "size")
DIFFICULTY = {            # distractor count ranges (inclusive): train, test
    "easy": ((0, 1), (1, 1)),
    "normal": ((0, 2), (1, 2)),
    "hard": ((2, 3), (2, 3)),
}


class GenerationError(RuntimeError):
    pass


def lexicon_words() -> list[str]:
    return list(COLORS) + list(SHAPES) + list(SIZES) + list(NOISE_WORDS)


def attribute_values() -> tuple[str, ...]:
    return tuple(COLORS) + tuple(SHAPES) + tuple(SIZES)


def categories() -> tuple[str, ...]:
    return tuple(SHAPES.values())


@dataclass
class ObjectSpec:
    shape: str        # lexicon word, key of SHAPES
    color: str        # key of COLORS
    size: str         # key of SIZES
    cx: float
    cy: float
    radius: float


@dataclass
class SceneSpec:
    target: ObjectSpec
    distractors: list[ObjectSpec] = field(default_factory=list)
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    gradient: tuple[float, float] = (0.0, 0.0)
    noise_tokens: list[str] = field(default_factory=list)
    size: int = 64


@dataclass
class SampleRecord:
    image: np.ndarray                  # [H, W, 3] in [0, 1]
    mask: np.ndarray                   # [H, W] uint8 in {0, 1}
    title: str
    meta: dict = field(default_factory=dict)


def shape_mask(obj: ObjectSpec, size: int) -> np.ndarray:
    """Rasterise ``obj`` on a ``size x size`` grid, sampling pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - obj.cx, ys - obj.cy
    r = obj.radius
    kind = SHAPES[obj.shape]
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "square":
        half = 0.85 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        # apex up, inscribed in the circle of radius r
        (ax, ay), (bx, by), (qx, qy) = triangle_vertices(obj)
        def side(px, py, x0, y0, x1, y1):
            return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        d1 = side(xs, ys, ax, ay, bx, by)
        d2 = side(xs, ys, bx, by, qx, qy)
        d3 = side(xs, ys, qx, qy, ax, ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise ValueError(f"unknown shape {obj.shape!r}")


def triangle_vertices(obj: ObjectSpec) -> list[tuple[float, float]]:
    r, s = obj.radius, np.sqrt(3.0) / 2.0
    return [(obj.cx, obj.cy - r), (obj.cx - r * s, obj.cy + r / 2), (obj.cx + r * s, obj.cy + r / 2)]


def _random_object(rng: np.random.Generator, size: int, color: str | None = None,
                   exclude_colors: Sequence[str] = ()) -> ObjectSpec:
    shape = list(SHAPES)[rng.integers(len(SHAPES))]
    if color is None:
        choices = [c for c in COLORS if c not in exclude_colors]
        color = choices[rng.integers(len(choices))]
    size_word = list(SIZES)[rng.integers(len(SIZES))]
    lo, hi = SIZES[size_word]
    radius = rng.uniform(lo, hi) * size / 64.0
    margin = radius + 1.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return ObjectSpec(shape, color, size_word, float(cx), float(cy), float(radius))


def _model_number(rng: np.random.Generator) -> str:
    letters = "".join(rng.choice(list(_CODE_LETTERS), size=int(rng.integers(1, 3))))
    return letters + str(int(rng.integers(1, 100)))


def random_scene(rng: np.random.Generator, n_distractors: int, size: int = 64,
                 max_tries: int = 200) -> SceneSpec:
    """Place a target and ``n_distractors`` non-overlapping objects of other colours."""
    for _ in range(max_tries):
        target = _random_object(rng, size)
        placed = [target]
        others: list[ObjectSpec] = []
        ok = True
        for _ in range(n_distractors):
            for _ in range(max_tries):
                cand = _random_object(rng, size, exclude_colors=[target.color])
                if all(np.hypot(cand.cx - o.cx, cand.cy - o.cy) > cand.radius + o.radius + 1.5 for o in placed):
                    placed.append(cand)
                    others.append(cand)
                    break
            else:
                ok = False
                break
        if ok:
            base = rng.uniform(0.35, 0.65)
            tint = rng.uniform(-0.05, 0.05, size=3)
            background = tuple(float(v) for v in np.clip(base + tint, 0, 1))
            gradient = tuple(float(v) for v in rng.uniform(-0.12, 0.12, size=2))
            noise = [NOISE_WORDS[rng.integers(len(NOISE_WORDS))], _model_number(rng)]
            return SceneSpec(target, others, background, gradient, noise, size)
    raise GenerationError(f"could not place {n_distractors} distractors on a {size}px canvas")


def make_title(spec: SceneSpec) -> str:
    """Colour word first, then shape, a promotional word, size and a model number.

    The order is fixed: the token-to-channel map of the fusion is indexed by
    title position, so the colour word must sit at a stable position.
    """
    t = spec.target
    promo, code = (spec.noise_tokens + ["", ""])[:2]
    return f"{t.color}{t.shape} {promo} {t.size} {code}".strip()


def generate_sample(spec: SceneSpec, rng: np.random.Generator, size: int | None = None,
                    title: str | None = None) -> SampleRecord:
    """Render ``spec``; the mask is the target minus anything drawn over it."""
    size = size or spec.size
    if size != spec.size:
        raise ValueError(f"scene laid out for {spec.size}px, asked to render {size}px")
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size - 0.5
    bg = np.array(spec.background)[None, None, :] + (spec.gradient[0] * xs + spec.gradient[1] * ys)[..., None]
    img = bg + rng.normal(0.0, 0.03, size=(size, size, 3))
    target = shape_mask(spec.target, size)
    img[target] = np.array(COLORS[spec.target.color]) + rng.normal(0.0, 0.02, size=(int(target.sum()), 3))
    mask = target.copy()
    for obj in spec.distractors:
        m = shape_mask(obj, size)
        img[m] = np.array(COLORS[obj.color]) + rng.normal(0.0, 0.02, size=(int(m.sum()), 3))
        mask &= ~m
    if not mask.any():
        raise GenerationError("target fully occluded")
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    meta = {
        "category": SHAPES[spec.target.shape],
        "attributes": {"color": spec.target.color, "shape": spec.target.shape, "size": spec.target.size},
        "n_distractors": len(spec.distractors),
    }
    return SampleRecord(img, mask.astype(np.uint8), make_title(spec) if title is None else title, meta)


def sample_from_seed(seed_seq: np.random.SeedSequence, n_distractors: int, size: int,
                     max_retries: int = 10) -> SampleRecord:
    rng = np.random.default_rng(seed_seq)
    for _ in range(max_retries):
        spec = random_scene(rng, n_distractors, size)
        try:
            return generate_sample(spec, rng, size)
        except GenerationError:
            continue
    raise GenerationError("target occluded after repeated retries")


# ----------------------------------------------------------------------
# image codecs


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm_gray(path, values: np.ndarray) -> None:
    """Write an arbitrary ``[H, W]`` map min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    arr = np.zeros_like(v) if span == 0 else (v - v.min()) / span
    arr = np.round(arr * 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError(f"{path}: truncated header")
        fields.append(raw[i:j])
        i = j
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise ValueError(f"{path}: unsupported header (w={w}, h={h}, maxval={maxval})")
    data = np.frombuffer(raw[i + 1:], dtype=np.uint8)
    return data, w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    if data.size < w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data[:w * h * 3].reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    if data.size < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data[:w * h].reshape(h, w)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    mh = _resize_matrix(image.shape[0], size)
    mw = _resize_matrix(image.shape[1], size)
    return np.einsum("ia,jb,abc->ijc", mh, mw, image, optimize=True)


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


# ----------------------------------------------------------------------
# manifests


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MQNET_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Manifest:
    path: Path
    records: list[dict]

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r["split"]] = out.get(r["split"], 0) + 1
        return out


def split_sizes(n: int) -> tuple[int, int]:
    """5:1 train/test split."""
    n_train = int(round(n * 5 / 6))
    return n_train, n - n_train


def generate_split(n: int, out_dir, difficulty: str = "normal", seed: int = 0, size: int = 64) -> Manifest:
    """Write ``n`` samples (5:1 train/test) plus ``manifest.jsonl`` and ``corpus.jsonl``.

    Sample ``i`` of split ``s`` is drawn from ``SeedSequence([seed, s, i])``,
    so the two splits never share a generator stream.
    """
    if difficulty not in DIFFICULTY:
        raise ValueError(f"unknown difficulty {difficulty!r}; choose from {sorted(DIFFICULTY)}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_train, n_test = split_sizes(n)
    jobs = []
    for split_id, (split, count) in enumerate((("train", n_train), ("test", n_test))):
        lo, hi = DIFFICULTY[difficulty][split_id]
        for i in range(count):
            ss = np.random.SeedSequence([seed, split_id, i])
            k = int(np.random.default_rng(np.random.SeedSequence([seed, split_id, i, 1])).integers(lo, hi + 1))
            jobs.append((split, i, ss, k))

    def work(job):
        split, i, ss, k = job
        rec = sample_from_seed(ss, k, size)
        stem = f"{split}_{i:05d}"
        write_ppm(out / "images" / f"{stem}.ppm", rec.image)
        write_pgm(out / "masks" / f"{stem}.pgm", rec.mask)
        return {"image": f"images/{stem}.ppm", "mask": f"masks/{stem}.pgm", "title": rec.title,
                "split": split, **rec.meta}

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        records = list(pool.map(work, jobs))
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            if r["split"] == "train":
                fh.write(json.dumps({"title": r["title"], "attributes": r["attributes"],
                                     "category": r["category"]}, ensure_ascii=False) + "\n")
    return Manifest(manifest_path, records)


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            for key in ("image", "mask", "title", "split"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            if rec["split"] not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be train or test")
            records.append(rec)
    return Manifest(path, records)


def load_record(rec: dict, root: Path, size: int | None = None) -> SampleRecord:
    image_path, mask_path = root / rec["image"], root / rec["mask"]
    for p in (image_path, mask_path):
        if not p.exists():
            raise FileNotFoundError(p)
    image = read_ppm(image_path)
    mask = (read_pgm(mask_path) >= 128).astype(np.uint8)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"{rec['image']}: image {image.shape[:2]} and mask {mask.shape} differ")
    if size is not None and image.shape[:2] != (size, size):
        image = resize_bilinear(image, size)
        mask = resize_nearest(mask, size)
        if not mask.any():
            raise ValueError(f"{rec['mask']}: foreground vanished when resizing to {size}px")
    meta = {k: v for k, v in rec.items() if k not in ("image", "mask", "title")}
    return SampleRecord(image, mask, rec.get("title") or "", meta)


def load_manifest(path, size: int | None = None, split: str | None = None) -> Iterator[SampleRecord]:
    """Decode records in manifest order (parallel when ``MQNET_THREADS`` > 1)."""
    manifest = read_manifest(path)
    root = Path(path).parent
    recs = manifest.records if split is None else manifest.split(split)
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        yield from pool.map(lambda r: load_record(r, root, size), recs)
