"""Dataset ingestion, synthetic data generation, checkpoint persistence.

File formats
------------
* Images: PNG / PGM / PPM (anything Pillow decodes), resized bilinearly.
* Fixations: CSV with one "x,y" per line, 0-indexed, in original image
  coordinates.
* Manifest: one "image<TAB>fixations" path pair per line, relative paths
  resolved against the manifest's directory.
* Checkpoint: magic "BVAP1", u32 version, u32 entry count, then per
  entry u32 name length + UTF-8 name, u8 dtype code (0 = float64),
  u8 rank, u32 dims, raw little-endian values. Optimizer accumulators
  are stored as extra entries suffixed "#sq" / "#mom" so a reloaded
  store resumes training bit-exactly.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from gazemap.autodiff import ParamStore, Tensor, constant, parameter
from gazemap.head import AttentionMap
from gazemap.metrics import FixationSet, density_from_fixations

__all__ = ["SampleRecord", "load_image_tensor", "save_gray_png", "read_fixation_csv",
           "load_sample", "synth_dataset", "write_dataset", "read_manifest",
           "save_checkpoint", "read_checkpoint_entries", "load_checkpoint",
           "load_checkpoint_into", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"BVAP1"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 0


@dataclass
class SampleRecord:
    """One stimulus: image in [0,1], fixation points, normalized density map."""

    image: Tensor                 # (1, 3, S, S)
    fixations: FixationSet
    density: AttentionMap         # normalized
    image_id: str = ""
    clamped_fixations: int = 0

    @property
    def size(self) -> int:
        return self.image.dims[2]


# ---------------------------------------------------------------------------
# images and fixations
# ---------------------------------------------------------------------------

def load_image_tensor(path, size: int) -> tuple[Tensor, tuple[int, int]]:
    """Decode, bilinearly resize to size x size, scale to [0,1].

    Returns the (1,3,S,S) tensor and the original (width, height).
    """
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        orig = rgb.size
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    if orig != (size, size):
        chans = []
        for c in range(3):
            plane = Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
            chans.append(np.asarray(plane.resize((size, size), Image.BILINEAR),
                                    dtype=np.float64))
        arr = np.stack(chans, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return constant(arr[None]), orig


def save_gray_png(path, arr: np.ndarray) -> None:
    """Write a 2-D map as grayscale PNG scaled so the maximum is 255."""
    a = np.asarray(arr, dtype=np.float64)
    peak = a.max()
    scaled = a * (255.0 / peak) if peak > 0 else np.zeros_like(a)
    Image.fromarray(np.clip(np.rint(scaled), 0, 255).astype(np.uint8), mode="L").save(path)


def read_fixation_csv(path) -> list[tuple[int, int]]:
    points = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'x,y', got {line!r}")
        try:
            points.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: non-integer coordinate in {line!r}") from exc
    return points


def load_sample(image_path, fixation_path, size: int,
                sigma: float | None = None) -> SampleRecord:
    """Image + fixations + derived density, with coordinates rescaled to map space."""
    image, (w0, h0) = load_image_tensor(image_path, size)
    raw_points = read_fixation_csv(fixation_path)
    points = []
    clamped = 0
    for x, y in raw_points:
        sx = int(round(x * size / w0))
        sy = int(round(y * size / h0))
        cx, cy = min(max(sx, 0), size - 1), min(max(sy, 0), size - 1)
        if (cx, cy) != (sx, sy):
            clamped += 1
        points.append((cx, cy))
    if clamped:
        warnings.warn(f"{fixation_path}: clamped {clamped} out-of-bounds fixations")
    fix = FixationSet(points, image_id=Path(image_path).stem)
    dens = density_from_fixations(fix, size, sigma)
    record = SampleRecord(image=image, fixations=fix,
                          density=AttentionMap(constant(dens[None, None]), normalized=True),
                          image_id=fix.image_id, clamped_fixations=clamped)
    return record


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(n: int, size: int, seed: int,
                  sigma: float | None = None) -> list[SampleRecord]:
    """High-contrast patch stimuli with fixations clustered on the patch.

    Each image is a mid-gray background with one rectangle or disk whose
    intensity differs from the background by at least 0.4; 15 fixations
    are drawn from a Gaussian at the patch centre (std = radius / 2) and
    never land further than 3 radii away.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(n):
        img = np.full((3, size, size), 0.5)
        radius = rng.uniform(max(3.0, 0.08 * size), 0.18 * size)
        cx = rng.uniform(radius, size - 1 - radius)
        cy = rng.uniform(radius, size - 1 - radius)
        if rng.random() < 0.5:
            color = rng.uniform(0.0, 0.1, size=3)    # dark patch
        else:
            color = rng.uniform(0.9, 1.0, size=3)    # bright patch
        yy, xx = np.mgrid[0:size, 0:size]
        if rng.random() < 0.5:
            half_w = radius * rng.uniform(0.7, 1.0)
            half_h = radius * rng.uniform(0.7, 1.0)
            mask = (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= half_h)
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        for c in range(3):
            img[c][mask] = color[c]

        points = []
        while len(points) < 15:
            dx, dy = rng.normal(0.0, radius / 2.0, size=2)
            if np.hypot(dx, dy) > 3.0 * radius:
                continue
            px = min(max(int(round(cx + dx)), 0), size - 1)
            py = min(max(int(round(cy + dy)), 0), size - 1)
            points.append((px, py))
        fix = FixationSet(points, image_id=f"synth{idx:04d}")
        dens = density_from_fixations(fix, size, sigma)
        records.append(SampleRecord(
            image=constant(img[None]), fixations=fix,
            density=AttentionMap(constant(dens[None, None]), normalized=True),
            image_id=fix.image_id))
    return records


def write_dataset(out_dir, records: list[SampleRecord]) -> Path:
    """Materialize records as PNGs + fixation CSVs and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        img8 = np.clip(np.rint(rec.image.values[0].transpose(1, 2, 0) * 255), 0, 255)
        img_name = f"{rec.image_id}.png"
        fix_name = f"{rec.image_id}.csv"
        Image.fromarray(img8.astype(np.uint8), mode="RGB").save(out_dir / img_name)
        (out_dir / fix_name).write_text(
            "".join(f"{x},{y}\n" for x, y in rec.fixations.points))
        lines.append(f"{img_name}\t{fix_name}\n")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    pairs = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'image<TAB>fixations', got {line!r}")
        pairs.append((path.parent / parts[0], path.parent / parts[1]))
    if not pairs:
        raise ValueError(f"manifest {path} lists no samples")
    return pairs


def load_manifest_samples(path, size: int, sigma: float | None = None) -> list[SampleRecord]:
    return [load_sample(img, fix, size, sigma) for img, fix in read_manifest(path)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(store: ParamStore, path) -> Path:
    """Serialize parameters and optimizer accumulators.

    All-zero accumulators (an untrained store) are omitted; the loader
    defaults missing state to zeros, so the round trip stays exact.
    """
    path = Path(path)
    entries: list[tuple[str, np.ndarray]] = []
    for name, tensor in store.items():
        state = store.opt_state[name]
        entries.append((name, tensor.values))
        if state["sq"].any():
            entries.append((name + "#sq", state["sq"]))
        if state["mom"].any():
            entries.append((name + "#mom", state["mom"]))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)
    return path


def read_checkpoint_entries(path) -> dict[str, np.ndarray]:
    """Raw name -> array mapping, in file order; validates the envelope."""
    blob = Path(path).read_bytes()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:5]!r}")
    off = 5
    try:
        version, count = struct.unpack_from("<II", blob, off)
        off += 8
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            if len(blob) < off + name_len:
                raise ValueError(f"{path}: truncated checkpoint")
            off += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            if dtype_code != _DTYPE_F64:
                raise ValueError(f"{path}: unknown dtype code {dtype_code} for {name!r}")
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            if len(blob) < off + nbytes:
                raise ValueError(f"{path}: truncated checkpoint in entry {name!r}")
            arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(dims)
            off += nbytes
            if name in entries:
                raise ValueError(f"{path}: duplicate checkpoint entry {name!r}")
            entries[name] = arr.astype(np.float64)
        if off != len(blob):
            raise ValueError(f"{path}: {len(blob) - off} trailing bytes after entries")
        return entries
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc


def load_checkpoint(path) -> ParamStore:
    """Rebuild a fresh ParamStore (values + optimizer state) from a file."""
    entries = read_checkpoint_entries(path)
    store = ParamStore()
    for name, arr in entries.items():
        if "#" in name:
            continue
        store.add(name, parameter(arr.copy()))
        for suffix, key in (("#sq", "sq"), ("#mom", "mom")):
            if name + suffix in entries:
                store.opt_state[name][key] = entries[name + suffix].copy()
    return store


def load_checkpoint_into(store: ParamStore, path) -> None:
    """Restore a live store; names and shapes must match exactly."""
    entries = read_checkpoint_entries(path)
    param_names = set(store.names())
    file_params = {n for n in entries if "#" not in n}
    missing = sorted(param_names - file_params)
    unexpected = sorted(file_params - param_names)
    if missing or unexpected:
        raise ValueError(
            f"{path}: checkpoint does not match model (missing {missing[:5]}, "
            f"unexpected {unexpected[:5]})")
    bad = [n for n in file_params if entries[n].shape != store[n].dims]
    if bad:
        raise ValueError(f"{path}: shape mismatch for {bad[:5]}")
    for name in file_params:
        store[name].values[:] = entries[name]
        for suffix, key in (("#sq", "sq"), ("#mom", "mom")):
            if name + suffix in entries:
                store.opt_state[name][key][:] = entries[name + suffix]
