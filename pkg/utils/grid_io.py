"""
On-disk formats: .grd grids, text masks, measurements, prior containers and 16-bit PNG export.

.grd layout (little-endian):
    8-byte magic  b"GRDF64R\\0" (real) or b"GRDF64C\\0" (complex)
    u32 height, u32 width
    f64 payload, row-major; complex grids interleave (re, im) per entry
"""
import json
import math
import logging
import struct
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from diffusion.denoiser import GaussianPrior, GmmPrior
from mri.kspace import CartesianMask, Measurement

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)

MAGIC_REAL = b"GRDF64R\x00"
MAGIC_COMPLEX = b"GRDF64C\x00"
HEADER = struct.Struct("<8sII")
PNG_MAX = 65535


# -------------------------------------------------------------------
# .grd grids
# -------------------------------------------------------------------

def grid_to_bytes(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f".grd holds a single 2-D grid, got shape {grid.shape}")
    height, width = grid.shape
    if np.iscomplexobj(grid):
        payload = np.ascontiguousarray(grid, dtype="<c16").view("<f8")
        magic = MAGIC_COMPLEX
    else:
        payload = np.ascontiguousarray(grid, dtype="<f8")
        magic = MAGIC_REAL
    return HEADER.pack(magic, height, width) + payload.tobytes()


def grid_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < HEADER.size:
        raise ValueError(f"{source}: truncated .grd header ({len(data)} bytes)")
    magic, height, width = HEADER.unpack_from(data)
    if magic == MAGIC_REAL:
        count = height * width
    elif magic == MAGIC_COMPLEX:
        count = 2 * height * width
    else:
        raise ValueError(f"{source}: bad .grd magic {magic!r}")

    expected = HEADER.size + 8 * count
    if len(data) != expected:
        raise ValueError(f"{source}: .grd payload is {len(data) - HEADER.size} bytes, expected {8 * count}")

    values = np.frombuffer(data, dtype="<f8", count=count, offset=HEADER.size)
    if magic == MAGIC_COMPLEX:
        return values.view("<c16").reshape(height, width).astype(np.complex128)
    return values.reshape(height, width).astype(np.float64)


def save_grid(grid: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(grid_to_bytes(grid))
    logger.info(f"Saved {np.asarray(grid).shape} grid to {path}")
    return path


def load_grid(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        logger.error(f"Grid file not found at {path}")
        raise FileNotFoundError(path)
    return grid_from_bytes(path.read_bytes(), source=str(path))


# -------------------------------------------------------------------
# Masks and measurements
# -------------------------------------------------------------------

def mask_to_text(mask: CartesianMask) -> str:
    return "".join("1" if kept else "0" for kept in mask.kept) + "\n"


def mask_from_text(text: str, source: str = "<text>") -> CartesianMask:
    """
    Parse a single line of '0'/'1' characters, one per column. Nominal acceleration is
    not stored, so the loaded mask reports its actual acceleration as nominal.
    """
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if len(rows) != 1:
        raise ValueError(f"{source}: expected one mask line, found {len(rows)}")
    line = rows[0]
    if set(line) - {"0", "1"}:
        raise ValueError(f"{source}: mask line may only contain '0' and '1'")

    kept = np.array([c == "1" for c in line])
    n_kept = int(kept.sum())
    return CartesianMask(kept=kept, acceleration_nominal=kept.size / n_kept if n_kept else math.inf)


def save_mask(mask: CartesianMask, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(mask_to_text(mask), encoding="utf-8")
    logger.info(f"Saved mask ({mask.n_kept}/{mask.width} columns) to {path}")
    return path


def load_mask(path) -> CartesianMask:
    path = Path(path)
    return mask_from_text(path.read_text(encoding="utf-8"), source=str(path))


def save_measurement(y: Measurement, path) -> Path:
    """Complex .grd of the masked k-space, a sidecar .mask and a .json holding sigma_e."""
    path = save_grid(y.kspace, path)
    save_mask(y.mask, path.with_suffix(".mask"))
    path.with_suffix(".json").write_text(json.dumps({"sigma_e": y.sigma_e}), encoding="utf-8")
    return path


def load_measurement(path) -> Measurement:
    path = Path(path)
    kspace = load_grid(path)
    if not np.iscomplexobj(kspace):
        raise ValueError(f"{path}: measurement must be a complex .grd")
    mask_path = path.with_suffix(".mask")
    if not mask_path.exists():
        logger.error(f"Measurement sidecar mask not found at {mask_path}")
        raise FileNotFoundError(mask_path)
    meta_path = path.with_suffix(".json")
    sigma_e = 0.0
    if meta_path.exists():
        sigma_e = float(json.loads(meta_path.read_text(encoding="utf-8")).get("sigma_e", 0.0))
    else:
        logger.warning(f"No {meta_path.name} next to {path.name}; assuming noiseless measurement")
    return Measurement(kspace=kspace, mask=load_mask(mask_path), sigma_e=sigma_e)


# -------------------------------------------------------------------
# Priors
# -------------------------------------------------------------------

def save_prior(prior, path) -> Path:
    """
    Zip container of .grd members plus a small manifest.
    Gaussian: mu.grd, basis_XXX.grd (one per eigen-image), spectrum.grd = [lambda_1..lambda_r, floor].
    GMM: mean_XXX.grd per component, params.grd = rows (weight, variance).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        if isinstance(prior, GaussianPrior):
            archive.writestr("manifest.json", json.dumps({"kind": "gaussian", "rank": prior.rank}))
            archive.writestr("mu.grd", grid_to_bytes(prior.mu))
            for i, image in enumerate(prior.basis):
                archive.writestr(f"basis_{i:03d}.grd", grid_to_bytes(image))
            spectrum = np.concatenate((prior.eigvals, [prior.floor]))[None, :]
            archive.writestr("spectrum.grd", grid_to_bytes(spectrum))
        elif isinstance(prior, GmmPrior):
            archive.writestr("manifest.json", json.dumps({"kind": "gmm", "components": prior.K}))
            for k, mean in enumerate(prior.means):
                archive.writestr(f"mean_{k:03d}.grd", grid_to_bytes(mean))
            archive.writestr("params.grd", grid_to_bytes(np.stack((prior.weights, prior.variances), axis=1)))
        else:
            raise ValueError(f"Cannot serialize prior of type {type(prior).__name__}")
    logger.info(f"Saved {type(prior).__name__} to {path}")
    return path


def load_prior(path):
    path = Path(path)
    if not path.exists():
        logger.error(f"Prior file not found at {path}")
        raise FileNotFoundError(path)
    try:
        archive = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise ValueError(f"{path}: not a prior container ({e})") from e

    with archive:
        manifest = json.loads(archive.read("manifest.json"))

        def member(name):
            return grid_from_bytes(archive.read(name), source=f"{path}:{name}")

        if manifest["kind"] == "gaussian":
            rank = int(manifest["rank"])
            mu = member("mu.grd")
            basis = np.stack([member(f"basis_{i:03d}.grd") for i in range(rank)]) if rank else np.zeros((0,) + mu.shape)
            spectrum = member("spectrum.grd")[0]
            return GaussianPrior(mu=mu, basis=basis, eigvals=spectrum[:-1].copy(), floor=float(spectrum[-1]))
        if manifest["kind"] == "gmm":
            K = int(manifest["components"])
            params = member("params.grd")
            means = np.stack([member(f"mean_{k:03d}.grd") for k in range(K)])
            return GmmPrior(weights=params[:, 0].copy(), means=means, variances=params[:, 1].copy())
        raise ValueError(f"{path}: unknown prior kind '{manifest['kind']}'")


# -------------------------------------------------------------------
# Images
# -------------------------------------------------------------------

def save_png16(image: np.ndarray, path, data_range: float = 1.0) -> Path:
    """Clip to [0, data_range] and store as 16-bit grayscale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.clip(np.asarray(image, dtype=np.float64) / data_range, 0.0, 1.0)
    pixels = np.round(scaled * PNG_MAX).astype(np.uint16)
    Image.fromarray(pixels).save(path, format="PNG")
    logger.info(f"Saved 16-bit PNG {pixels.shape} to {path}")
    return path


def load_png(path, data_range: float = 1.0) -> np.ndarray:
    with Image.open(path) as img:
        pixels = np.asarray(img)
    peak = 255 if pixels.dtype == np.uint8 else PNG_MAX
    return pixels.astype(np.float64) / peak * data_range


def save_image(image: np.ndarray, path) -> Path:
    """Dispatch on suffix: .png -> 16-bit PNG, anything else -> .grd."""
    if Path(path).suffix.lower() == ".png":
        return save_png16(image, path)
    return save_grid(image, path)


def load_image(path) -> np.ndarray:
    if Path(path).suffix.lower() == ".png":
        return load_png(path)
    grid = load_grid(path)
    if np.iscomplexobj(grid):
        raise ValueError(f"{path}: expected a real image grid")
    return grid

