"""Binary matrix files, deterministic CSV emission, and model persistence.

Matrix files carry the magic "EVFM1", a little-endian header
(u32 rows, u32 cols, u8 dtype code; 8 = float64) and the row-major
float64 payload.  An optional text sidecar (<name>.meta) records scalar
metadata and one parameter tag per row.  Every writer here is a pure
function of its inputs so reruns produce byte-identical files.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .manifold import DMapModel, GHLifter, KnnLifter

__all__ = [
    "MAGIC",
    "write_matrix",
    "read_matrix",
    "write_dataset",
    "read_dataset",
    "write_csv",
    "save_dmap_model",
    "load_dmap_model",
    "save_gh_lifter",
    "load_gh_lifter",
    "save_knn_lifter",
    "load_knn_lifter",
]

MAGIC = b"EVFM1"
_DTYPE_F64 = 8
_HEADER = struct.Struct("<IIB")


def write_matrix(path, arr: np.ndarray) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if arr.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    rows, cols = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(rows, cols, _DTYPE_F64))
        fh.write(payload)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        rows, cols, code = _HEADER.unpack(fh.read(_HEADER.size))
        if code != _DTYPE_F64:
            raise ValueError(f"{path}: unsupported dtype code {code}")
        payload = fh.read(rows * cols * 8)
        if len(payload) != rows * cols * 8:
            raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_dataset(path, dataset: Dataset, header_meta: dict | None = None) -> None:
    """Matrix file plus a .meta sidecar with per-row parameter tags."""
    write_matrix(path, dataset.X)
    lines = []
    for key, val in (header_meta or {}).items():
        lines.append(f"# {key}={_fmt(val)}")
    lines.append(dataset.tag_name)
    lines.extend(_fmt(t) for t in dataset.tags)
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    X = read_matrix(path)
    meta = Path(str(path) + ".meta")
    if not meta.exists():
        return Dataset(X)
    lines = [ln for ln in meta.read_text().splitlines() if not ln.startswith("#")]
    tag_name = lines[0]
    tags = np.array([float(v) for v in lines[1:]])
    return Dataset(X, tags, tag_name)


def write_csv(path, header: list, rows, comment: str | None = None) -> None:
    """Comma-separated values with LF endings and shortest-roundtrip floats."""
    lines = []
    if comment:
        lines.append("# " + comment)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# Model persistence: a directory of matrix files plus a JSON manifest.
# ---------------------------------------------------------------------------

def save_dmap_model(dirpath, model: DMapModel) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "train_X.evfm", model.train_X)
    write_matrix(d / "degrees.evfm", model.degrees[None, :])
    write_matrix(d / "eigenvalues.evfm", model.eigenvalues[None, :])
    write_matrix(d / "eigenvectors.evfm", model.eigenvectors)
    manifest = {"kind": "dmap_model", "epsilon": model.epsilon}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_dmap_model(dirpath) -> DMapModel:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("kind") != "dmap_model":
        raise ValueError(f"{dirpath} does not hold a diffusion-map model")
    return DMapModel(
        epsilon=float(manifest["epsilon"]),
        train_X=read_matrix(d / "train_X.evfm"),
        degrees=read_matrix(d / "degrees.evfm")[0],
        eigenvalues=read_matrix(d / "eigenvalues.evfm")[0],
        eigenvectors=read_matrix(d / "eigenvectors.evfm"),
    )


def save_gh_lifter(dirpath, lifter: GHLifter) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "basis_eigenvalues.evfm", lifter.basis_eigenvalues[None, :])
    write_matrix(d / "basis_eigenvectors.evfm", lifter.basis_eigenvectors)
    write_matrix(d / "projection.evfm", lifter.projection)
    write_matrix(d / "train_Y.evfm", lifter.train_Y)
    write_matrix(d / "train_X.evfm", lifter.train_X)
    manifest = {"kind": "gh_lifter", "eps_tilde": lifter.eps_tilde, "delta": lifter.delta}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_gh_lifter(dirpath) -> GHLifter:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("kind") != "gh_lifter":
        raise ValueError(f"{dirpath} does not hold a GH lifter")
    return GHLifter(
        eps_tilde=float(manifest["eps_tilde"]),
        delta=float(manifest["delta"]),
        basis_eigenvalues=read_matrix(d / "basis_eigenvalues.evfm")[0],
        basis_eigenvectors=read_matrix(d / "basis_eigenvectors.evfm"),
        projection=read_matrix(d / "projection.evfm"),
        train_Y=read_matrix(d / "train_Y.evfm"),
        train_X=read_matrix(d / "train_X.evfm"),
    )


def save_knn_lifter(dirpath, lifter: KnnLifter) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "train_Y.evfm", lifter.train_Y)
    write_matrix(d / "train_X.evfm", lifter.train_X)
    manifest = {"kind": "knn_lifter", "k": lifter.k}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_knn_lifter(dirpath) -> KnnLifter:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("kind") != "knn_lifter":
        raise ValueError(f"{dirpath} does not hold a k-NN lifter")
    return KnnLifter(
        k=int(manifest["k"]),
        train_Y=read_matrix(d / "train_Y.evfm"),
        train_X=read_matrix(d / "train_X.evfm"),
    )
