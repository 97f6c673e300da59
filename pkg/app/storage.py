import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, Union

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.errors import FormatError, MissingInputError
from app.models import MappingTable, ModelParams, Precision
from app.schemas import ArtifactManifest

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"HTEN"
TABLE_MAGIC = b"HMAP"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


@retry(
    retry=retry_if_exception_type(PermissionError),
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.05, min=0.05, max=1),
    reraise=True,
)
def _replace(src: str, dst: Path) -> None:
    os.replace(src, dst)


def _current_umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def write_atomic(path: PathLike, data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        # mkstemp creates 0600; give the result the mode a plain open() would
        os.chmod(tmp, 0o666 & ~_current_umask())
        _replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_input(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"file not found: {path}")
    return path.read_bytes()


def sha256_file(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# Tensors ("HTEN")

def encode_tensor(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if arr.dtype == np.float32:
        precision = Precision.SINGLE
    elif arr.dtype == np.float64:
        precision = Precision.DOUBLE
    else:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", precision.itemsize)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise FormatError("not an HTEN tensor (bad magic)")
    try:
        version, rank = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported HTEN version {version}")
        dims = struct.unpack_from(f"<{rank}I", data, 12)
        offset = 12 + 4 * rank
        (itemsize,) = struct.unpack_from("<B", data, offset)
    except struct.error as e:
        raise FormatError(f"truncated HTEN header: {e}") from e
    offset += 1
    if itemsize == 4:
        dtype = np.dtype("<f4")
    elif itemsize == 8:
        dtype = np.dtype("<f8")
    else:
        raise FormatError(f"unsupported HTEN precision byte {itemsize}")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + count * itemsize
    if len(data) != expected:
        raise FormatError(f"HTEN payload has {len(data) - offset} bytes, expected {count * itemsize}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def save_tensor(path: PathLike, tensor: np.ndarray) -> Path:
    return write_atomic(path, encode_tensor(tensor))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(_read_input(path))


# Mapping tables ("HMAP")

def encode_table(table: MappingTable) -> bytes:
    x, y, z = table.dims
    hf, wf = table.feature_dims
    header = TABLE_MAGIC + struct.pack("<6I", FORMAT_VERSION, x, y, z, hf, wf)
    return header + np.ascontiguousarray(table.entries, dtype="<i4").tobytes()


def decode_table(data: bytes) -> MappingTable:
    if data[:4] != TABLE_MAGIC:
        raise FormatError("not an HMAP mapping table (bad magic)")
    try:
        version, x, y, z, hf, wf = struct.unpack_from("<6I", data, 4)
    except struct.error as e:
        raise FormatError(f"truncated HMAP header: {e}") from e
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported HMAP version {version}")
    count = x * y * z
    offset = 4 + 24
    if len(data) != offset + count * 8:
        raise FormatError(f"HMAP payload size mismatch for dims {(x, y, z)}")
    entries = np.frombuffer(data, dtype="<i4", count=count * 2, offset=offset)
    entries = entries.astype(np.int32).reshape(count, 2)
    try:
        return MappingTable(dims=(x, y, z), feature_dims=(hf, wf), entries=entries)
    except ValueError as e:
        raise FormatError(f"invalid HMAP entries: {e}") from e


def save_table(path: PathLike, table: MappingTable) -> Path:
    return write_atomic(path, encode_table(table))


def load_table(path: PathLike) -> MappingTable:
    return decode_table(_read_input(path))


# Output manifests and parameter bundles

def write_manifest(
    out_dir: PathLike, command: str, seed: int, config: Dict, artifacts: Iterable[Path]
) -> Path:
    out_dir = Path(out_dir)
    digests = {p.name: sha256_file(p) for p in sorted(artifacts, key=lambda p: p.name)}
    manifest = ArtifactManifest(command=command, seed=seed, config=config, artifacts=digests)
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
    return write_atomic(out_dir / "manifest.json", text.encode("utf-8"))


def save_param_bundle(bundle_dir: PathLike, params: ModelParams, seed: int) -> Path:
    bundle_dir = Path(bundle_dir)
    entries = {}
    for name, arr in params.named_arrays().items():
        file_name = f"{name}.hten"
        save_tensor(bundle_dir / file_name, arr)
        entries[name] = {"file": file_name, "shape": list(arr.shape)}
    manifest = {"seed": seed, "params": entries}
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    write_atomic(bundle_dir / "manifest.json", text.encode("utf-8"))
    logger.info(f"Saved {len(entries)} parameters to {bundle_dir}")
    return bundle_dir


def load_param_bundle(bundle_dir: PathLike) -> ModelParams:
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingInputError(f"parameter bundle manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest["params"]
    except (json.JSONDecodeError, KeyError) as e:
        raise FormatError(f"invalid parameter bundle manifest {manifest_path}: {e}") from e
    arrays = {}
    for name, entry in entries.items():
        arr = load_tensor(bundle_dir / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(
                f"parameter {name} has shape {list(arr.shape)}, manifest says {entry['shape']}"
            )
        arrays[name] = arr
    try:
        return ModelParams.from_named_arrays(arrays)
    except KeyError as e:
        raise FormatError(f"parameter bundle {bundle_dir} is missing {e}") from e
