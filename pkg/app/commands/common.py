import json
from pathlib import Path
from typing import Any, List, Tuple

from pydantic import BaseModel

from app.errors import ConfigurationError
from app.storage import write_atomic


def parse_sizes(text: str) -> List[Tuple[int, int, int]]:
    """Parse "4x4x4,8x8x4" into [(4, 4, 4), (8, 8, 4)]"""
    sizes = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.lower().split("x")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigurationError(f"invalid grid size {item!r}; expected XxYxZ") from None
        if len(dims) != 3 or min(dims) <= 0:
            raise ConfigurationError(f"invalid grid size {item!r}; expected XxYxZ")
        sizes.append(dims)
    if not sizes:
        raise ConfigurationError("no grid sizes given")
    return sizes


def output_dir(args) -> Path:
    return Path(args.out)


def write_json(path: Path, payload: Any) -> Path:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    return write_atomic(path, text.encode("utf-8"))
