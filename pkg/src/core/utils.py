# utils.py
import hashlib

from pydantic import BaseModel, ConfigDict


def kebab(name: str) -> str:
    """Field alias used by every config model: ``gfs_latency_sec`` -> ``gfs-latency-sec``."""
    return name.replace("_", "-")


class SpecModel(BaseModel):
    """Frozen pydantic base with kebab-case aliases, shared by all config sections."""

    model_config = ConfigDict(
        alias_generator=kebab,
        populate_by_name=True,
        extra="forbid",
        frozen=True,
    )


def stable_hash(text: str) -> int:
    """64-bit hash that is identical across processes and platforms (unlike ``hash``)."""
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def fmt_bytes(size: float) -> str:
    """Human-readable byte count for log lines."""
    for unit in ["B", "KB", "MB", "GB", "TB"]:
        if abs(size) < 1000 or unit == "TB":
            return f"{size:.0f} {unit}" if unit == "B" else f"{size:.1f} {unit}"
        size /= 1000
    return f"{size} B"


def parse_kv(items) -> dict:
    """Parse ``["n=10", "fanout=2"]`` into ``{"n": 10, "fanout": 2}`` with int/float coercion."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip().replace("-", "_")] = coerce(raw.strip())
    return out


def coerce(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in {"true", "false"}:
        return raw.lower() == "true"
    return raw
