"""
Run manifests.

A manifest records what a command read and wrote: the configuration hash,
the tool version, a SHA-256 digest per input file, wall-clock start and
end, and the list of output files. It is a canonical CBOR map written
atomically next to the outputs.
"""

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import cbor2

from pynn4dvar.exceptions import DataError, SerializationError
from pynn4dvar.serialization import atomic_write, file_digest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.cbor"
_KEYS = ("config_sha256", "tool_version", "inputs", "started", "finished", "outputs")


def tool_version() -> str:
    try:
        return version("PyNN4DVar")
    except PackageNotFoundError:
        from pynn4dvar import __version__
        return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class Manifest:
    config_sha256: str
    tool_version: str = field(default_factory=tool_version)
    inputs: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def add_input(self, path: str | Path) -> None:
        path = Path(path)
        if not path.exists():
            raise DataError("Input file not found", str(path))
        self.inputs[path.name] = file_digest(path)

    def add_output(self, path: str | Path) -> None:
        name = Path(path).name
        if name not in self.outputs:
            self.outputs.append(name)

    def to_bytes(self) -> bytes:
        data = asdict(self)
        data["outputs"] = sorted(data["outputs"])
        return cbor2.dumps(data, canonical=True)

    @classmethod
    def from_bytes(cls, blob: bytes, source: str | None = None) -> "Manifest":
        try:
            data = cbor2.loads(blob)
        except cbor2.CBORDecodeError as e:
            raise SerializationError(f"Manifest is not valid CBOR: {e}", source)
        if not isinstance(data, dict) or sorted(data) != sorted(_KEYS):
            raise SerializationError("Manifest keys do not match", source)
        return cls(**data)

    def write(self, directory: str | Path) -> Path:
        """Stamp the finish time and write the manifest atomically."""
        self.finished = _now()
        path = atomic_write(Path(directory) / MANIFEST_NAME, self.to_bytes())
        logger.debug("Manifest written with %d outputs", len(self.outputs))
        return path


def read_manifest(directory: str | Path) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DataError("Manifest not found", str(path))
    return Manifest.from_bytes(path.read_bytes(), source=str(path))

