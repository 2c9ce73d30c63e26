"""Run manifests: resolved config, input/output digests, and replay support.

Every CLI subcommand leaves exactly one ``manifest.json`` in its output
directory. Digests are 64-bit content hashes; numeric outputs are
byte-stable under a fixed seed, so re-running from a manifest must
reproduce the recorded output digests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import DataError

__all__ = ["file_digest", "RunManifest", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"


def file_digest(path) -> str:
    """64-bit blake2b content hash, hex encoded."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    tool_version: str
    subcommand: str
    config: dict
    master_seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = ""
    failed_stage: str | None = None

    def record_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def record_output(self, out_dir, relpath) -> None:
        self.outputs[str(relpath)] = file_digest(Path(out_dir) / relpath)

    def write(self, out_dir) -> Path:
        self.finished = _now()
        target = Path(out_dir) / MANIFEST_NAME
        payload = {
            "tool_version": self.tool_version,
            "subcommand": self.subcommand,
            "config": self.config,
            "master_seed": self.master_seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }
        if self.failed_stage is not None:
            payload["failed_stage"] = self.failed_stage
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return target

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: not a valid manifest ({exc})") from None
        for key in ("tool_version", "subcommand", "config", "inputs", "outputs"):
            if key not in payload:
                raise DataError(f"{path}: manifest missing field {key!r}")
        return cls(
            tool_version=payload["tool_version"],
            subcommand=payload["subcommand"],
            config=payload["config"],
            master_seed=payload.get("master_seed"),
            inputs=payload["inputs"],
            outputs=payload["outputs"],
            started=payload.get("started", ""),
            finished=payload.get("finished", ""),
            failed_stage=payload.get("failed_stage"),
        )

    def verify_inputs(self) -> list[str]:
        """Paths whose current digest differs from the recorded one."""
        bad = []
        for path, digest in self.inputs.items():
            if not Path(path).exists() or file_digest(path) != digest:
                bad.append(path)
        return bad
