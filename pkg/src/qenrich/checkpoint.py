"""Checkpoint directories: config JSON + vocabulary files + parameter blob."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

from .corpus import Vocabulary

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def fingerprint(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save(directory, kind: str, config: dict, vocabs: dict[str, Vocabulary],
         module: torch.nn.Module, meta: dict | None = None) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fp = fingerprint(module)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "vocabs": sorted(vocabs),
        "fingerprint": fp,
        "meta": meta or {},
    }
    (directory / "config.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    for name, vocab in vocabs.items():
        vocab.save(directory / f"{name}.vocab")
    buf = io.BytesIO()
    torch.save({"format_version": FORMAT_VERSION, "state_dict": module.state_dict()}, buf)
    (directory / "params.pt").write_bytes(buf.getvalue())
    return fp


def read_header(directory, kind: str) -> dict:
    path = Path(directory) / "config.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    header = json.loads(path.read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{directory}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{directory}: expected a {kind} checkpoint, found {header.get('kind')}")
    return header


def load(directory, kind: str) -> tuple[dict, dict[str, Vocabulary], dict]:
    """Return (header, vocabularies, state_dict)."""
    directory = Path(directory)
    header = read_header(directory, kind)
    vocabs = {name: Vocabulary.load(directory / f"{name}.vocab") for name in header["vocabs"]}
    blob = torch.load(directory / "params.pt", map_location="cpu", weights_only=True)
    if blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{directory}: parameter blob version mismatch")
    return header, vocabs, blob["state_dict"]
