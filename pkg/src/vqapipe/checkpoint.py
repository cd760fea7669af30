"""Checkpoint archives.

A checkpoint is a torch zip archive holding a dict::

    {"format_version": 1,
     "sections": {tag: {"manifest": {...}, "params": state_dict}}}

``pqanet`` and ``stanet`` are the section tags used by the two networks;
one file may carry either or both.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .errors import ConfigurationError

FORMAT_VERSION = 1


def save_sections(path: str | Path, sections: dict[str, tuple[dict, dict]]) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "sections": {
            tag: {"manifest": json.dumps(manifest, sort_keys=True), "params": {k: v.detach().clone() for k, v in params.items()}}
            for tag, (manifest, params) in sections.items()
        },
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_sections(path: str | Path) -> dict[str, tuple[dict, dict]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    return {tag: (json.loads(sec["manifest"]), sec["params"]) for tag, sec in payload["sections"].items()}


def _section(path, tag):
    sections = load_sections(path)
    if tag not in sections:
        raise ConfigurationError(f"{path}: no {tag!r} section (found {sorted(sections)})")
    return sections[tag]


def save_pqanet(path, model, **extra) -> None:
    manifest = {"format_version": FORMAT_VERSION, **model.cfg.to_dict(), **extra}
    save_sections(path, {"pqanet": (manifest, model.state_dict())})


def load_pqanet(path):
    from .pqanet import PQAConfig, PQANet

    manifest, params = _section(path, "pqanet")
    fields = {k: manifest[k] for k in ("mode", "channels", "embed_dim", "window", "heads", "mlp_ratio", "frames", "slope")}
    model = PQANet(PQAConfig(**fields))
    model.load_state_dict(params)
    model.eval()
    return model


def save_stanet(path, model, **extra) -> None:
    manifest = {"format_version": FORMAT_VERSION, **model.cfg.to_dict(), **extra}
    save_sections(path, {"stanet": (manifest, model.state_dict())})


def load_stanet(path):
    from .stanet import STAConfig, STANet

    manifest, params = _section(path, "stanet")
    fields = {k: manifest[k] for k in ("in_channels", "width", "grid", "slope")}
    model = STANet(STAConfig(**fields))
    model.load_state_dict(params)
    model.eval()
    return model


def read_manifest(path, tag: str) -> dict:
    return _section(path, tag)[0]
