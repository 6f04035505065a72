"""Checkpoint serialization: a JSON document, format version "dgs-v1".

Floats serialize through Python's repr (shortest round-trip form), so a
save/load cycle reproduces every parameter bit for bit and renders from a
reloaded model match the original exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .errors import ParseError, VersionMismatch
from .model import BoneSet, ModelConfig, ModelState, SurfelCloud
from .warp import WarpFieldMLP, WarpTable

FORMAT = "dgs-v1"


def _arr(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def model_to_dict(model: ModelState) -> dict:
    s, b = model.surfels, model.bones
    doc = {
        "format": FORMAT,
        "config": asdict(model.config),
        "surfels": {
            "centers": _arr(s.centers),
            "quats": _arr(s.quats),
            "log_scales": _arr(s.log_scales),
            "opacity_raw": _arr(s.opacity_raw),
            "sh": _arr(s.sh),
            "refine_quats": _arr(s.refine_quats),
            "refine_dscales": _arr(s.refine_dscales),
        },
        "bones": {
            "centers": _arr(b.centers),
            "quats": _arr(b.quats),
            "log_precision": _arr(b.log_precision),
            "latents": _arr(b.latents),
        },
    }
    w = model.warp
    if isinstance(w, WarpFieldMLP):
        doc["warp"] = {
            "kind": "mlp",
            "n_freq_x": w.n_freq_x,
            "n_freq_t": w.n_freq_t,
            "latent_dim": w.latent_dim,
            "hidden": w.hidden,
            "n_hidden": w.n_hidden,
            "weights": {k: _arr(v) for k, v in w.weights.items()},
        }
    elif isinstance(w, WarpTable):
        doc["warp"] = {"kind": "table", "raw": _arr(w.raw)}
    else:
        raise ParseError(f"unknown warp provider {type(w)!r}")
    return doc


def model_from_dict(doc: dict) -> ModelState:
    if not isinstance(doc, dict) or "format" not in doc:
        raise ParseError("checkpoint document missing format field")
    if doc["format"] != FORMAT:
        raise VersionMismatch(f"unsupported checkpoint format {doc['format']!r}")
    try:
        cfg_d = dict(doc["config"])
        cfg_d["background"] = tuple(cfg_d.get("background", (0.0, 0.0, 0.0)))
        config = ModelConfig(**cfg_d)
        sd = doc["surfels"]
        surfels = SurfelCloud(
            np.array(sd["centers"], dtype=np.float64).reshape(-1, 3),
            np.array(sd["quats"], dtype=np.float64).reshape(-1, 4),
            np.array(sd["log_scales"], dtype=np.float64).reshape(-1, 2),
            np.array(sd["opacity_raw"], dtype=np.float64).reshape(-1),
            np.array(sd["sh"], dtype=np.float64),
            np.array(sd["refine_quats"], dtype=np.float64).reshape(-1, 4),
            np.array(sd["refine_dscales"], dtype=np.float64).reshape(-1, 3),
        )
        bd = doc["bones"]
        bones = BoneSet(
            np.array(bd["centers"], dtype=np.float64).reshape(-1, 3),
            np.array(bd["quats"], dtype=np.float64).reshape(-1, 4),
            np.array(bd["log_precision"], dtype=np.float64).reshape(-1, 3),
            np.array(bd["latents"], dtype=np.float64),
        )
        wd = doc["warp"]
        if wd["kind"] == "mlp":
            warp = WarpFieldMLP(
                int(wd["n_freq_x"]),
                int(wd["n_freq_t"]),
                int(wd["latent_dim"]),
                int(wd["hidden"]),
                int(wd["n_hidden"]),
                {k: np.array(v, dtype=np.float64) for k, v in wd["weights"].items()},
            )
        elif wd["kind"] == "table":
            warp = WarpTable(np.array(wd["raw"], dtype=np.float64))
        else:
            raise ParseError(f"unknown warp kind {wd['kind']!r}")
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed checkpoint: {e}") from e
    return ModelState(surfels, bones, warp, config)


def save_checkpoint(model: ModelState, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=1)
        f.write("\n")


def load_checkpoint(path) -> ModelState:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid checkpoint JSON: {e}") from e
    return model_from_dict(doc)
