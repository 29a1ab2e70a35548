"""Binary checkpoint format.

Layout: ``b"DEWI"`` | format version (uint32 LE) | header length (uint64 LE) |
UTF-8 JSON header | arrays as little-endian float64, in header order.
The header holds the model config, optional train config and trainer scalars
(including RNG states; JSON floats round-trip exactly). Arrays are model
parameters in declaration order, running statistics, then momentum buffers
and the best-validation snapshot.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import DeWiModel, ModelConfig, build_model, config_dict
from .trainer import EpochLog, TrainConfig, TrainerState, train_config_dict

MAGIC = b"DEWI"
VERSION = 1
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _rng_state(g: Optional[np.random.Generator]):
    return None if g is None else g.bit_generator.state


def _rng_from(st) -> Optional[np.random.Generator]:
    if st is None:
        return None
    bitgen = getattr(np.random, st["bit_generator"])()
    bitgen.state = st
    return np.random.Generator(bitgen)


def save_checkpoint(model: DeWiModel, path: Union[str, os.PathLike], state: Optional[TrainerState] = None,
                    train_config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    """Write atomically (via a temporary sibling). ``extra`` is any JSON-able
    dict stored verbatim in the header."""
    arrays = [("param", n, p.data) for n, p in model.params.items()]
    arrays += [("buffer", n, b) for n, b in model.buffers.items()]
    header = {
        "model_config": config_dict(model.config),
        "train_config": train_config_dict(train_config) if train_config else None,
        "bn_updates": model.bn_updates,
        "state": None,
        "extra": extra,
    }
    if state is not None:
        arrays += [("momentum", n, v) for n, v in state.momentum.items()]
        if state.best_state is not None:
            arrays += [("best", n, v) for n, v in state.best_state.items()]
        header["state"] = {
            "epoch": state.epoch, "iteration": state.iteration, "deep_turn": state.deep_turn,
            "global_step": state.global_step, "best_acc": state.best_acc,
            "deep_sum": state.deep_sum, "deep_count": state.deep_count,
            "wide_sum": state.wide_sum, "wide_count": state.wide_count,
            "stage": state.stage, "step_tags": "".join(state.step_tags),
            "last_loss": float(state.last_loss),
            "rng_dropout": _rng_state(state.rng_dropout), "rng_mixup": _rng_state(state.rng_mixup),
            "log": [vars(e) for e in state.log],
        }
    header["arrays"] = [{"kind": k, "name": n, "shape": list(a.shape)} for k, n, a in arrays]
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_LE).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, os.PathLike], with_extra: bool = False):
    """Return ``(model, state, train_config)``, plus the ``extra`` dict when
    ``with_extra``; state, config and extra may be None."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DeWi checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    offset = 16 + hlen
    groups = {"param": {}, "buffer": {}, "momentum": {}, "best": {}}
    if not isinstance(header, dict) or "arrays" not in header or "model_config" not in header:
        raise CheckpointError(f"{path}: header lacks required fields")
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data at array {spec['name']}")
        arr = np.frombuffer(raw, dtype=_LE, count=n, offset=offset).astype(np.float64)
        groups[spec["kind"]][spec["name"]] = arr.reshape(spec["shape"])
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")

    mc = dict(header["model_config"])
    model = build_model(ModelConfig(**mc), np.random.default_rng(0))
    if set(model.params) != set(groups["param"]) or set(model.buffers) != set(groups["buffer"]):
        raise CheckpointError(f"{path}: stored arrays do not match the model layout")
    model.load_state({**groups["param"], **groups["buffer"]})
    model.bn_updates = header.get("bn_updates", 0)

    tc = header.get("train_config")
    train_config = TrainConfig(**tc) if tc else None
    st = header.get("state")
    state = None
    if st is not None:
        log_fields = {f.name for f in fields(EpochLog)}
        state = TrainerState(
            epoch=st["epoch"], iteration=st["iteration"], deep_turn=st["deep_turn"],
            global_step=st["global_step"], momentum=groups["momentum"],
            rng_dropout=_rng_from(st["rng_dropout"]), rng_mixup=_rng_from(st["rng_mixup"]),
            best_acc=st["best_acc"], best_state=groups["best"] or None,
            log=[EpochLog(**{k: v for k, v in e.items() if k in log_fields}) for e in st["log"]],
            deep_sum=st["deep_sum"], deep_count=st["deep_count"],
            wide_sum=st["wide_sum"], wide_count=st["wide_count"],
            stage=st["stage"], step_tags=list(st["step_tags"]), last_loss=st["last_loss"])
    if with_extra:
        return model, state, train_config, header.get("extra")
    return model, state, train_config
