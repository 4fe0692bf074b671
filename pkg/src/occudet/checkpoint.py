"""Deterministic array-archive persistence for model and optimizer state.

Checkpoints are zip archives of raw .npy members (readable with np.load)
written with fixed zip metadata, so identical state produces byte-identical
files. Member names:

    param.<name>   trainable parameter value, flat per the model's naming
    buffer.<name>  non-trainable buffer (batchnorm statistics, head.fc.u)
    opt.m.<name>   Adam first-moment buffer
    opt.v.<name>   Adam second-moment buffer
    opt.step       Adam step counter, scalar
    __meta__       JSON string: format_version, model_id, rng_state, extras
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

FORMAT_VERSION = 1

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointMismatch(ValueError):
    """Raised when stored arrays do not line up with the live model."""


def write_array_archive(path, arrays: dict) -> None:
    """Write arrays as a zip of .npy members with fixed timestamps."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[key]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o600 << 16
            zf.writestr(info, buf.getvalue())


def read_array_archive(path) -> dict:
    with np.load(path) as npz:
        return {k: npz[k] for k in npz.files}


def save_checkpoint(path, store, optimizer=None, rng_state=None, extra=None) -> None:
    """Persist a ParamStore (and optionally optimizer/RNG state) to path."""
    arrays = {}
    for name, t in store.params.items():
        arrays[f"param.{name}"] = t.data
    for name, arr in store.buffers.items():
        arrays[f"buffer.{name}"] = arr
    meta = {"format_version": FORMAT_VERSION}
    if optimizer is not None:
        state = optimizer.state() if hasattr(optimizer, "state") else optimizer
        for name, arr in state["m"].items():
            arrays[f"opt.m.{name}"] = arr
        for name, arr in state["v"].items():
            arrays[f"opt.v.{name}"] = arr
        arrays["opt.step"] = np.array(state["step"], dtype=np.int64)
    if rng_state is not None:
        meta["rng_state"] = rng_state
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    write_array_archive(path, arrays)


def load_checkpoint(path) -> dict:
    """Read a checkpoint into {'params', 'buffers', 'opt', 'meta'} dicts."""
    arrays = read_array_archive(path)
    out = {"params": {}, "buffers": {}, "opt": {"m": {}, "v": {}, "step": 0},
           "meta": {}}
    for key, arr in arrays.items():
        if key == "__meta__":
            out["meta"] = json.loads(str(arr))
        elif key == "opt.step":
            out["opt"]["step"] = int(arr)
        elif key.startswith("param."):
            out["params"][key[len("param."):]] = arr
        elif key.startswith("buffer."):
            out["buffers"][key[len("buffer."):]] = arr
        elif key.startswith("opt.m."):
            out["opt"]["m"][key[len("opt.m."):]] = arr
        elif key.startswith("opt.v."):
            out["opt"]["v"][key[len("opt.v."):]] = arr
        else:
            raise CheckpointMismatch(f"unrecognized archive member {key!r}")
    return out


def load_into(store, checkpoint: dict) -> None:
    """Copy checkpoint params/buffers into a live ParamStore, shape-checked."""
    diffs = []
    for kind, live in (("params", store.params), ("buffers", store.buffers)):
        stored = checkpoint[kind]
        for name in sorted(set(live) | set(stored)):
            if name not in stored:
                diffs.append(f"{kind[:-1]} {name}: missing from checkpoint")
            elif name not in live:
                diffs.append(f"{kind[:-1]} {name}: not present in model")
            else:
                live_shape = live[name].shape if kind == "buffers" else live[name].data.shape
                if tuple(stored[name].shape) != tuple(live_shape):
                    diffs.append(
                        f"{kind[:-1]} {name}: checkpoint {stored[name].shape} "
                        f"vs model {live_shape}")
    if diffs:
        raise CheckpointMismatch(
            "checkpoint does not match the model architecture:\n  "
            + "\n  ".join(diffs))
    store.restore({"params": checkpoint["params"], "buffers": checkpoint["buffers"]})
