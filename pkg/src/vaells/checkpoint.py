"""Binary checkpoint: a text header naming each tensor, then raw float64 payloads.

Layout::

    VAELLS-CKPT v1
    meta d=2 D=20 M=1 N_a=4 latent_scale=1 decoder_output=identity anchors_trainable=1
    hp zeta1 0.01
    ...
    tensor enc.W0 f64 512x20
    ...
    <blank line>
    <little-endian row-major payloads in header order>
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import AnchorSet, Hyperparameters, ModelState
from .nets import MlpParams
from .transport import TransportDictionary

MAGIC = "VAELLS-CKPT v1"


def _hp_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def parse_hp_value(name: str, text: str, kind):
    """Convert a textual value to the type of Hyperparameters field ``name``."""
    try:
        if kind is bool or kind == "bool":
            low = text.strip().lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            f = float(text)
            if f != int(f):
                raise ValueError(text)
            return int(f)
        if kind is float or kind == "float":
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def hp_field_types() -> dict:
    return {f.name: f.type for f in fields(Hyperparameters)}


def _tensors(model: ModelState):
    out = []
    for prefix, net in (("enc", model.encoder), ("dec", model.decoder)):
        for k, (W, b) in enumerate(zip(net.weights, net.biases)):
            out += [(f"{prefix}.W{k}", W), (f"{prefix}.b{k}", b)]
    for m, P in enumerate(model.dictionary.operators):
        out.append((f"psi.{m}", P))
    for i, a in enumerate(model.anchors.points):
        out.append((f"anchor.{i}", a))
    out.append(("anchor_labels", model.anchors.labels.astype(np.float64)))
    return out


def save_checkpoint(model: ModelState, hp: Hyperparameters, path) -> None:
    tensors = _tensors(model)
    lines = [MAGIC,
             f"meta d={model.dictionary.latent_dim} D={model.encoder.input_dim} "
             f"M={model.dictionary.num_operators} N_a={len(model.anchors)} "
             f"latent_scale={_hp_value(float(hp.latent_scale))} decoder_output={hp.decoder_output} "
             f"anchors_trainable={int(model.anchors.trainable)}"]
    for f in fields(Hyperparameters):
        lines.append(f"hp {f.name} {_hp_value(getattr(hp, f.name))}")
    for name, arr in tensors:
        lines.append(f"tensor {name} f64 {'x'.join(str(s) for s in arr.shape)}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _bad(path, lineno, msg):
    return ConfigurationError(f"{path}: header line {lineno}: {msg}")


def load_checkpoint(path):
    """Return ``(model, hp)``; malformed files raise ConfigurationError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    end = blob.find(b"\n\n")
    if end < 0:
        raise _bad(path, 1, "no blank line terminating the header")
    try:
        lines = blob[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise _bad(path, 1, "header is not UTF-8") from None
    if lines[0] != MAGIC:
        raise _bad(path, 1, f"expected {MAGIC!r}, found {lines[0][:40]!r}")
    types = hp_field_types()
    hp_vals, meta, specs = {}, None, []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            raise _bad(path, lineno, "empty line inside header")
        if parts[0] == "meta":
            try:
                meta = dict(p.split("=", 1) for p in parts[1:])
            except ValueError:
                raise _bad(path, lineno, "meta entries must be key=value") from None
        elif parts[0] == "hp":
            if len(parts) != 3 or parts[1] not in types:
                raise _bad(path, lineno, f"bad hyperparameter line {line!r}")
            hp_vals[parts[1]] = parse_hp_value(parts[1], parts[2], types[parts[1]])
        elif parts[0] == "tensor":
            if len(parts) != 4 or parts[2] != "f64":
                raise _bad(path, lineno, f"bad tensor line {line!r}")
            try:
                shape = tuple(int(s) for s in parts[3].split("x"))
            except ValueError:
                raise _bad(path, lineno, f"bad shape {parts[3]!r}") from None
            specs.append((parts[1], shape))
        else:
            raise _bad(path, lineno, f"unknown record {parts[0]!r}")
    if meta is None:
        raise _bad(path, 2, "missing meta line")
    payload = blob[end + 2:]
    need = sum(8 * int(np.prod(s)) for _, s in specs)
    if len(payload) != need:
        raise ConfigurationError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    arrays, off = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    try:
        hp = Hyperparameters(**hp_vals)
        model = _assemble(arrays, meta, hp)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{path}: inconsistent checkpoint ({exc})") from exc
    return model, hp


def _mlp(arrays, prefix, activations):
    weights, biases, k = [], [], 0
    while f"{prefix}.W{k}" in arrays:
        weights.append(arrays[f"{prefix}.W{k}"])
        biases.append(arrays[f"{prefix}.b{k}"])
        k += 1
    if not weights or len(weights) != len(activations):
        raise KeyError(f"{prefix} layers")
    return MlpParams(weights, biases, activations)


def _assemble(arrays, meta, hp: Hyperparameters) -> ModelState:
    M, n_a = int(meta["M"]), int(meta["N_a"])
    enc = _mlp(arrays, "enc", ["relu", "identity"])
    dec = _mlp(arrays, "dec", ["relu", meta.get("decoder_output", hp.decoder_output)])
    psi = TransportDictionary(np.stack([arrays[f"psi.{m}"] for m in range(M)]))
    points = np.stack([arrays[f"anchor.{i}"] for i in range(n_a)])
    labels = arrays["anchor_labels"].astype(np.int64)
    anchors = AnchorSet(points, labels, meta.get("anchors_trainable", "1") == "1")
    return ModelState(enc, dec, psi, anchors)
