"""Parameters, SGD with polynomial learning-rate decay, and the NSCKPT
named-tensor checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import errors


class Parameter:
    """A trainable tensor with its gradient and momentum buffers."""

    __slots__ = ("value", "grad", "momentum_buf")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.momentum_buf = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class SgdSchedule:
    lr0: float = 1e-2
    total_steps: int = 1000
    power: float = 0.9
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr0 <= 0 or self.total_steps <= 0 or self.power <= 0:
            raise ValueError("lr0, total_steps and power must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, step: int) -> float:
        return self.lr0 * (1.0 - step / self.total_steps) ** self.power


def sgd_step(params, schedule: SgdSchedule, step_index: int) -> None:
    """Momentum SGD update at lr(t) = lr0 * (1 - t/T)^power; zeroes grads."""
    if step_index >= schedule.total_steps:
        raise errors.StepOverflow(f"step {step_index} >= total {schedule.total_steps}")
    lr = schedule.lr_at(step_index)
    for p in params:
        p.momentum_buf *= schedule.momentum
        p.momentum_buf += p.grad
        p.value -= lr * p.momentum_buf
        p.zero_grad()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. Keeps early training stable when the
    voxel-summed likelihood produces very large gradients.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = list(params)
    total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# NSCKPT checkpoint format: ASCII header, then float32 LE payloads in
# header order.
# ---------------------------------------------------------------------------

def save_params(named: dict, path) -> None:
    """named: ordered mapping name -> Parameter (or ndarray)."""
    items = [(k, v.value if isinstance(v, Parameter) else np.asarray(v)) for k, v in named.items()]
    try:
        with open(path, "wb") as fh:
            fh.write(b"NSCKPT 1\n")
            fh.write(f"{len(items)}\n".encode("ascii"))
            for name, arr in items:
                toks = [name, str(arr.ndim)] + [str(d) for d in arr.shape]
                fh.write((" ".join(toks) + "\n").encode("ascii"))
            for _, arr in items:
                fh.write(arr.astype("<f4").tobytes())
    except OSError as e:
        raise errors.IoFailure(str(e)) from e


def load_params(path) -> dict:
    """Returns an ordered mapping name -> float32 ndarray."""
    try:
        with open(path, "rb") as fh:
            if fh.readline() != b"NSCKPT 1\n":
                raise errors.MalformedHeader("bad checkpoint magic")
            try:
                count = int(fh.readline())
            except ValueError as e:
                raise errors.MalformedHeader("bad parameter count") from e
            specs = []
            for _ in range(count):
                toks = fh.readline().split()
                if len(toks) < 2:
                    raise errors.MalformedHeader("truncated parameter header")
                name = toks[0].decode("ascii")
                ndim = int(toks[1])
                shape = tuple(int(t) for t in toks[2 : 2 + ndim])
                if len(shape) != ndim:
                    raise errors.MalformedHeader(f"bad shape line for {name}")
                specs.append((name, shape))
            out = {}
            for name, shape in specs:
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * n)
                if len(buf) != 4 * n:
                    raise errors.SizeMismatch(f"truncated payload for {name}")
                out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        return out
    except OSError as e:
        raise errors.IoFailure(str(e)) from e
